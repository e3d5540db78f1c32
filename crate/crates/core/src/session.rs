//! End-to-end runs driven by a [`RunConfig`]: datasets, model, training
//! loop, metrics file and per-epoch checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Task};
use crate::data::{load_mnist, synth_corpus, DatasetSplit, MnistSplit};
use crate::error::{Error, Result};
use crate::nn::Drn;
use crate::rng::{streams, Rng};
use crate::train::{append_metrics, evaluate, fit, Checkpoint, EpochRecord, FitOptions, Metrics, Sgd, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Train and held-out splits for a run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

fn limit(split: DatasetSplit, n: usize) -> DatasetSplit {
    if n == 0 {
        split
    } else {
        split.take(n)
    }
}

/// Synthetic strings drawn from MNIST glyphs; train strings use training
/// glyphs and held-out strings use test glyphs.
pub fn synth_split(cfg: &RunConfig, mnist: &DatasetSplit, held_out: bool, count: usize) -> Result<DatasetSplit> {
    let stream = if held_out {
        streams::SYNTH_TEST
    } else {
        streams::SYNTH_TRAIN
    };
    synth_corpus(
        &mut Rng::with_stream(cfg.seed(), stream),
        mnist,
        &cfg.synth_spec(),
        count,
    )
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let dir = cfg.path("data.mnist_dir");
    let train = load_mnist(&dir, MnistSplit::Train)?;
    let test = load_mnist(&dir, MnistSplit::Test)?;
    let (n_train, n_test) = (cfg.usize("data.train_samples"), cfg.usize("data.test_samples"));
    Ok(match cfg.task() {
        Task::Mnist => Datasets {
            train: limit(train, n_train),
            test: limit(test, n_test),
        },
        Task::Sequence => {
            let n_train = if n_train == 0 { train.len() } else { n_train };
            let n_test = if n_test == 0 { test.len() } else { n_test };
            Datasets {
                train: synth_split(cfg, &train, false, n_train)?,
                test: synth_split(cfg, &test, true, n_test)?,
            }
        }
    })
}

/// Model and optimizer as configured, with fresh parameters.
pub fn build(cfg: &RunConfig) -> Result<(Drn<f32>, Sgd<f32>)> {
    let model = Drn::new(cfg.model_config()?, cfg.seed())?;
    let sgd = Sgd::new(cfg.sgd_config()?, model.params())?;
    Ok((model, sgd))
}

/// Model rebuilt from a checkpoint's stored configuration.
pub fn restore(ck: &Checkpoint) -> Result<(RunConfig, Drn<f32>, Sgd<f32>)> {
    let cfg = RunConfig::parse(&ck.config_text()?)?;
    let (mut model, mut sgd) = build(&cfg)?;
    ck.restore(&mut model, Some(&mut sgd))?;
    Ok((cfg, model, sgd))
}

pub struct RunOutcome {
    pub model: Drn<f32>,
    pub sgd: Sgd<f32>,
    pub records: Vec<EpochRecord>,
    /// Held-out metrics after the last epoch that ran.
    pub test: Metrics,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Trains from scratch, or continues from `resume`. With `out_dir` set the
/// metrics file is (re)written there and a checkpoint is saved after every
/// epoch. `on_epoch` sees each epoch's records as they are produced.
pub fn run(
    cfg: &RunConfig,
    data: &Datasets,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&[EpochRecord]),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (mut model, mut sgd, mut rng, start) = match resume {
        Some(ck) => {
            let (_, model, sgd) = restore(ck)?;
            (model, sgd, ck.rng()?, ck.epoch()?)
        }
        None => {
            let (model, sgd) = build(cfg)?;
            (model, sgd, Rng::with_stream(cfg.seed(), streams::TRAIN), 0)
        }
    };
    let config_text = cfg.to_text();
    let paths = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let metrics = dir.join(METRICS_FILE);
            if resume.is_none() && metrics.exists() {
                fs::remove_file(&metrics)?;
            }
            Some((metrics, dir.join(CHECKPOINT_FILE)))
        }
        None => None,
    };
    let patience = cfg.usize("run.patience");
    let opts = FitOptions {
        epochs: cfg.usize("run.epochs"),
        batch_size: cfg.usize("data.batch_size"),
        eval_batch_size: cfg.usize("data.eval_batch_size"),
        patience: (patience > 0).then_some(patience),
    };
    let records = fit(
        &mut model,
        &data.train,
        Some(&data.test),
        TrainState {
            sgd: &mut sgd,
            rng: &mut rng,
            start_epoch: start,
        },
        opts,
        |m, s, r, done, fresh| {
            on_epoch(fresh);
            if let Some((metrics, ck)) = &paths {
                append_metrics(metrics, fresh)?;
                Checkpoint::capture(m, s, done, r, &config_text).save(ck)?;
            }
            Ok(())
        },
    )?;
    let test = match records.last() {
        Some(r) => r.metrics,
        None => evaluate(&mut model, &data.test, opts.eval_batch_size)?,
    };
    let (metrics_path, checkpoint_path) = match paths {
        Some((m, c)) => (Some(m), Some(c)),
        None => (None, None),
    };
    Ok(RunOutcome {
        model,
        sgd,
        records,
        test,
        metrics_path,
        checkpoint_path,
    })
}

/// Named evaluation splits: `mnist-train`, `mnist-test`, `synth-train`,
/// `synth-test`, or `corpus:<dir>` for a directory written by
/// [`crate::data::write_corpus`].
pub fn named_split(cfg: &RunConfig, name: &str) -> Result<DatasetSplit> {
    let dir = cfg.path("data.mnist_dir");
    let synth_count = |key: &str, all: usize| match cfg.usize(key) {
        0 => all,
        n => n,
    };
    match name {
        "mnist-train" => load_mnist(&dir, MnistSplit::Train),
        "mnist-test" => load_mnist(&dir, MnistSplit::Test),
        "synth-train" => {
            let glyphs = load_mnist(&dir, MnistSplit::Train)?;
            let n = synth_count("data.train_samples", glyphs.len());
            synth_split(cfg, &glyphs, false, n)
        }
        "synth-test" => {
            let glyphs = load_mnist(&dir, MnistSplit::Test)?;
            let n = synth_count("data.test_samples", glyphs.len());
            synth_split(cfg, &glyphs, true, n)
        }
        _ => match name.strip_prefix("corpus:") {
            Some(path) => crate::data::read_corpus(Path::new(path), cfg.task() == Task::Sequence),
            None => Err(Error::Parse(format!(
                "unknown split `{name}` (expected mnist-train, mnist-test, synth-train, synth-test or corpus:<dir>)"
            ))),
        },
    }
}
