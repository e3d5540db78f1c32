use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drn_core::config::{schema_help, RunConfig, Task};
use drn_core::cost::compare_blocks;
use drn_core::ctc::{greedy_decode_raw, oracle_suite};
use drn_core::data::{write_corpus, Label, GLYPH};
use drn_core::gradcheck::{suite, GradCheckConfig};
use drn_core::nn::{Combine, ConvFlavor, DenseBlockSpec, FeatureTag, Head};
use drn_core::session::{self, named_split};
use drn_core::train::{evaluate, Checkpoint};
use drn_core::{AlphabetSpec, Error, Tensor};

#[derive(Parser)]
#[command(
    name = "drn",
    version,
    about = "Dense residual networks: training, evaluation and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file (`key = value` lines under [model], [optimizer], [data], [run]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set optimizer.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, base: Option<RunConfig>) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse(&read_text(path)?)?,
            None => base.unwrap_or_default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and checkpoint.bin under run.out_dir.
    #[command(after_help = schema_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    #[command(after_help = schema_help())]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// mnist-train, mnist-test, synth-train, synth-test or corpus:<dir>.
        #[arg(long)]
        split: String,
        /// Overrides applied to the configuration stored in the checkpoint.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Parameter and multiply-accumulate counts of standard vs refined dense blocks.
    #[command(after_help = schema_help())]
    CostReport {
        #[arg(long = "L", value_name = "L")]
        layers: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        c0: usize,
        /// standard or depthwise_separable.
        #[arg(long, default_value = "standard")]
        flavor: ConvFlavor,
        /// Feature-map height used for MAC counts.
        #[arg(long, default_value_t = 28)]
        height: usize,
        #[arg(long, default_value_t = 28)]
        width: usize,
        /// Print the per-layer table as CSV instead of text.
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference gradient checks in f64.
    #[command(after_help = schema_help())]
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the CTC likelihood with brute-force path enumeration.
    #[command(after_help = schema_help())]
    CtcOracle {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Transcribe images with a checkpoint (greedy CTC, or argmax for a classifier).
    #[command(after_help = schema_help())]
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG or PGM images; resized to the model input if needed.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write infer-mode features as CSV, one row per sample (label first).
    #[command(after_help = schema_help())]
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: String,
        /// shallow, global, down, penultimate or logits.
        #[arg(long, default_value = "penultimate")]
        layer: FeatureTag,
        /// Only the first N samples (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate a synthetic digit-string corpus directory.
    #[command(after_help = schema_help())]
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Draw glyphs from the MNIST test images (held-out stream).
        #[arg(long)]
        held_out: bool,
    },
    /// Print the resolved configuration.
    #[command(after_help = schema_help())]
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from this task's defaults.
        #[arg(long, default_value = "mnist")]
        task: String,
    },
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_checkpoint(path: &Path, overrides: &[String]) -> Result<(RunConfig, drn_core::Drn<f32>), Error> {
    let ck = Checkpoint::load(path)?;
    let (mut cfg, model, _) = session::restore(&ck)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok((cfg, model))
}

fn load_image(path: &Path, (h, w): (usize, usize)) -> Result<Tensor<f32>, Error> {
    let img = image::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .into_luma8();
    let img = if (img.height() as usize, img.width() as usize) == (h, w) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
    };
    Tensor::new(vec![1, 1, h, w], img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut out = std::io::stdout();
    match cli.command {
        Command::Train { cfg, resume } => {
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let base = match &resume {
                Some(ck) => Some(RunConfig::parse(&ck.config_text()?)?),
                None => None,
            };
            let cfg = cfg.load(base)?;
            let data = session::load_datasets(&cfg)?;
            let dir = cfg.path("run.out_dir");
            let outcome = session::run(&cfg, &data, Some(&dir), resume.as_ref(), |records| {
                for r in records {
                    let _ = writeln!(
                        std::io::stdout(),
                        "epoch {} {} loss {:.6} accuracy {:.4} lr {}",
                        r.epoch,
                        r.split,
                        r.metrics.loss,
                        r.metrics.accuracy,
                        r.lr
                    );
                }
            })?;
            writeln!(
                out,
                "done accuracy {:.4} samples {} metrics {} checkpoint {}",
                outcome.test.accuracy,
                outcome.test.samples,
                outcome.metrics_path.unwrap_or_default().display(),
                outcome.checkpoint_path.unwrap_or_default().display()
            )?;
        }
        Command::Eval {
            checkpoint,
            split,
            overrides,
        } => {
            let (cfg, mut model) = load_checkpoint(&checkpoint, &overrides)?;
            let data = named_split(&cfg, &split)?;
            let m = evaluate(&mut model, &data, cfg.usize("data.eval_batch_size"))?;
            writeln!(
                out,
                "split {split} samples {} loss {:.6} accuracy {:.4}",
                m.samples, m.loss, m.accuracy
            )?;
        }
        Command::CostReport {
            layers,
            k,
            c0,
            flavor,
            height,
            width,
            csv,
        } => {
            let spec = DenseBlockSpec::new(layers, k, c0, Combine::Concat).with_flavor(flavor);
            spec.validate()?;
            let report = compare_blocks(&spec, flavor, (height, width));
            if csv {
                write!(out, "{}", report.to_csv())?;
            } else {
                write!(out, "{}", report.to_text())?;
            }
        }
        Command::Gradcheck { seed } => {
            let reports = suite(&GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            })?;
            let mut failed = Vec::new();
            for r in &reports {
                writeln!(out, "{r}")?;
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Config(format!("gradient checks failed: {}", failed.join(", "))));
            }
            writeln!(out, "all {} checks passed", reports.len())?;
        }
        Command::CtcOracle { cases, seed, tolerance } => {
            let r = oracle_suite(cases, seed)?;
            writeln!(out, "{r}")?;
            if !r.passed(tolerance) {
                return Err(Error::Config(format!("ctc oracle mismatch above {tolerance:e}")));
            }
            writeln!(out, "ok")?;
        }
        Command::Decode { checkpoint, images } => {
            let (_, mut model) = load_checkpoint(&checkpoint, &[])?;
            let input = model.config().input;
            let head = model.config().head;
            let alphabet = AlphabetSpec::digits();
            for path in &images {
                let logits = model.logits(&load_image(path, input)?)?;
                let text = match head {
                    Head::Sequence { alphabet: v, .. } => {
                        let seq = greedy_decode_raw(logits.data(), v);
                        if v == alphabet.size() {
                            alphabet.render(&seq)
                        } else {
                            seq.to_string()
                        }
                    }
                    Head::Classify { .. } => {
                        let d = logits.data();
                        let best = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
                        best.to_string()
                    }
                };
                writeln!(out, "{}\t{text}", path.display())?;
            }
        }
        Command::ExportFeatures {
            checkpoint,
            split,
            layer,
            limit,
            out: dest,
            overrides,
        } => {
            let (cfg, mut model) = load_checkpoint(&checkpoint, &overrides)?;
            let mut data = named_split(&cfg, &split)?;
            if limit > 0 {
                data = data.take(limit);
            }
            let mut text = String::new();
            let idx: Vec<usize> = (0..data.len()).collect();
            for chunk in idx.chunks(cfg.usize("data.eval_batch_size")) {
                let feats = model.export_features(&data.stack(chunk)?, layer)?;
                let d = feats.shape()[1];
                for (row, &i) in feats.data().chunks(d).zip(chunk) {
                    match data.label(i) {
                        Label::Class(c) => text.push_str(&c.to_string()),
                        Label::Sequence(s) => text.push_str(&AlphabetSpec::digits().render(s)),
                    }
                    for v in row {
                        text.push(',');
                        text.push_str(&v.to_string());
                    }
                    text.push('\n');
                }
            }
            fs::write(&dest, text)?;
            writeln!(out, "wrote {} rows to {}", data.len(), dest.display())?;
        }
        Command::Synth {
            cfg,
            out: dest,
            count,
            held_out,
        } => {
            let cfg = cfg.load(Some(RunConfig::new(Task::Sequence)))?;
            let glyph_split = if held_out { "mnist-test" } else { "mnist-train" };
            let glyphs = named_split(&cfg, glyph_split)?;
            debug_assert_eq!(glyphs.dims(), (GLYPH, GLYPH));
            let corpus = session::synth_split(&cfg, &glyphs, held_out, count)?;
            write_corpus(&dest, &corpus)?;
            writeln!(out, "wrote {count} strings to {}", dest.display())?;
        }
        Command::PrintConfig { cfg, task } => {
            let task = match task.as_str() {
                "mnist" => Task::Mnist,
                "sequence" => Task::Sequence,
                other => return Err(Error::Parse(format!("unknown task `{other}`"))),
            };
            let cfg = cfg.load(Some(RunConfig::new(task)))?;
            write!(out, "{}", cfg.to_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
