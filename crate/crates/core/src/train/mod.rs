//! SGD with learning-rate schedules, the epoch loop, evaluation and metrics.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::ctc::{ctc_loss_grad_raw, greedy_decode_raw, LabelSeq};
use crate::data::{BatchIter, DatasetSplit, Label};
use crate::error::{config_err, Error, Result};
use crate::kernels::log_softmax_rows;
use crate::nn::{Drn, Head, Targets};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `base` before epoch 50, `base/10` for epochs 50..=100, `base/100` after.
    Step,
    /// `base · gamma^epoch`.
    Exponential { gamma: f64 },
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Step if epoch < 50 => base,
            Schedule::Step if epoch <= 100 => base * 0.1,
            Schedule::Step => base * 0.01,
            Schedule::Exponential { gamma } => base * gamma.powi(epoch as i32),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Step => f.write_str("step"),
            Schedule::Exponential { .. } => f.write_str("exponential"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Exponential { gamma: 0.4 },
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(config_err(format!(
                "base learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config_err(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Schedule::Exponential { gamma } = self.schedule {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(config_err(format!("decay factor must lie in (0, 1], got {gamma}")));
            }
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.schedule.lr(self.base_lr, epoch)
    }
}

/// Momentum SGD; one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Scalar> {
    config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let velocity = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Ok(Sgd { config, velocity })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.velocity
    }

    /// Applies one update at the rate for `epoch` and clears the gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        let lr = self.config.lr_at_epoch(epoch);
        self.step_with_lr(store, lr)
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        let lr = T::of(lr);
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let w = p.value.data_mut();
            for ((w, v), &g) in w.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Mean loss and accuracy over one pass of a split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Running sums behind [`Metrics`].
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    loss: f64,
    correct: usize,
    samples: usize,
}

impl Tally {
    fn add(&mut self, mean_loss: f64, correct: usize, n: usize) {
        self.loss += mean_loss * n as f64;
        self.correct += correct;
        self.samples += n;
    }

    fn metrics(&self) -> Metrics {
        let n = self.samples.max(1) as f64;
        Metrics {
            loss: self.loss / n,
            accuracy: self.correct as f64 / n,
            samples: self.samples,
        }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of samples whose prediction matches exactly: argmax for a
/// classifier, the whole greedy-decoded string for a sequence head.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[Label]) -> Result<usize> {
    let b = labels.len();
    if b == 0 || logits.len() % b != 0 {
        return Err(config_err("logits do not match the label count"));
    }
    let row = logits.len() / b;
    let vocab = *logits.shape().last().unwrap_or(&1);
    let mut correct = 0;
    for (scores, label) in logits.data().chunks(row).zip(labels) {
        correct += match label {
            Label::Class(c) => usize::from(argmax(scores) == *c),
            Label::Sequence(s) => usize::from(&greedy_decode_raw(scores, vocab) == s),
        };
    }
    Ok(correct)
}

/// Mean loss of infer-mode logits against their labels, in f64.
fn batch_loss<T: Scalar>(logits: &Tensor<T>, labels: &[Label]) -> Result<f64> {
    let b = labels.len();
    let vocab = *logits.shape().last().unwrap_or(&1);
    let row = logits.len() / b;
    let mut total = 0.0;
    for (scores, label) in logits.data().chunks(row).zip(labels) {
        let raw: Vec<f64> = scores.iter().map(|v| v.as_f64()).collect();
        let lp = log_softmax_rows(&raw, vocab);
        total += match label {
            Label::Class(c) => -lp[*c],
            Label::Sequence(s) => ctc_loss_grad_raw(&lp, row / vocab, vocab, s)?.0,
        };
    }
    Ok(total / b as f64)
}

fn targets_of(head: Head, labels: &[Label], classes: &mut Vec<usize>, seqs: &mut Vec<LabelSeq>) -> Result<()> {
    classes.clear();
    seqs.clear();
    for l in labels {
        match (head, l) {
            (Head::Classify { .. }, Label::Class(c)) => classes.push(*c),
            (Head::Sequence { .. }, Label::Sequence(s)) => seqs.push(s.clone()),
            _ => return Err(config_err("split labels do not match the model head")),
        }
    }
    Ok(())
}

/// One shuffled pass over `split` with an update per batch at rate `lr`. The shuffle
/// permutation and dropout masks both come from `rng`. Accuracy is measured
/// on the train-mode logits as the epoch runs.
pub fn train_epoch<T: Scalar>(
    model: &mut Drn<T>,
    split: &DatasetSplit,
    sgd: &mut Sgd<T>,
    lr: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Metrics> {
    let head = model.config().head;
    let order = BatchIter::shuffled(split, batch_size, rng)?.order().to_vec();
    let mut tally = Tally::default();
    let (mut classes, mut seqs) = (Vec::new(), Vec::new());
    model.params_mut().zero_grad();
    for indices in order.chunks(batch_size) {
        let images = split.stack(indices)?.cast::<T>();
        let labels: Vec<Label> = indices.iter().map(|&i| split.label(i).clone()).collect();
        targets_of(head, &labels, &mut classes, &mut seqs)?;
        let targets = match head {
            Head::Classify { .. } => Targets::Classes(&classes),
            Head::Sequence { .. } => Targets::Sequences(&seqs),
        };
        let (loss, logits) = model.train_step(&images, targets, rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        sgd.step_with_lr(model.params_mut(), lr)?;
        tally.add(loss, count_correct(&logits, &labels)?, indices.len());
    }
    Ok(tally.metrics())
}

/// Infer-mode loss and accuracy over `split` in storage order.
pub fn evaluate<T: Scalar>(model: &mut Drn<T>, split: &DatasetSplit, batch_size: usize) -> Result<Metrics> {
    let mut tally = Tally::default();
    for batch in BatchIter::sequential(split, batch_size)? {
        let logits = model.logits(&batch.images.cast::<T>())?;
        let loss = batch_loss(&logits, &batch.labels)?;
        tally.add(loss, count_correct(&logits, &batch.labels)?, batch.labels.len());
    }
    Ok(tally.metrics())
}

/// One line of the metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub metrics: Metrics,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split `{s}`"))),
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr";

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:?},{:?},{:?}",
            self.epoch, self.split, self.metrics.loss, self.metrics.accuracy, self.lr
        )
    }
}

/// Appends records, writing the header first if the file is new or empty.
pub fn append_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = String::new();
    if f.metadata()?.len() == 0 {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Controls for [`fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Stop once the test loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

/// Everything the epoch loop needs besides the model.
pub struct TrainState<'a, T: Scalar> {
    pub sgd: &'a mut Sgd<T>,
    pub rng: &'a mut Rng,
    /// First epoch to run; non-zero when resuming.
    pub start_epoch: usize,
}

/// Runs epochs `start_epoch..epochs`, evaluating on `test` after each one
/// when given. `after_epoch` sees the finished epoch index (plus one) and can
/// checkpoint; its error aborts the run.
pub fn fit<T: Scalar>(
    model: &mut Drn<T>,
    train: &DatasetSplit,
    test: Option<&DatasetSplit>,
    state: TrainState<'_, T>,
    opts: FitOptions,
    mut after_epoch: impl FnMut(&Drn<T>, &Sgd<T>, &Rng, usize, &[EpochRecord]) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let TrainState { sgd, rng, start_epoch } = state;
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in start_epoch..opts.epochs {
        let lr = sgd.config().lr_at_epoch(epoch);
        let m = train_epoch(model, train, sgd, lr, opts.batch_size, rng)?;
        let mut fresh = vec![EpochRecord {
            epoch,
            split: Split::Train,
            metrics: m,
            lr,
        }];
        if let Some(test) = test {
            let t = evaluate(model, test, opts.eval_batch_size)?;
            fresh.push(EpochRecord {
                epoch,
                split: Split::Test,
                metrics: t,
                lr,
            });
            if t.loss < best {
                best = t.loss;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        after_epoch(model, sgd, rng, epoch + 1, &fresh)?;
        records.extend(fresh);
        if opts.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DrnConfig, DropoutRates};

    fn one_param(w: f32, g: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(vec![1], w)).unwrap();
        s.param_mut(id).grad = Tensor::full(vec![1], g);
        s
    }

    fn sgd(lr: f64, momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            base_lr: lr,
            momentum,
            weight_decay: wd,
            schedule: Schedule::Step,
        }
    }

    #[test]
    fn sgd_examples() {
        let mut s = one_param(1.0, 0.5);
        Sgd::new(sgd(0.1, 0.0, 0.0), &s).unwrap().step(&mut s, 0).unwrap();
        assert!((s.params()[0].value.item() - 0.95).abs() < 1e-7);
        assert_eq!(s.params()[0].grad.item(), 0.0);

        let mut s = one_param(1.0, 0.5);
        Sgd::new(sgd(0.1, 0.0, 0.1), &s).unwrap().step(&mut s, 0).unwrap();
        assert!((s.params()[0].value.item() - 0.94).abs() < 1e-7);

        let mut s = one_param(0.0, 1.0);
        let mut opt = Sgd::new(sgd(0.1, 0.9, 0.0), &s).unwrap();
        opt.step(&mut s, 0).unwrap();
        s.params_mut()[0].grad = Tensor::full(vec![1], 1.0);
        opt.step(&mut s, 0).unwrap();
        assert!((s.params()[0].value.item() + 0.29).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_alone_is_geometric() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::full(vec![1], 2.0)).unwrap();
        let mut opt = Sgd::new(sgd(0.1, 0.0, 0.5), &s).unwrap();
        for i in 1..=5 {
            opt.step(&mut s, 0).unwrap();
            let expect = 2.0 * (1.0 - 0.1 * 0.5f64).powi(i);
            assert!((s.params()[0].value.item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = one_param(1.0, f32::NAN);
        let mut opt = Sgd::new(sgd(0.1, 0.0, 0.0), &s).unwrap();
        match opt.step(&mut s, 0) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.params()[0].value.item(), 1.0);
    }

    #[test]
    fn schedules() {
        let step = sgd(0.001, 0.9, 0.0);
        assert_eq!(step.lr_at_epoch(10), 0.001);
        assert!((step.lr_at_epoch(50) - 0.0001).abs() < 1e-15);
        assert!((step.lr_at_epoch(75) - 0.0001).abs() < 1e-15);
        assert!((step.lr_at_epoch(100) - 0.0001).abs() < 1e-15);
        assert!((step.lr_at_epoch(150) - 0.00001).abs() < 1e-15);
        let exp = SgdConfig::default();
        for (e, lr) in [(0, 0.005), (1, 0.002), (2, 0.0008)] {
            assert!((exp.lr_at_epoch(e) - lr).abs() < 1e-15);
        }
        for cfg in [step, exp] {
            for e in 0..300 {
                assert!(cfg.lr_at_epoch(e + 1) <= cfg.lr_at_epoch(e));
            }
        }
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(sgd(0.0, 0.0, 0.0).validate().is_err());
        assert!(sgd(0.1, 1.0, 0.0).validate().is_err());
        assert!(sgd(0.1, 0.0, -1.0).validate().is_err());
    }

    #[test]
    fn whole_string_accuracy() {
        // Frames decode to "1 2" for the first sample and "" for the second.
        let mut logits = vec![0.0f32; 2 * 3 * 3];
        for (t, s) in [(0, 1), (1, 0), (2, 2)] {
            logits[t * 3 + s] = 5.0;
        }
        for t in 0..3 {
            logits[9 + t * 3] = 5.0;
        }
        let logits = Tensor::new(vec![2, 3, 3], logits).unwrap();
        let seq = |v: Vec<usize>| Label::Sequence(LabelSeq::new(v, 3).unwrap());
        assert_eq!(count_correct(&logits, &[seq(vec![1, 2]), seq(vec![])]).unwrap(), 2);
        assert_eq!(count_correct(&logits, &[seq(vec![1, 2, 1]), seq(vec![1])]).unwrap(), 0);
        let cls = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(count_correct(&cls, &[Label::Class(0), Label::Class(1)]).unwrap(), 2);
    }

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = Rng::new(seed);
        let pixels = (0..n * 144).map(|_| rng.uniform() as f32).collect();
        let labels = (0..n).map(|i| Label::Class(i % 10)).collect();
        DatasetSplit::new(12, 12, pixels, labels).unwrap()
    }

    fn tiny_model() -> Drn<f32> {
        let mut cfg = DrnConfig::mnist_desk();
        cfg.input = (12, 12);
        cfg.gdb.blocks = 1;
        cfg.dropout = DropoutRates {
            shallow: 0.1,
            down: 0.1,
            head: 0.0,
        };
        Drn::new(cfg, 3).unwrap()
    }

    #[test]
    fn zero_lr_epoch_leaves_parameters_alone() {
        let mut m = tiny_model();
        let before: Vec<Tensor<f32>> = m.params().params().iter().map(|p| p.value.clone()).collect();
        let mut opt = Sgd::new(sgd(0.1, 0.9, 1e-3), m.params()).unwrap();
        train_epoch(&mut m, &tiny_split(10, 1), &mut opt, 0.0, 4, &mut Rng::new(0)).unwrap();
        for (p, b) in m.params().params().iter().zip(&before) {
            assert_eq!(&p.value, b, "{}", p.name);
        }
    }

    #[test]
    fn epochs_are_deterministic() {
        let split = tiny_split(10, 2);
        let run = || {
            let mut m = tiny_model();
            let mut opt = Sgd::new(sgd(0.05, 0.9, 1e-4), m.params()).unwrap();
            let mut rng = Rng::new(4);
            let a = train_epoch(&mut m, &split, &mut opt, 0.05, 4, &mut rng).unwrap();
            (a, evaluate(&mut m, &split, 3).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.loss.to_bits(), b.0.loss.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.samples, 10);
    }

    #[test]
    fn fit_stops_early_and_logs() {
        let split = tiny_split(6, 3);
        let mut m = tiny_model();
        let mut opt = Sgd::new(sgd(1e-9, 0.0, 0.0), m.params()).unwrap();
        let mut rng = Rng::new(0);
        let mut seen = Vec::new();
        let records = fit(
            &mut m,
            &split,
            Some(&split),
            TrainState {
                sgd: &mut opt,
                rng: &mut rng,
                start_epoch: 0,
            },
            FitOptions {
                epochs: 50,
                batch_size: 3,
                eval_batch_size: 6,
                patience: Some(2),
            },
            |_, _, _, e, _| {
                seen.push(e);
                Ok(())
            },
        )
        .unwrap();
        assert!(seen.len() < 50);
        assert_eq!(records.len(), 2 * seen.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_metrics(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(text.lines().count(), records.len() + 1);
    }
}
