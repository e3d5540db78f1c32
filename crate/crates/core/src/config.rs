//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Every key belongs to a fixed schema. Defaults depend on `model.task`;
//! keys that were never set follow the task's preset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::nn::{ConvFlavor, DenseBlockSpec, DownsampleSpec, DrnConfig, DropoutRates, Head, RrdbSpec};
use crate::train::{Schedule, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// 28×28 digit classification.
    Mnist,
    /// Synthetic digit strings transcribed with CTC.
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Task,
    Count,
    Positive,
    Seed,
    Rate,
    Float,
    Flavor,
    Schedule,
    Path,
}

/// One schema entry.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    kind: Kind,
    pub mnist: &'static str,
    pub sequence: &'static str,
    pub help: &'static str,
}

impl KeySpec {
    pub fn default_for(&self, task: Task) -> &'static str {
        match task {
            Task::Mnist => self.mnist,
            Task::Sequence => self.sequence,
        }
    }
}

const fn key(
    key: &'static str,
    kind: Kind,
    mnist: &'static str,
    sequence: &'static str,
    help: &'static str,
) -> KeySpec {
    KeySpec {
        key,
        kind,
        mnist,
        sequence,
        help,
    }
}

pub const SCHEMA: &[KeySpec] = &[
    key("model.task", Kind::Task, "mnist", "sequence", "mnist or sequence"),
    key("model.channels", Kind::Positive, "16", "16", "shallow feature channels"),
    key(
        "model.blocks",
        Kind::Positive,
        "3",
        "3",
        "residual dense blocks in the global block",
    ),
    key("model.layers", Kind::Count, "4", "4", "conv groups per dense block"),
    key(
        "model.growth",
        Kind::Positive,
        "12",
        "12",
        "channels added by each dense layer",
    ),
    key(
        "model.flavor",
        Kind::Flavor,
        "depthwise_separable",
        "depthwise_separable",
        "dense and down-sampling conv flavor",
    ),
    key(
        "model.shallow_flavor",
        Kind::Flavor,
        "standard",
        "standard",
        "flavor of the first 5x5 conv group",
    ),
    key(
        "model.dropout_shallow",
        Kind::Rate,
        "0",
        "0",
        "dropout after the shallow conv group",
    ),
    key(
        "model.dropout_down",
        Kind::Rate,
        "0.2",
        "0.2",
        "dropout after down-sampling",
    ),
    key("model.dropout_head", Kind::Rate, "0", "0", "dropout on the logits"),
    key("optimizer.lr", Kind::Float, "0.02", "0.002", "base learning rate"),
    key("optimizer.momentum", Kind::Rate, "0.9", "0.9", "momentum"),
    key(
        "optimizer.weight_decay",
        Kind::Float,
        "0.0001",
        "0.0001",
        "L2 weight decay",
    ),
    key(
        "optimizer.schedule",
        Kind::Schedule,
        "exponential",
        "exponential",
        "step or exponential",
    ),
    key(
        "optimizer.gamma",
        Kind::Rate,
        "0.6",
        "0.8",
        "per-epoch decay of the exponential schedule",
    ),
    key(
        "data.mnist_dir",
        Kind::Path,
        "data/mnist",
        "data/mnist",
        "directory holding the four MNIST IDX files",
    ),
    key(
        "data.train_samples",
        Kind::Count,
        "10000",
        "20000",
        "training samples (0 = all MNIST images)",
    ),
    key(
        "data.test_samples",
        Kind::Count,
        "0",
        "2000",
        "held-out samples (0 = all MNIST images)",
    ),
    key("data.min_len", Kind::Positive, "3", "3", "shortest synthetic string"),
    key("data.max_len", Kind::Positive, "5", "5", "longest synthetic string"),
    key("data.width", Kind::Positive, "160", "160", "synthetic canvas width"),
    key("data.batch_size", Kind::Positive, "32", "32", "training batch size"),
    key(
        "data.eval_batch_size",
        Kind::Positive,
        "256",
        "256",
        "evaluation batch size",
    ),
    key("run.seed", Kind::Seed, "0", "0", "source of all randomness"),
    key("run.epochs", Kind::Count, "5", "5", "training epochs"),
    key(
        "run.patience",
        Kind::Count,
        "0",
        "2",
        "stop after this many epochs without a lower test loss (0 = never)",
    ),
    key(
        "run.out_dir",
        Kind::Path,
        "runs/mnist",
        "runs/sequence",
        "metrics, checkpoints and exports",
    ),
];

fn spec_of(name: &str) -> Result<&'static KeySpec> {
    SCHEMA
        .iter()
        .find(|k| k.key == name)
        .ok_or_else(|| Error::Parse(format!("unknown config key `{name}`")))
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Parse(format!("config key `{key}`: expected {want}, got `{value}`"))
}

fn check(spec: &KeySpec, value: &str) -> Result<()> {
    let k = spec.key;
    match spec.kind {
        Kind::Task => {
            parse_task(value)?;
        }
        Kind::Count => {
            value
                .parse::<usize>()
                .map_err(|_| bad(k, value, "a non-negative integer"))?;
        }
        Kind::Positive => {
            if !value.parse::<usize>().is_ok_and(|v| v > 0) {
                return Err(bad(k, value, "a positive integer"));
            }
        }
        Kind::Seed => {
            value
                .parse::<u64>()
                .map_err(|_| bad(k, value, "an unsigned 64-bit integer"))?;
        }
        Kind::Rate => {
            if !value.parse::<f64>().is_ok_and(|v| (0.0..1.0).contains(&v)) {
                return Err(bad(k, value, "a number in [0, 1)"));
            }
        }
        Kind::Float => {
            if !value.parse::<f64>().is_ok_and(|v| v.is_finite() && v >= 0.0) {
                return Err(bad(k, value, "a finite non-negative number"));
            }
        }
        Kind::Flavor => {
            value
                .parse::<ConvFlavor>()
                .map_err(|_| bad(k, value, "standard or depthwise_separable"))?;
        }
        Kind::Schedule => {
            if !matches!(value, "step" | "exponential") {
                return Err(bad(k, value, "step or exponential"));
            }
        }
        Kind::Path => {
            if value.is_empty() {
                return Err(bad(k, value, "a path"));
            }
        }
    }
    Ok(())
}

fn parse_task(value: &str) -> Result<Task> {
    match value {
        "mnist" => Ok(Task::Mnist),
        "sequence" => Ok(Task::Sequence),
        _ => Err(bad("model.task", value, "mnist or sequence")),
    }
}

/// Explicitly set values; everything else resolves to the task default.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        let mut c = RunConfig::default();
        if task == Task::Sequence {
            c.values.insert("model.task", "sequence".into());
        }
        c
    }

    /// Parses config text. Later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut section: Option<&str> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected `key = value`", n + 1)))?;
            let sec = section.ok_or_else(|| Error::Parse(format!("config line {}: key outside a [section]", n + 1)))?;
            c.set(&format!("{sec}.{}", k.trim()), v.trim())
                .map_err(|e| Error::Parse(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    /// Sets `section.key` after checking it against the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec_of(key)?;
        check(spec, value)?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{assignment}` is not `section.key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn task(&self) -> Task {
        self.values
            .get("model.task")
            .map_or(Task::Mnist, |v| parse_task(v).expect("checked on set"))
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        let spec = spec_of(key)?;
        Ok(self
            .values
            .get(spec.key)
            .map_or(spec.default_for(self.task()), String::as_str))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> T {
        self.get(key)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("schema key `{key}` holds a checked value"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.num(key)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.num(key)
    }

    pub fn seed(&self) -> u64 {
        self.num("run.seed")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key).expect("schema key"))
    }

    fn flavor(&self, key: &str) -> ConvFlavor {
        self.num(key)
    }

    pub fn dropout(&self) -> DropoutRates {
        DropoutRates {
            shallow: self.f64("model.dropout_shallow"),
            down: self.f64("model.dropout_down"),
            head: self.f64("model.dropout_head"),
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            min_len: self.usize("data.min_len"),
            max_len: self.usize("data.max_len"),
            width: self.usize("data.width"),
            ..SynthSpec::default()
        }
    }

    pub fn model_config(&self) -> Result<DrnConfig> {
        let mut cfg = match self.task() {
            Task::Mnist => DrnConfig::mnist_desk(),
            Task::Sequence => {
                let mut cfg = DrnConfig::sequence_desk();
                let synth = self.synth_spec();
                synth.validate()?;
                cfg.input = (synth.height, synth.width);
                if let Head::Sequence { max_label_len, .. } = &mut cfg.head {
                    *max_label_len = synth.max_len;
                }
                cfg
            }
        };
        let c0 = self.usize("model.channels");
        let flavor = self.flavor("model.flavor");
        cfg.gdb.shallow.out_channels = c0;
        cfg.gdb.shallow.flavor = self.flavor("model.shallow_flavor");
        cfg.gdb.blocks = self.usize("model.blocks");
        cfg.gdb.rrdb = RrdbSpec {
            dense: DenseBlockSpec {
                flavor,
                ..RrdbSpec::new(self.usize("model.layers"), self.usize("model.growth"), c0).dense
            },
        };
        let strides = [cfg.down.layers[0].stride, cfg.down.layers[1].stride];
        cfg.down = DownsampleSpec::doubling(c0, strides, flavor);
        cfg.dropout = self.dropout();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sgd_config(&self) -> Result<SgdConfig> {
        let schedule = match self.get("optimizer.schedule")? {
            "step" => Schedule::Step,
            _ => Schedule::Exponential {
                gamma: self.f64("optimizer.gamma"),
            },
        };
        let cfg = SgdConfig {
            base_lr: self.f64("optimizer.lr"),
            momentum: self.f64("optimizer.momentum"),
            weight_decay: self.f64("optimizer.weight_decay"),
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that the keys fit together.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.sgd_config()?;
        Ok(())
    }

    /// Every key with its resolved value, grouped by section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for spec in SCHEMA {
            let (sec, name) = spec.key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(spec.key).expect("schema key"));
        }
        out
    }
}

/// Help text listing every key and its default per task.
pub fn schema_help() -> String {
    let mut out = String::from("config keys (mnist default / sequence default):\n");
    for spec in SCHEMA {
        let default = if spec.mnist == spec.sequence {
            spec.mnist.to_string()
        } else {
            format!("{} / {}", spec.mnist, spec.sequence)
        };
        let _ = writeln!(out, "  {:<24} {:<28} {}", spec.key, default, spec.help);
    }
    out
}
