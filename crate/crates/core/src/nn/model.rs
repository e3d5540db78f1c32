use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::ctc::LabelSeq;
use crate::error::{config_err, Error, Result};
use crate::kernels::Mode;
use crate::params::{lecun_uniform, ParamStore};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::layers::{Downsample, Gdb};
use super::spec::{DrnConfig, Head};
use super::Pass;

/// Where [`Drn::export_features`] taps the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTag {
    Shallow,
    Global,
    Down,
    /// Input of the fully-connected head.
    Penultimate,
    Logits,
}

impl FeatureTag {
    pub const ALL: [FeatureTag; 5] = [
        FeatureTag::Shallow,
        FeatureTag::Global,
        FeatureTag::Down,
        FeatureTag::Penultimate,
        FeatureTag::Logits,
    ];
}

impl fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureTag::Shallow => "shallow",
            FeatureTag::Global => "global",
            FeatureTag::Down => "down",
            FeatureTag::Penultimate => "penultimate",
            FeatureTag::Logits => "logits",
        })
    }
}

impl FromStr for FeatureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureTag::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

/// Tape handles of the intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub input: Var,
    pub shallow: Var,
    pub global: Var,
    pub down: Var,
    /// `B×D` for a classifier, `(B·T)×D` for a sequence head.
    pub penultimate: Var,
    /// `B×K` or `B×T×V`.
    pub logits: Var,
}

impl Outputs {
    pub fn get(&self, tag: FeatureTag) -> Var {
        match tag {
            FeatureTag::Shallow => self.shallow,
            FeatureTag::Global => self.global,
            FeatureTag::Down => self.down,
            FeatureTag::Penultimate => self.penultimate,
            FeatureTag::Logits => self.logits,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Targets<'t> {
    Classes(&'t [usize]),
    Sequences(&'t [LabelSeq]),
}

/// Mean cross-entropy or mean CTC loss, matching the head.
pub fn head_loss<T: Scalar>(head: Head, pass: &mut Pass<T>, logits: Var, targets: Targets) -> Result<Var> {
    match (head, targets) {
        (Head::Classify { .. }, Targets::Classes(t)) => Ok(pass.tape.softmax_xent(logits, t)?.0),
        (Head::Sequence { .. }, Targets::Sequences(t)) => pass.tape.ctc_loss(logits, t),
        _ => Err(config_err("targets do not match the model head")),
    }
}

/// Dense residual network: global dense block, down-sampling block and a
/// fully-connected classification or per-column transcription head.
#[derive(Clone, Debug)]
pub struct Drn<T: Scalar> {
    config: DrnConfig,
    params: ParamStore<T>,
    gdb: Gdb,
    down: Downsample,
    head_weight: usize,
    head_bias: usize,
}

impl<T: Scalar> Drn<T> {
    /// Builds the model and initializes every parameter from `seed`.
    pub fn new(config: DrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, streams::INIT);
        let mut params = ParamStore::new();
        let gdb = Gdb::build(&mut params, "gdb", config.gdb, &mut rng)?;
        let down = Downsample::build(&mut params, "down", config.down, &mut rng)?;
        let d = config.head_in_features()?;
        let k = config.head_out_features();
        let head_weight = params.add("head/weight", lecun_uniform(vec![d, k], d, &mut rng))?;
        let head_bias = params.add("head/bias", Tensor::zeros(vec![k]))?;
        Ok(Drn {
            config,
            params,
            gdb,
            down,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &DrnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn gdb(&self) -> &Gdb {
        &self.gdb
    }

    pub fn down(&self) -> &Downsample {
        &self.down
    }

    /// Runs the network on `images` (B×1×H×W) and returns the live pass so
    /// the caller can attach a loss and call [`Pass::backward`].
    pub fn forward<'a>(
        &'a mut self,
        images: &Tensor<T>,
        mode: Mode,
        rng: Option<&'a mut Rng>,
    ) -> Result<(Pass<'a, T>, Outputs)> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 || (h, w) != self.config.input {
            return Err(config_err(format!(
                "model expects 1×{}×{} images, got {c}×{h}×{w}",
                self.config.input.0, self.config.input.1
            )));
        }
        let Drn {
            config,
            params,
            gdb,
            down,
            head_weight,
            head_bias,
        } = self;
        let mut pass = Pass::new(params, mode, config.batch_norm);
        if let Some(rng) = rng {
            pass = pass.with_rng(rng);
        }
        let input = pass.input(images.clone(), false);
        let g = gdb.forward(&mut pass, input, config.dropout.shallow)?;
        let d = down.forward(&mut pass, g.global)?;
        let d = pass.dropout(d, config.dropout.down)?;
        let (w, b) = (pass.param(*head_weight), pass.param(*head_bias));
        let (penultimate, logits) = match config.head {
            Head::Classify { .. } => {
                let flat = pass.tape.flatten(d)?;
                let logits = pass.tape.linear(flat, w, b)?;
                (flat, pass.dropout(logits, config.dropout.head)?)
            }
            Head::Sequence { alphabet, .. } => {
                let (bsz, _, _, frames) = pass.value(d).dims4()?;
                if frames == 0 {
                    return Err(config_err("feature map has no columns"));
                }
                let seq = pass.tape.columns_to_frames(d)?;
                let dim = pass.value(seq).shape()[2];
                let rows = pass.tape.reshape(seq, vec![bsz * frames, dim])?;
                let logits = pass.tape.linear(rows, w, b)?;
                let logits = pass.dropout(logits, config.dropout.head)?;
                (rows, pass.tape.reshape(logits, vec![bsz, frames, alphabet])?)
            }
        };
        Ok((
            pass,
            Outputs {
                input,
                shallow: g.shallow,
                global: g.global,
                down: d,
                penultimate,
                logits,
            },
        ))
    }

    /// Train-mode forward and backward on one batch. Gradients are added to
    /// the parameter accumulators; returns the loss and the logits.
    pub fn train_step(&mut self, images: &Tensor<T>, targets: Targets, rng: &mut Rng) -> Result<(f64, Tensor<T>)> {
        let head = self.config.head;
        let (mut pass, out) = self.forward(images, Mode::Train, Some(rng))?;
        let loss = head_loss(head, &mut pass, out.logits, targets)?;
        pass.backward(loss)?;
        Ok((pass.value(loss).item().as_f64(), pass.value(out.logits).clone()))
    }

    /// Infer-mode logits.
    pub fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (pass, out) = self.forward(images, Mode::Infer, None)?;
        Ok(pass.value(out.logits).clone())
    }

    /// Infer-mode features at `tag`, one row per sample.
    pub fn export_features(&mut self, images: &Tensor<T>, tag: FeatureTag) -> Result<Tensor<T>> {
        let b = images.dims4()?.0;
        let (pass, out) = self.forward(images, Mode::Infer, None)?;
        let v = pass.value(out.get(tag));
        let d = v.len() / b;
        Tensor::new(vec![b, d], v.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::log_softmax_rows;
    use crate::nn::spec::DropoutRates;

    fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(vec![b, 1, h, w], |_| rng.uniform() as f32)
    }

    #[test]
    fn classifier_logits() {
        let mut m = Drn::<f32>::new(DrnConfig::mnist_desk(), 1).unwrap();
        let x = images(2, 28, 28, 2);
        let a = m.logits(&x).unwrap();
        assert_eq!(a.shape(), &[2, 10]);
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
        let lp = log_softmax_rows(a.cast::<f64>().data(), 10);
        for row in lp.chunks(10) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rate_zero_dropout_ignores_the_random_source() {
        let mut cfg = DrnConfig::mnist_desk();
        cfg.dropout = DropoutRates::NONE;
        let mut m = Drn::<f32>::new(cfg, 9).unwrap();
        let x = images(3, 28, 28, 4);
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(2);
        let a = {
            let (p, o) = m.forward(&x, Mode::Train, Some(&mut r1)).unwrap();
            p.value(o.logits).clone()
        };
        let b = {
            let (p, o) = m.forward(&x, Mode::Train, Some(&mut r2)).unwrap();
            p.value(o.logits).clone()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_frames() {
        let mut m = Drn::<f32>::new(DrnConfig::sequence_desk(), 1).unwrap();
        let x = images(1, 32, 160, 5);
        let l = m.logits(&x).unwrap();
        assert_eq!(l.shape(), &[1, 40, 11]);
        let f = m.export_features(&x, FeatureTag::Penultimate).unwrap();
        assert_eq!(f.shape(), &[1, 40 * 64 * 4]);
    }

    #[test]
    fn export_features_rows() {
        let mut m = Drn::<f32>::new(DrnConfig::mnist_desk(), 1).unwrap();
        let x = images(3, 28, 28, 6);
        let f = m.export_features(&x, FeatureTag::Penultimate).unwrap();
        assert_eq!(f.shape(), &[3, 64 * 49]);
        assert_eq!(f, m.export_features(&x, FeatureTag::Penultimate).unwrap());
        assert!("nope".parse::<FeatureTag>().is_err());
    }

    #[test]
    fn wrong_geometry_rejected() {
        let mut m = Drn::<f32>::new(DrnConfig::mnist_desk(), 1).unwrap();
        assert!(m.logits(&images(1, 20, 20, 0)).is_err());
    }

    #[test]
    fn parameter_names_are_paths() {
        let m = Drn::<f32>::new(DrnConfig::mnist_desk(), 1).unwrap();
        assert!(m.params().id("gdb/rrdb0/layer1/dw_weight").is_some());
        assert!(m.params().id("gdb/rrdb2/fusion/weight").is_some());
        assert!(m.params().buffer_id("down/1/bn/running_var").is_some());
    }
}
