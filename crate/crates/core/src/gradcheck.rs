//! Central finite-difference checks of analytic gradients, in `f64`.
//!
//! Losses under test are scaled down by [`LOSS_SCALE`] so rounding noise in
//! the difference quotient stays well below the `1e-8` floor of the
//! relative-error denominator.

use std::fmt;

use crate::autograd::{Tape, Var};
use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::kernels::{BatchNormConfig, ConvGeometry, Mode};
use crate::nn::{
    head_loss, residual_block, Combine, ConvFlavor, ConvGroup, ConvGroupSpec, DenseBlock, DenseBlockSpec, Downsample,
    DownsampleSpec, Drn, DrnConfig, DropoutRates, Gdb, GdbSpec, Head, Pass, Rrdb, RrdbSpec, Targets,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LOSS_SCALE: f64 = 1.0 / 1024.0;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per input; all of them when the input is smaller.
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords_per_input: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let checked: usize = self.inputs.iter().map(|i| i.checked).sum();
        write!(
            f,
            "{:<28} {:>5} coords  max rel err {:.3e}  tol {:.0e}  {}",
            self.name,
            checked,
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Compares the gradients returned by `f` against central differences.
///
/// `f` maps the inputs to a scalar loss and the analytic gradient of that
/// loss with respect to every input.
pub fn check<F>(
    name: &str,
    tolerance: f64,
    names: &[&str],
    mut inputs: Vec<Tensor<f64>>,
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, analytic) = f(&inputs)?;
    let mut rng = Rng::new(cfg.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        if !analytic[i].all_finite() {
            return Err(Error::NonFiniteGradient(names[i].to_string()));
        }
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            rng.permutation(n)[..cfg.coords_per_input].to_vec()
        };
        let mut worst: f64 = 0.0;
        for &j in &coords {
            let a = analytic[i].data()[j];
            // A step that straddles a ReLU kink gives a wrong quotient which
            // shrinks with the step; a wrong gradient does not.
            let mut err = f64::INFINITY;
            for shrink in [1.0, 0.1, 0.01] {
                let h = cfg.step * shrink;
                let orig = inputs[i].data()[j];
                inputs[i].data_mut()[j] = orig + h;
                let plus = f(&inputs)?.0;
                inputs[i].data_mut()[j] = orig - h;
                let minus = f(&inputs)?.0;
                inputs[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                if !numeric.is_finite() {
                    return Err(Error::NonFiniteGradient(names[i].to_string()));
                }
                err = err.min(relative_error(a, numeric));
                if err < tolerance {
                    break;
                }
            }
            worst = worst.max(err);
        }
        reports.push(InputReport {
            name: names[i].to_string(),
            checked: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tolerance,
        inputs: reports,
    })
}

fn randn(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Standard normal values pushed at least `gap` away from zero.
fn randn_off_kink(shape: Vec<usize>, gap: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v.signum() * (v.abs() + gap)
    })
}

/// Runs `build` on a fresh tape with every input as a gradient-tracked leaf;
/// the loss is a fixed random projection of the returned value.
fn tape_check<B>(
    name: &str,
    tol: f64,
    names: &[&str],
    inputs: Vec<Tensor<f64>>,
    cfg: &GradCheckConfig,
    mut build: B,
) -> Result<GradCheckReport>
where
    B: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;
    let mut prng = Rng::new(cfg.seed ^ 0x5eed);
    check(name, tol, names, inputs, cfg, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = if tape.value(out).is_scalar() {
            tape.scale(out, LOSS_SCALE)?
        } else {
            let shape = tape.value(out).shape().to_vec();
            let p = proj
                .get_or_insert_with(|| Tensor::from_fn(shape, |_| prng.normal() * LOSS_SCALE))
                .clone();
            tape.dot(out, p)?
        };
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
            })
            .collect();
        Ok((tape.value(loss).item(), g))
    })
}

/// Checks a module that lives in a parameter store: the inputs are the
/// module input followed by every parameter of the store.
fn store_check<M>(
    name: &str,
    tol: f64,
    store: ParamStore<f64>,
    x: Tensor<f64>,
    mode: Mode,
    cfg: &GradCheckConfig,
    mut run: M,
) -> Result<GradCheckReport>
where
    M: FnMut(&mut Pass<f64>, Var) -> Result<Var>,
{
    let names: Vec<String> = std::iter::once("input".to_string())
        .chain(store.params().iter().map(|p| p.name.clone()))
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut inputs = vec![x];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    let mut proj: Option<Tensor<f64>> = None;
    let mut prng = Rng::new(cfg.seed ^ 0xb10c);
    check(name, tol, &name_refs, inputs, cfg, |xs| {
        let mut s = store.clone();
        for (p, v) in s.params_mut().iter_mut().zip(&xs[1..]) {
            p.value = v.clone();
        }
        let mut pass = Pass::new(&mut s, mode, BatchNormConfig::default()).track_grads(true);
        let xv = pass.input(xs[0].clone(), true);
        let out = run(&mut pass, xv)?;
        let shape = pass.value(out).shape().to_vec();
        let p = proj
            .get_or_insert_with(|| Tensor::from_fn(shape, |_| prng.normal() * LOSS_SCALE))
            .clone();
        let loss = pass.tape.dot(out, p)?;
        let lv = pass.value(loss).item();
        let grads = pass.backward(loss)?;
        let mut g = vec![grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(xs[0].shape().to_vec()))];
        drop(pass);
        g.extend(s.params().iter().map(|p| p.grad.clone()));
        Ok((lv, g))
    })
}

pub(crate) fn tiny_drn(head: Head) -> DrnConfig {
    let c0 = 16;
    let (input, shallow_stride, strides) = match head {
        Head::Classify { .. } => ((12, 12), (1, 1), [(2, 2), (2, 2)]),
        Head::Sequence { .. } => ((8, 24), (2, 2), [(2, 2), (2, 1)]),
    };
    DrnConfig {
        input,
        gdb: GdbSpec {
            shallow: ConvGroupSpec::same(1, c0, 5, ConvFlavor::Standard).with_stride(shallow_stride),
            blocks: 2,
            rrdb: RrdbSpec::new(3, 8, c0),
        },
        down: DownsampleSpec::doubling(c0, strides, ConvFlavor::DepthwiseSeparable),
        head,
        dropout: DropoutRates::NONE,
        batch_norm: BatchNormConfig::default(),
    }
}

fn model_check(name: &str, tol: f64, config: DrnConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = Drn::<f64>::new(config, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed + 1);
    let (h, w) = config.input;
    let images = Tensor::from_fn(vec![2, 1, h, w], |_| rng.uniform());
    let classes = [1usize, 2];
    let seqs = [LabelSeq::new(vec![1, 2], 4)?, LabelSeq::new(vec![3], 4)?];
    let names: Vec<String> = model.params().params().iter().map(|p| p.name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let inputs: Vec<Tensor<f64>> = model.params().params().iter().map(|p| p.value.clone()).collect();
    check(name, tol, &name_refs, inputs, cfg, |xs| {
        let mut m = model.clone();
        for (p, v) in m.params_mut().params_mut().iter_mut().zip(xs) {
            p.value = v.clone();
        }
        let head = m.config().head;
        let (mut pass, out) = m.forward(&images, Mode::Train, None)?;
        let targets = match head {
            Head::Classify { .. } => Targets::Classes(&classes),
            Head::Sequence { .. } => Targets::Sequences(&seqs),
        };
        let loss = head_loss(head, &mut pass, out.logits, targets)?;
        let loss = pass.tape.scale(loss, LOSS_SCALE)?;
        let lv = pass.value(loss).item();
        pass.backward(loss)?;
        drop(pass);
        Ok((lv, m.params().params().iter().map(|p| p.grad.clone()).collect()))
    })
}

/// Every primitive and composed block, ending with two tiny full models
/// (16 channels, two r-RDBs of three layers).
pub fn suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(cfg.seed.wrapping_add(0x9e37));
    let mut out = Vec::new();
    let bn = BatchNormConfig::default();

    let x = randn_off_kink(vec![2, 3, 4, 4], 10.0 * cfg.step, &mut rng);
    out.push(tape_check("relu", 1e-8, &["x"], vec![x], cfg, |t, v| t.relu(v[0]))?);

    let g = ConvGeometry::new((3, 3), (1, 1), (1, 1));
    let (x, w, b) = (
        randn(vec![1, 2, 5, 5], &mut rng),
        randn(vec![3, 2, 3, 3], &mut rng),
        randn(vec![3], &mut rng),
    );
    out.push(tape_check(
        "conv2d",
        1e-6,
        &["x", "weight", "bias"],
        vec![x, w, b],
        cfg,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), g),
    )?);

    let g2 = ConvGeometry::new((3, 3), (2, 2), (1, 1));
    let (x, w) = (randn(vec![2, 3, 6, 7], &mut rng), randn(vec![4, 3, 3, 3], &mut rng));
    out.push(tape_check(
        "conv2d_stride2",
        1e-6,
        &["x", "weight"],
        vec![x, w],
        cfg,
        |t, v| t.conv2d(v[0], v[1], None, g2),
    )?);

    let (x, dw, pw, b) = (
        randn(vec![2, 3, 5, 5], &mut rng),
        randn(vec![3, 1, 3, 3], &mut rng),
        randn(vec![4, 3, 1, 1], &mut rng),
        randn(vec![4], &mut rng),
    );
    out.push(tape_check(
        "depthwise_separable",
        1e-6,
        &["x", "dw_weight", "pw_weight", "bias"],
        vec![x, dw, pw, b],
        cfg,
        |t, v| t.depthwise_separable(v[0], v[1], v[2], Some(v[3]), g2),
    )?);

    for (label, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_infer", Mode::Infer)] {
        let x = randn(vec![4, 3, 4, 4], &mut rng);
        let gamma = randn(vec![3], &mut rng);
        let beta = randn(vec![3], &mut rng);
        let mean = randn(vec![3], &mut rng);
        let var = Tensor::from_fn(vec![3], |_| 0.5 + rng.uniform());
        out.push(tape_check(
            label,
            1e-5,
            &["x", "gamma", "beta"],
            vec![x, gamma, beta],
            cfg,
            |t, v| {
                let (mut m, mut s) = (mean.clone(), var.clone());
                t.batch_norm(v[0], v[1], v[2], &mut m, &mut s, mode, &bn)
            },
        )?);
    }

    let (a, b) = (randn(vec![2, 3, 3, 3], &mut rng), randn(vec![2, 2, 3, 3], &mut rng));
    out.push(tape_check(
        "concat_channels",
        1e-6,
        &["a", "b"],
        vec![a, b],
        cfg,
        |t, v| t.concat_channels(v),
    )?);

    let (a, b, c) = (
        randn(vec![2, 3, 3], &mut rng),
        randn(vec![2, 3, 3], &mut rng),
        randn(vec![2, 3, 3], &mut rng),
    );
    out.push(tape_check(
        "sum_features",
        1e-6,
        &["a", "b", "c"],
        vec![a, b, c],
        cfg,
        |t, v| t.sum(v),
    )?);

    let (x, w, b) = (
        randn(vec![3, 5], &mut rng),
        randn(vec![5, 4], &mut rng),
        randn(vec![4], &mut rng),
    );
    out.push(tape_check(
        "fully_connected",
        1e-6,
        &["x", "weight", "bias"],
        vec![x, w, b],
        cfg,
        |t, v| t.linear(v[0], v[1], v[2]),
    )?);

    let logits = randn(vec![4, 5], &mut rng);
    out.push(tape_check(
        "softmax_xent",
        1e-6,
        &["logits"],
        vec![logits],
        cfg,
        |t, v| Ok(t.softmax_xent(v[0], &[0, 3, 4, 1])?.0),
    )?);

    let logits = randn(vec![2, 6, 4], &mut rng);
    let targets = [LabelSeq::new(vec![1, 1, 2], 4)?, LabelSeq::new(vec![3], 4)?];
    out.push(tape_check("ctc_loss", 1e-6, &["logits"], vec![logits], cfg, |t, v| {
        t.ctc_loss(v[0], &targets)
    })?);

    let x = randn(vec![2, 3, 4, 4], &mut rng);
    let seed = cfg.seed;
    out.push(tape_check("dropout", 1e-6, &["x"], vec![x], cfg, |t, v| {
        t.dropout(v[0], 0.5, Mode::Train, &mut Rng::new(seed))
    })?);

    let x = randn(vec![1, 2, 2, 3], &mut rng);
    out.push(tape_check("columns_to_frames", 1e-6, &["x"], vec![x], cfg, |t, v| {
        t.columns_to_frames(v[0])
    })?);

    let (x, w1, w2) = (
        randn(vec![2, 3, 4, 4], &mut rng),
        randn(vec![3, 3, 3, 3], &mut rng),
        randn(vec![3, 3, 3, 3], &mut rng),
    );
    out.push(tape_check(
        "residual_block",
        1e-5,
        &["x", "w1", "w2"],
        vec![x, w1, w2],
        cfg,
        |t, v| residual_block(t, v[0], v[1], v[2]),
    )?);

    let mut store = ParamStore::new();
    let group = ConvGroup::build(
        &mut store,
        "g",
        ConvGroupSpec::same(3, 5, 3, ConvFlavor::DepthwiseSeparable),
        &mut rng,
    )?;
    let x = randn(vec![2, 3, 5, 5], &mut rng);
    out.push(store_check("conv_group", 1e-4, store, x, Mode::Train, cfg, |p, x| {
        group.forward(p, x)
    })?);

    for (label, combine) in [("dense_block", Combine::Concat), ("refined_dense_block", Combine::Sum)] {
        let mut store = ParamStore::new();
        let block = DenseBlock::build(&mut store, "d", DenseBlockSpec::new(3, 4, 6, combine), &mut rng)?;
        let x = randn(vec![2, 6, 4, 4], &mut rng);
        out.push(store_check(label, 1e-4, store, x, Mode::Train, cfg, |p, x| {
            Ok(block.forward(p, x)?.output)
        })?);
    }

    let mut store = ParamStore::new();
    let block = Rrdb::build(&mut store, "r", RrdbSpec::new(3, 4, 6), &mut rng)?;
    let x = randn(vec![2, 6, 4, 4], &mut rng);
    out.push(store_check("rrdb", 1e-4, store, x, Mode::Train, cfg, |p, x| {
        block.forward(p, x)
    })?);

    let mut store = ParamStore::new();
    let spec = GdbSpec {
        shallow: ConvGroupSpec::same(1, 6, 5, ConvFlavor::Standard),
        blocks: 2,
        rrdb: RrdbSpec::new(2, 4, 6),
    };
    let gdb = Gdb::build(&mut store, "gdb", spec, &mut rng)?;
    let x = randn(vec![2, 1, 6, 6], &mut rng);
    out.push(store_check("gdb", 1e-4, store, x, Mode::Train, cfg, |p, x| {
        Ok(gdb.forward(p, x, 0.0)?.global)
    })?);

    let mut store = ParamStore::new();
    let down = Downsample::build(
        &mut store,
        "down",
        DownsampleSpec::doubling(3, [(2, 2), (2, 1)], ConvFlavor::DepthwiseSeparable),
        &mut rng,
    )?;
    let x = randn(vec![2, 3, 8, 8], &mut rng);
    out.push(store_check("downsample", 1e-4, store, x, Mode::Train, cfg, |p, x| {
        down.forward(p, x)
    })?);

    out.push(model_check(
        "drn_classify",
        1e-4,
        tiny_drn(Head::Classify { classes: 3 }),
        cfg,
    )?);
    out.push(model_check(
        "drn_sequence",
        1e-4,
        tiny_drn(Head::Sequence {
            alphabet: 4,
            max_label_len: 2,
        }),
        cfg,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_fn(vec![4], |i| i as f64 + 1.0);
        let r = check("square", 1e-6, &["x"], vec![x], &GradCheckConfig::default(), |xs| {
            let v = xs[0].data();
            let loss = v.iter().map(|a| a * a).sum();
            Ok((loss, vec![xs[0].map(|a| 3.0 * a)]))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn kink_inside_the_step_is_not_a_failure() {
        let x = Tensor::new(vec![2], vec![4e-6, -3e-6]).unwrap();
        let r = check(
            "relu_near_zero",
            1e-8,
            &["x"],
            vec![x],
            &GradCheckConfig::default(),
            |xs| {
                let loss = xs[0].data().iter().map(|a| a.max(0.0)).sum();
                Ok((loss, vec![xs[0].map(|a| if a > 0.0 { 1.0 } else { 0.0 })]))
            },
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn primitive_and_block_suite_passes() {
        for r in suite(&GradCheckConfig::default()).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }
}
