use crate::autograd::{Tape, Var};
use crate::error::{config_err, Result};
use crate::kernels::ConvGeometry;
use crate::params::{fan_in_uniform, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::spec::{Combine, ConvFlavor, ConvGroupSpec, DenseBlockSpec, DownsampleSpec, GdbSpec, RrdbSpec};
use super::Pass;

/// Parameter and buffer ids of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl BnIds {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        Ok(BnIds {
            gamma: store.add(format!("{prefix}/bn/gamma"), Tensor::full(vec![c], T::one()))?,
            beta: store.add(format!("{prefix}/bn/beta"), Tensor::zeros(vec![c]))?,
            mean: store.add_buffer(format!("{prefix}/bn/running_mean"), Tensor::zeros(vec![c]))?,
            var: store.add_buffer(format!("{prefix}/bn/running_var"), Tensor::full(vec![c], T::one()))?,
        })
    }
}

/// Plain convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    geom: ConvGeometry,
}

impl Conv {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (kh, kw) = geom.kernel;
        let fan_in = in_ch * kh * kw;
        Ok(Conv {
            weight: store.add(
                format!("{prefix}/weight"),
                fan_in_uniform(vec![out_ch, in_ch, kh, kw], fan_in, rng),
            )?,
            bias: store.add(format!("{prefix}/bias"), Tensor::zeros(vec![out_ch]))?,
            geom,
        })
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        pass.tape.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Clone, Debug)]
enum ConvIds {
    Standard { weight: usize },
    Separable { dw: usize, pw: usize },
}

/// BN → ReLU → convolution (standard or depthwise-separable, with bias).
#[derive(Clone, Debug)]
pub struct ConvGroup {
    spec: ConvGroupSpec,
    bn: BnIds,
    conv: ConvIds,
    bias: usize,
}

impl ConvGroup {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ConvGroupSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let bn = BnIds::register(store, prefix, spec.in_channels)?;
        let (kh, kw) = spec.kernel;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let conv = match spec.flavor {
            ConvFlavor::Standard => ConvIds::Standard {
                weight: store.add(
                    format!("{prefix}/weight"),
                    fan_in_uniform(vec![cout, cin, kh, kw], cin * kh * kw, rng),
                )?,
            },
            ConvFlavor::DepthwiseSeparable => ConvIds::Separable {
                dw: store.add(
                    format!("{prefix}/dw_weight"),
                    fan_in_uniform(vec![cin, 1, kh, kw], kh * kw, rng),
                )?,
                pw: store.add(
                    format!("{prefix}/pw_weight"),
                    fan_in_uniform(vec![cout, cin, 1, 1], cin, rng),
                )?,
            },
        };
        let bias = store.add(format!("{prefix}/bias"), Tensor::zeros(vec![cout]))?;
        Ok(ConvGroup { spec, bn, conv, bias })
    }

    pub fn spec(&self) -> &ConvGroupSpec {
        &self.spec
    }

    pub fn bn(&self) -> &BnIds {
        &self.bn
    }

    /// Convolution weight ids (no bias, no batch norm).
    pub fn weight_ids(&self) -> Vec<usize> {
        match self.conv {
            ConvIds::Standard { weight } => vec![weight],
            ConvIds::Separable { dw, pw } => vec![dw, pw],
        }
    }

    pub fn bias_id(&self) -> usize {
        self.bias
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let c = pass.value(x).dims4()?.1;
        if c != self.spec.in_channels {
            return Err(config_err(format!(
                "conv group expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let h = pass.batch_norm(x, &self.bn)?;
        let h = pass.tape.relu(h)?;
        let bias = pass.param(self.bias);
        let geom = self.spec.geometry();
        match self.conv {
            ConvIds::Standard { weight } => {
                let w = pass.param(weight);
                pass.tape.conv2d(h, w, Some(bias), geom)
            }
            ConvIds::Separable { dw, pw } => {
                let dw = pass.param(dw);
                let pw = pass.param(pw);
                pass.tape.depthwise_separable(h, dw, pw, Some(bias), geom)
            }
        }
    }
}

/// `w2 ∗ ReLU(w1 ∗ x) + x` with "same"-padded, bias-free convolutions.
pub fn residual_block<T: Scalar>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let c = tape.value(x).dims4()?.1;
    for w in [w1, w2] {
        let s = tape.value(w).shape();
        if s[0] != c || s[1] != c {
            return Err(config_err(format!(
                "residual block weight {s:?} does not preserve {c} channels"
            )));
        }
    }
    let geom = |w: Var, tape: &Tape<T>| {
        let s = tape.value(w).shape();
        ConvGeometry::new((s[2], s[3]), (1, 1), (s[2] / 2, s[3] / 2))
    };
    let g1 = geom(w1, tape);
    let g2 = geom(w2, tape);
    let h = tape.conv2d(x, w1, None, g1)?;
    let h = tape.relu(h)?;
    let f = tape.conv2d(h, w2, None, g2)?;
    tape.add(f, x)
}

pub struct DenseOutput {
    /// `[X, F_1, …, F_L]` along channels.
    pub output: Var,
    pub features: Vec<Var>,
    /// What each inner layer consumed.
    pub layer_inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    spec: DenseBlockSpec,
    layers: Vec<ConvGroup>,
}

impl DenseBlock {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: DenseBlockSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layers)
            .map(|i| ConvGroup::build(store, &format!("{prefix}/layer{}", i + 1), spec.layer_spec(i), rng))
            .collect::<Result<_>>()?;
        Ok(DenseBlock { spec, layers })
    }

    pub fn spec(&self) -> &DenseBlockSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvGroup] {
        &self.layers
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, x: Var) -> Result<DenseOutput> {
        let mut features: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut running: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match self.spec.combine {
                Combine::Concat => {
                    let mut parts = vec![x];
                    parts.extend(&features);
                    pass.tape.concat_channels(&parts)?
                }
                Combine::Sum if i == 0 => x,
                Combine::Sum => running.expect("set after the first layer"),
            };
            layer_inputs.push(input);
            let f = layer.forward(pass, input)?;
            if self.spec.combine == Combine::Sum {
                running = Some(match running {
                    None if self.spec.include_input_in_sum => pass.tape.add(x, f)?,
                    None => f,
                    Some(r) => pass.tape.add(r, f)?,
                });
            }
            features.push(f);
        }
        let mut parts = vec![x];
        parts.extend(&features);
        let output = pass.tape.concat_channels(&parts)?;
        Ok(DenseOutput {
            output,
            features,
            layer_inputs,
        })
    }
}

/// `φ₁ₓ₁([X, F_1, …, F_L])`: a bare 1×1 convolution with bias.
pub fn local_feature_fusion<T: Scalar>(pass: &mut Pass<T>, fusion: &Conv, x: Var, features: &[Var]) -> Result<Var> {
    let mut parts = vec![x];
    parts.extend(features);
    let cat = pass.tape.concat_channels(&parts)?;
    fusion.forward(pass, cat)
}

pub struct RrdbOutput {
    pub output: Var,
    pub fused: Var,
    pub dense: DenseOutput,
}

#[derive(Clone, Debug)]
pub struct Rrdb {
    spec: RrdbSpec,
    dense: DenseBlock,
    fusion: Conv,
}

impl Rrdb {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, spec: RrdbSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let dense = DenseBlock::build(store, prefix, spec.dense, rng)?;
        let fusion = Conv::build(
            store,
            &format!("{prefix}/fusion"),
            spec.fusion_in_channels(),
            spec.channels(),
            ConvGeometry::pointwise(),
            rng,
        )?;
        Ok(Rrdb { spec, dense, fusion })
    }

    pub fn spec(&self) -> &RrdbSpec {
        &self.spec
    }

    pub fn dense(&self) -> &DenseBlock {
        &self.dense
    }

    pub fn fusion(&self) -> &Conv {
        &self.fusion
    }

    pub fn forward_detailed<T: Scalar>(&self, pass: &mut Pass<T>, x: Var) -> Result<RrdbOutput> {
        let dense = self.dense.forward(pass, x)?;
        let fused = local_feature_fusion(pass, &self.fusion, x, &dense.features)?;
        let output = pass.tape.add(x, fused)?;
        Ok(RrdbOutput { output, fused, dense })
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(pass, x)?.output)
    }
}

pub struct GdbOutput {
    /// Shallow features `F_s` (after dropout, as fed to the blocks).
    pub shallow: Var,
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct Gdb {
    spec: GdbSpec,
    shallow: ConvGroup,
    blocks: Vec<Rrdb>,
}

impl Gdb {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, spec: GdbSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let shallow = ConvGroup::build(store, &format!("{prefix}/shallow"), spec.shallow, rng)?;
        let blocks = (0..spec.blocks)
            .map(|i| Rrdb::build(store, &format!("{prefix}/rrdb{i}"), spec.rrdb, rng))
            .collect::<Result<_>>()?;
        Ok(Gdb { spec, shallow, blocks })
    }

    pub fn spec(&self) -> &GdbSpec {
        &self.spec
    }

    pub fn shallow(&self) -> &ConvGroup {
        &self.shallow
    }

    pub fn blocks(&self) -> &[Rrdb] {
        &self.blocks
    }

    /// Block `i` sees `F_s + Σ_{j<i} F_res,j`; the output is
    /// `F_s + Σ_i F_res,i`. Both are kept as one running sum.
    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, image: Var, shallow_dropout: f64) -> Result<GdbOutput> {
        let fs = self.shallow.forward(pass, image)?;
        let fs = pass.dropout(fs, shallow_dropout)?;
        let mut acc = fs;
        for block in &self.blocks {
            let out = block.forward(pass, acc)?;
            acc = pass.tape.add(acc, out)?;
        }
        Ok(GdbOutput {
            shallow: fs,
            global: acc,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    spec: DownsampleSpec,
    layers: [ConvGroup; 2],
}

impl Downsample {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: DownsampleSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate(spec.layers[0].in_channels)?;
        let a = ConvGroup::build(store, &format!("{prefix}/0"), spec.layers[0], rng)?;
        let b = ConvGroup::build(store, &format!("{prefix}/1"), spec.layers[1], rng)?;
        Ok(Downsample { spec, layers: [a, b] })
    }

    pub fn spec(&self) -> &DownsampleSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvGroup; 2] {
        &self.layers
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(pass, x)?;
        self.layers[1].forward(pass, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BatchNormConfig, Mode};
    use crate::nn::spec::ConvFlavor;

    fn zero(store: &mut ParamStore<f64>, ids: &[usize]) {
        for &id in ids {
            store.param_mut(id).value.data_mut().fill(0.0);
        }
    }

    fn random_input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn conv_group_shape_and_zero_map() {
        let mut store = ParamStore::<f64>::new();
        let spec = ConvGroupSpec::same(1, 16, 5, ConvFlavor::DepthwiseSeparable);
        let g = ConvGroup::build(&mut store, "g", spec, &mut Rng::new(0)).unwrap();
        let x = random_input(vec![2, 1, 28, 28], 1);
        let mut pass = Pass::new(&mut store, Mode::Train, BatchNormConfig::default());
        let xv = pass.input(x.clone(), false);
        let y = g.forward(&mut pass, xv).unwrap();
        assert_eq!(pass.value(y).shape(), &[2, 16, 28, 28]);
        drop(pass);

        let mut ids = g.weight_ids();
        ids.push(g.bias_id());
        zero(&mut store, &ids);
        let mut pass = Pass::new(&mut store, Mode::Train, BatchNormConfig::default());
        let xv = pass.input(x, false);
        let y = g.forward(&mut pass, xv).unwrap();
        assert!(pass.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_group_rejects_wrong_channels() {
        let mut store = ParamStore::<f64>::new();
        let g = ConvGroup::build(
            &mut store,
            "g",
            ConvGroupSpec::same(3, 4, 3, ConvFlavor::Standard),
            &mut Rng::new(0),
        )
        .unwrap();
        let mut pass = Pass::new(&mut store, Mode::Infer, BatchNormConfig::default());
        let xv = pass.input(Tensor::zeros(vec![1, 2, 4, 4]), false);
        assert!(g.forward(&mut pass, xv).is_err());
    }

    #[test]
    fn residual_block_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap(), false);
        let eye = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w1 = tape.leaf(eye.clone(), false);
        let w2 = tape.leaf(eye, false);
        let h = residual_block(&mut tape, x, w1, w2).unwrap();
        assert_eq!(tape.value(h).data(), &[2.0, 4.0]);
        let w0 = tape.leaf(Tensor::zeros(vec![2, 2, 1, 1]), false);
        let h = residual_block(&mut tape, x, w1, w0).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 2.0]);
        let bad = tape.leaf(Tensor::zeros(vec![3, 2, 1, 1]), false);
        assert!(residual_block(&mut tape, x, bad, w1).is_err());
    }

    fn dense_run(combine: Combine, zero_all: bool) -> (Vec<usize>, Vec<usize>, Tensor<f64>, Tensor<f64>) {
        let spec = DenseBlockSpec::new(4, 12, 16, combine);
        let mut store = ParamStore::<f64>::new();
        let block = DenseBlock::build(&mut store, "d", spec, &mut Rng::new(3)).unwrap();
        if zero_all {
            for l in block.layers() {
                let mut ids = l.weight_ids();
                ids.push(l.bias_id());
                zero(&mut store, &ids);
            }
        }
        let x = random_input(vec![2, 16, 6, 6], 4);
        let mut pass = Pass::new(&mut store, Mode::Train, BatchNormConfig::default());
        let xv = pass.input(x.clone(), false);
        let out = block.forward(&mut pass, xv).unwrap();
        let ins = out.layer_inputs.iter().map(|&v| pass.value(v).shape()[1]).collect();
        (
            pass.value(out.output).shape().to_vec(),
            ins,
            pass.value(out.output).clone(),
            x,
        )
    }

    #[test]
    fn dense_blocks_share_output_shape() {
        let (s_shape, s_in, _, _) = dense_run(Combine::Concat, false);
        let (r_shape, r_in, _, _) = dense_run(Combine::Sum, false);
        assert_eq!(s_shape, vec![2, 64, 6, 6]);
        assert_eq!(s_shape, r_shape);
        assert_eq!(s_in, [16, 28, 40, 52]);
        assert_eq!(r_in, [16, 12, 12, 12]);
    }

    #[test]
    fn zero_dense_block_passes_input_through() {
        for combine in [Combine::Concat, Combine::Sum] {
            let (_, _, out, x) = dense_run(combine, true);
            assert_eq!(out.slice_channels(0..16).unwrap(), x);
            assert!(out.slice_channels(16..64).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_fusion_rrdb_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let block = Rrdb::build(&mut store, "r", RrdbSpec::new(3, 8, 8), &mut Rng::new(5)).unwrap();
        for id in [block.fusion().weight, block.fusion().bias] {
            store.param_mut(id).value.data_mut().fill(0.0);
        }
        let mut rng = Rng::new(6);
        let x = Tensor::from_fn(vec![2, 8, 5, 5], |_| rng.normal() as f32);
        let mut pass = Pass::new(&mut store, Mode::Train, BatchNormConfig::default());
        let xv = pass.input(x.clone(), false);
        let out = block.forward_detailed(&mut pass, xv).unwrap();
        assert_eq!(pass.value(out.output), &x);
        assert!(pass.value(out.fused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let block = Rrdb::build(&mut store, "r", RrdbSpec::new(4, 12, 16), &mut Rng::new(5)).unwrap();
        assert_eq!(store.param(block.fusion().weight).value.len(), 1024);
        assert_eq!(store.param(block.fusion().bias).value.len(), 16);
    }

    #[test]
    fn fusion_without_features_is_a_channel_remap() {
        let mut store = ParamStore::<f64>::new();
        let fusion = Conv::build(&mut store, "f", 4, 4, ConvGeometry::pointwise(), &mut Rng::new(1)).unwrap();
        let x = random_input(vec![1, 4, 3, 3], 2);
        let mut pass = Pass::new(&mut store, Mode::Infer, BatchNormConfig::default());
        let xv = pass.input(x, false);
        let a = local_feature_fusion(&mut pass, &fusion, xv, &[]).unwrap();
        let b = fusion.forward(&mut pass, xv).unwrap();
        assert_eq!(pass.value(a), pass.value(b));
    }

    #[test]
    fn downsample_shapes() {
        let mut store = ParamStore::<f32>::new();
        let spec = DownsampleSpec::doubling(16, [(2, 2), (2, 2)], ConvFlavor::DepthwiseSeparable);
        let d = Downsample::build(&mut store, "down", spec, &mut Rng::new(0)).unwrap();
        let mut pass = Pass::new(&mut store, Mode::Infer, BatchNormConfig::default());
        let xv = pass.input(Tensor::zeros(vec![1, 16, 28, 28]), false);
        let y = d.forward(&mut pass, xv).unwrap();
        assert_eq!(pass.value(y).shape(), &[1, 64, 7, 7]);
        drop(pass);

        let spec = DownsampleSpec::doubling(32, [(2, 2), (2, 1)], ConvFlavor::DepthwiseSeparable);
        let d = Downsample::build(&mut store, "down2", spec, &mut Rng::new(0)).unwrap();
        let mut pass = Pass::new(&mut store, Mode::Infer, BatchNormConfig::default());
        let xv = pass.input(Tensor::zeros(vec![1, 32, 16, 140]), false);
        let y = d.forward(&mut pass, xv).unwrap();
        assert_eq!(pass.value(y).shape(), &[1, 128, 4, 70]);
    }
}
