//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so the tape is
//! always in topological order and [`Tape::backward`] is a single reverse
//! sweep. A tape may be swept more than once; each sweep returns fresh
//! gradients, and callers that accumulate them into parameters get doubled
//! gradients on a second call (see [`crate::params::ParamStore::accumulate`]).

use rayon::prelude::*;

use crate::ctc::{self, LabelSeq};
use crate::error::{config_err, Error, Result};
use crate::kernels::{self, conv, norm, BatchNormConfig, ConvGeometry, Mode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Depthwise {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    Relu {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    Sum {
        inputs: Vec<Var>,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Reshape {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxXent {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<usize>,
    },
    Ctc {
        logits: Var,
        grad: Tensor<T>,
    },
    Frames {
        input: Var,
        shape: (usize, usize, usize, usize),
    },
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat_channels",
            Op::Sum { .. } => "sum_features",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "fully_connected",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Ctc { .. } => "ctc_loss",
            Op::Frames { .. } => "columns_to_frames",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Result<Var> {
        let out = conv::depthwise_forward(self.value(input), self.value(weight), &geom)?;
        let rg = self.any_grad(&[input, weight]);
        self.push(out, Op::Depthwise { input, weight, geom }, rg)
    }

    /// Depthwise spatial convolution followed by a pointwise 1×1 mix, with no
    /// nonlinearity in between. Stride and padding apply to the depthwise stage.
    pub fn depthwise_separable(
        &mut self,
        input: Var,
        dw_weight: Var,
        pw_weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let c = self.value(input).dims4()?.1;
        let dw = self.value(dw_weight).shape();
        if dw.first() != Some(&c) {
            return Err(config_err(format!(
                "depthwise-separable conv: depthwise weight {dw:?} for {c} input channels"
            )));
        }
        let mid = self.depthwise_conv2d(input, dw_weight, geom)?;
        self.conv2d(mid, pw_weight, bias, ConvGeometry::pointwise())
    }

    /// Batch normalization. In train mode the running statistics are updated
    /// in place as a side effect of the forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: Mode,
        cfg: &BatchNormConfig,
    ) -> Result<Var> {
        let out = norm::batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode,
            cfg,
        )?;
        if let Some((mean, var)) = &out.batch_stats {
            norm::update_running(running_mean, mean, cfg.momentum);
            norm::update_running(running_var, var, cfg.momentum);
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        let (normalized, inv_std) = if rg {
            (out.normalized, out.inv_std)
        } else {
            (Tensor::zeros(vec![1]), Vec::new())
        };
        self.push(
            out.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            },
            rg,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = kernels::relu(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Inverted dropout. Identity (the same [`Var`]) in infer mode or at rate 0.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let mask = kernels::dropout_mask::<T>(x.len(), rate, rng)?;
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Dropout { input, mask }, rg)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.len() == 1 {
            self.value(inputs[0]).dims4()?;
            return Ok(inputs[0]);
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        let channels = values.iter().map(|t| t.shape()[1]).collect();
        let rg = self.any_grad(inputs);
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
            rg,
        )
    }

    /// Elementwise sum in list order. A single input is returned unchanged.
    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::sum_features(&values)?;
        let rg = self.any_grad(inputs);
        self.push(
            out,
            Op::Sum {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sum(&[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).scale(factor);
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Reshape { input }, rg)
    }

    /// Collapses everything after the leading axis: B×… → B×D.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let b = shape[0];
        let d = shape[1..].iter().product();
        self.reshape(input, vec![b, d])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(out, Op::Linear { input, weight, bias }, rg)
    }

    /// Mean cross-entropy over rows. Returns the scalar loss and the soft-max
    /// probabilities.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor<T>)> {
        let out = kernels::softmax_xent(self.value(logits), targets)?;
        let probs = out.probs.clone();
        let rg = self.any_grad(&[logits]);
        let var = self.push(
            Tensor::scalar(out.loss),
            Op::SoftmaxXent {
                logits,
                probs: out.probs,
                targets: targets.to_vec(),
            },
            rg,
        )?;
        Ok((var, probs))
    }

    /// CTC loss of per-frame logits `B×T×V` against one target per sample,
    /// averaged over the batch. Log-soft-max is applied internally.
    pub fn ctc_loss(&mut self, logits: Var, targets: &[LabelSeq]) -> Result<Var> {
        let x = self.value(logits);
        let [b, t, v] = *x.shape() else {
            return Err(config_err(format!(
                "ctc_loss expects B×T×V logits, got {:?}",
                x.shape()
            )));
        };
        if targets.len() != b {
            return Err(config_err(format!("ctc_loss: {} targets for batch {b}", targets.len())));
        }
        let per_sample: Vec<Result<(f64, Vec<f64>)>> = x
            .data()
            .par_chunks(t * v)
            .zip(targets.par_iter())
            .map(|(chunk, target)| {
                let logits: Vec<f64> = chunk.iter().map(|x| x.as_f64()).collect();
                let logp = kernels::log_softmax_rows(&logits, v);
                ctc::ctc_loss_grad_raw(&logp, t, v, target)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(b * t * v);
        for r in per_sample {
            let (nll, g) = r?;
            loss += nll;
            grad.extend(g.into_iter().map(|x| T::of(x / b as f64)));
        }
        let grad = Tensor::new(vec![b, t, v], grad)?;
        let rg = self.any_grad(&[logits]);
        self.push(Tensor::scalar(T::of(loss / b as f64)), Op::Ctc { logits, grad }, rg)
    }

    pub fn columns_to_frames(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).dims4()?;
        let out = kernels::columns_to_frames(self.value(input))?;
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Frames { input, shape }, rg)
    }

    /// `Σ input ⊙ weights`, a scalar.
    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.len() != weights.len() {
            return Err(config_err(format!(
                "dot: {:?} against {:?}",
                x.shape(),
                weights.shape()
            )));
        }
        let s = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Dot { input, weights }, rg)
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let ones = Tensor::full(self.value(input).shape().to_vec(), T::one());
        self.dot(input, ones)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that requires them; intermediate gradients are dropped as soon as
    /// they have been propagated, leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(&node.op, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv::conv2d_backward(self.value(*input), self.value(*weight), geom, g)?;
                if self.wants(*input) {
                    accumulate(grads, *input, cg.input);
                }
                if self.wants(*weight) {
                    accumulate(grads, *weight, cg.weight);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(grads, *b, cg.bias);
                    }
                }
            }
            Op::Depthwise { input, weight, geom } => {
                let dg = conv::depthwise_backward(self.value(*input), self.value(*weight), geom, g)?;
                if self.wants(*input) {
                    accumulate(grads, *input, dg.input);
                }
                if self.wants(*weight) {
                    accumulate(grads, *weight, dg.weight);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            } => {
                let bg = norm::batch_norm_backward(g, normalized, self.value(*gamma), inv_std, *mode)?;
                if self.wants(*input) {
                    accumulate(grads, *input, bg.input);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, bg.gamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, bg.beta);
                }
            }
            Op::Relu { input } => {
                accumulate(grads, *input, kernels::relu_backward(self.value(*input), g));
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *input, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Concat { inputs, channels } => {
                for (v, part) in inputs.iter().zip(kernels::split_channels(g, channels)?) {
                    if self.wants(*v) {
                        accumulate(grads, *v, part);
                    }
                }
            }
            Op::Sum { inputs } => {
                for v in inputs {
                    if self.wants(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.scale(*factor));
            }
            Op::Reshape { input } => {
                let shape = self.value(*input).shape().to_vec();
                accumulate(grads, *input, g.clone().reshape(shape)?);
            }
            Op::Linear { input, weight, bias } => {
                let lg = kernels::fully_connected_backward(self.value(*input), self.value(*weight), g)?;
                if self.wants(*input) {
                    accumulate(grads, *input, lg.input);
                }
                if self.wants(*weight) {
                    accumulate(grads, *weight, lg.weight);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, lg.bias);
                }
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                accumulate(grads, *logits, kernels::softmax_xent_backward(probs, targets, g.item()));
            }
            Op::Ctc { logits, grad } => {
                accumulate(grads, *logits, grad.scale(g.item()));
            }
            Op::Frames { input, shape } => {
                accumulate(grads, *input, kernels::frames_to_columns(g, *shape)?);
            }
            Op::Dot { input, weights } => {
                accumulate(grads, *input, weights.scale(g.item()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_loss_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.0), true);
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn zero_times_f_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![4], |i| i as f64 + 0.5), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn relu_gradient_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -3.0]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![f32::MAX]).unwrap(), false);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(vec![10], 1.0), false);
        assert_eq!(tape.dropout(x, 0.9, Mode::Infer, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }
}
