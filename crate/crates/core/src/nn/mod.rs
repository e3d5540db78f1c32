//! Network blocks built on the tape, and the full model.

mod layers;
mod model;
mod spec;

pub use layers::{
    local_feature_fusion, residual_block, BnIds, Conv, ConvGroup, DenseBlock, DenseOutput, Downsample, Gdb, GdbOutput,
    Rrdb, RrdbOutput,
};
pub use model::{head_loss, Drn, FeatureTag, Outputs, Targets};
pub use spec::{
    Combine, ConvFlavor, ConvGroupSpec, DenseBlockSpec, DownsampleSpec, DrnConfig, DropoutRates, GdbSpec, Geometry,
    Head, RrdbSpec,
};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{config_err, Result};
use crate::kernels::{BatchNormConfig, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One forward (and optionally backward) pass over a parameter store.
///
/// Parameters are copied onto the tape the first time a layer asks for them.
/// Batch-norm running statistics in the store are updated during train-mode
/// forward passes.
pub struct Pass<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn: BatchNormConfig,
    rng: Option<&'a mut Rng>,
    track_grads: bool,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode, bn: BatchNormConfig) -> Self {
        let n = store.len();
        Pass {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            bn,
            rng: None,
            track_grads: mode == Mode::Train,
        }
    }

    /// Random source for dropout masks.
    pub fn with_rng(mut self, rng: &'a mut Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Whether parameters are recorded as requiring gradients.
    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let v = self.tape.leaf(self.store.param(id).value.clone(), self.track_grads);
        self.bound[id] = Some(v);
        v
    }

    pub fn batch_norm(&mut self, x: Var, ids: &BnIds) -> Result<Var> {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        let (mean, var) = self.store.buffer_pair_mut(ids.mean, ids.var);
        self.tape.batch_norm(x, gamma, beta, mean, var, self.mode, &self.bn)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Infer || rate == 0.0 {
            return self.tape.dropout(x, rate, Mode::Infer, &mut Rng::new(0));
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| config_err("train-mode dropout needs a random source"))?;
        self.tape.dropout(x, rate, self.mode, rng)
    }

    /// Runs the reverse sweep and adds every parameter gradient into the
    /// store's accumulators. Gradients of non-parameter leaves are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.tape.backward(loss)?;
        for (id, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                self.store.accumulate(id, g);
            }
        }
        Ok(grads)
    }
}
