//! Per-channel batch normalization over B×C×H×W tensors.
//!
//! Statistics are accumulated in `f64` in (batch, row, column) order.

use rayon::prelude::*;

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Normalized activations and the per-channel inverse standard deviation.
pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased batch variance (train mode only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn check<T: Scalar>(x: &Tensor<T>, params: &[&Tensor<T>]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    for p in params {
        if p.len() != c {
            return Err(config_err(format!(
                "batch norm: parameter of length {} for {c} channels",
                p.len()
            )));
        }
    }
    Ok((b, c, h * w))
}

fn channel_stats<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0;
            for bi in 0..b {
                for &v in &x[(bi * c + ch) * hw..][..hw] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for bi in 0..b {
                for &v in &x[(bi * c + ch) * hw..][..hw] {
                    let d = v.as_f64() - mean;
                    sq += d * d;
                }
            }
            (mean, sq / n)
        })
        .unzip()
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    c: usize,
    hw: usize,
    mean: &[f64],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    xhat.par_chunks_mut(hw)
        .zip(y.par_chunks_mut(hw))
        .zip(x.data().par_chunks(hw))
        .enumerate()
        .for_each(|(idx, ((xh, yy), xs))| {
            let ch = idx % c;
            let m = T::of(mean[ch]);
            let (is, g, bt) = (inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for ((h, o), &v) in xh.iter_mut().zip(yy.iter_mut()).zip(xs) {
                *h = (v - m) * is;
                *o = *h * g + bt;
            }
        });
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), y).expect("same shape"),
        Tensor::new(shape, xhat).expect("same shape"),
    )
}

pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
    cfg: &BatchNormConfig,
) -> Result<BatchNormOutput<T>> {
    let (b, c, hw) = check(x, &[gamma, beta, running_mean, running_var])?;
    match mode {
        Mode::Train => {
            let n = b * hw;
            if n < 2 {
                return Err(Error::DegenerateBatch(n));
            }
            let (mean, var) = channel_stats(x.data(), b, c, hw);
            let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + cfg.eps).sqrt())).collect();
            let (output, normalized) = normalize(x, c, hw, &mean, &inv_std, gamma, beta);
            let unbiased = var.iter().map(|&v| v * n as f64 / (n - 1) as f64).collect();
            Ok(BatchNormOutput {
                output,
                normalized,
                inv_std,
                batch_stats: Some((mean, unbiased)),
            })
        }
        Mode::Infer => {
            let mean: Vec<f64> = running_mean.data().iter().map(|v| v.as_f64()).collect();
            let inv_std: Vec<T> = running_var
                .data()
                .iter()
                .map(|v| T::of(1.0 / (v.as_f64() + cfg.eps).sqrt()))
                .collect();
            let (output, normalized) = normalize(x, c, hw, &mean, &inv_std, gamma, beta);
            Ok(BatchNormOutput {
                output,
                normalized,
                inv_std,
                batch_stats: None,
            })
        }
    }
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running<T: Scalar>(running: &mut Tensor<T>, batch: &[f64], momentum: f64) {
    for (r, &v) in running.data_mut().iter_mut().zip(batch) {
        *r = T::of((1.0 - momentum) * r.as_f64() + momentum * v);
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    normalized: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    mode: Mode,
) -> Result<BatchNormGrads<T>> {
    let (b, c, hw) = check(dy, &[gamma])?;
    let (sum_dy, sum_dy_xhat): (Vec<f64>, Vec<f64>) = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut s, mut sx) = (0.0, 0.0);
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for (&g, &xh) in dy.data()[off..off + hw].iter().zip(&normalized.data()[off..off + hw]) {
                    s += g.as_f64();
                    sx += g.as_f64() * xh.as_f64();
                }
            }
            (s, sx)
        })
        .unzip();
    let n = (b * hw) as f64;
    let mut dx = vec![T::zero(); dy.len()];
    dx.par_chunks_mut(hw)
        .zip(dy.data().par_chunks(hw))
        .zip(normalized.data().par_chunks(hw))
        .enumerate()
        .for_each(|(idx, ((d, g), xh))| {
            let ch = idx % c;
            let scale = gamma.data()[ch] * inv_std[ch];
            match mode {
                Mode::Train => {
                    let mean_dy = T::of(sum_dy[ch] / n);
                    let mean_dy_xhat = T::of(sum_dy_xhat[ch] / n);
                    for ((o, &gv), &x) in d.iter_mut().zip(g).zip(xh) {
                        *o = scale * (gv - mean_dy - x * mean_dy_xhat);
                    }
                }
                Mode::Infer => {
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o = scale * gv;
                    }
                }
            }
        });
    Ok(BatchNormGrads {
        input: Tensor::new(dy.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], sum_dy_xhat.iter().map(|&v| T::of(v)).collect())?,
        beta: Tensor::new(vec![c], sum_dy.iter().map(|&v| T::of(v)).collect())?,
    })
}
