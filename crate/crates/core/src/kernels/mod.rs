//! Forward and backward kernels on plain tensors. The tape in
//! [`crate::autograd`] wires these together.

pub mod conv;
pub mod norm;

use crate::error::{config_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::ConvGeometry;
pub use norm::{BatchNormConfig, Mode};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Inverted-dropout scale factors: `0` for dropped elements, `1/(1−rate)`
/// for survivors. An element is dropped when a uniform 32-bit draw falls
/// below `rate·2³²`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let threshold = (rate * 4294967296.0) as u64;
    let keep = T::of(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| {
            if (rng.next_u32() as u64) < threshold {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

/// Concatenates B×Cᵢ×H×W tensors along the channel axis, in order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(Error::Empty("concat_channels"))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(config_err(format!(
                "concat_channels: extents {:?} do not match {:?}",
                t.shape(),
                first.shape()
            )));
        }
        total += tc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::new(vec![b, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let part = dy.slice_channels(offset..offset + c);
            offset += c;
            part
        })
        .collect()
}

/// Elementwise sum accumulated in list order.
pub fn sum_features<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(Error::Empty("sum_features"))?;
    let mut acc = (*first).clone();
    for t in &inputs[1..] {
        if t.shape() != first.shape() {
            return Err(config_err(format!(
                "sum_features: shape {:?} differs from {:?}",
                t.shape(),
                first.shape()
            )));
        }
        acc.add_assign(t);
    }
    Ok(acc)
}

/// `x·W + b` with `x: B×D`, `W: D×K`, `b: K`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d) = x.dims2()?;
    let (wd, k) = weight.dims2()?;
    if wd != d || bias.len() != k {
        return Err(config_err(format!(
            "fully_connected: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); b * k];
    for row in out.chunks_mut(k) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(b, d, k, x.data(), false, weight.data(), false, &mut out, true);
    Tensor::new(vec![b, k], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (b, d) = x.dims2()?;
    let (_, k) = weight.dims2()?;
    let mut dx = vec![T::zero(); b * d];
    T::gemm(b, k, d, dy.data(), false, weight.data(), true, &mut dx, false);
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, b, k, x.data(), true, dy.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); k];
    for row in dy.data().chunks(k) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![b, d], dx)?,
        weight: Tensor::new(vec![d, k], dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

/// Row-wise log-soft-max over the last axis (max-subtracted).
pub fn log_softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for (d, &v) in o.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

pub struct SoftmaxXent<T> {
    pub loss: T,
    pub probs: Tensor<T>,
}

/// Mean negative log-probability of `targets` under a row-wise soft-max of
/// `logits` (`B×K`, or `B×T×K` with one target per frame).
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<SoftmaxXent<T>> {
    let k = *logits.shape().last().expect("non-empty shape");
    let rows = logits.len() / k;
    if targets.len() != rows {
        return Err(config_err(format!(
            "softmax_xent: {} targets for {rows} rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::TargetOutOfRange { index: bad, classes: k });
    }
    let logp = log_softmax_rows(logits.data(), k);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        loss -= logp[r * k + t].as_f64();
    }
    let probs = Tensor::new(logits.shape().to_vec(), logp.into_iter().map(|v| v.exp()).collect())?;
    Ok(SoftmaxXent {
        loss: T::of(loss / rows as f64),
        probs,
    })
}

/// `(probs − one_hot(target)) / rows`, scaled by the upstream gradient.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, targets: &[usize], upstream: T) -> Tensor<T> {
    let k = *probs.shape().last().expect("non-empty shape");
    let rows = targets.len();
    let scale = upstream / T::of(rows as f64);
    let mut g = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        g.data_mut()[r * k + t] -= T::one();
    }
    for v in g.data_mut() {
        *v *= scale;
    }
    g
}

/// B×C×H×W → B×W×(C·H): one frame per image column, holding every
/// channel/row value of that column in channel-major order.
pub fn columns_to_frames<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let d = c * h;
    let mut out = vec![T::zero(); b * w * d];
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h {
                let src = &x.data()[((bi * c + ci) * h + yi) * w..][..w];
                for (t, &v) in src.iter().enumerate() {
                    out[(bi * w + t) * d + ci * h + yi] = v;
                }
            }
        }
    }
    Tensor::new(vec![b, w, d], out)
}

pub fn frames_to_columns<T: Scalar>(dy: &Tensor<T>, shape: (usize, usize, usize, usize)) -> Result<Tensor<T>> {
    let (b, c, h, w) = shape;
    let d = c * h;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h {
                let dst = &mut out[((bi * c + ci) * h + yi) * w..][..w];
                for (t, v) in dst.iter_mut().enumerate() {
                    *v = dy.data()[(bi * w + t) * d + ci * h + yi];
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(vec![3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_shapes_and_slices() {
        let a = Tensor::<f32>::from_fn(vec![1, 16, 8, 8], |i| i as f32);
        let b = Tensor::<f32>::full(vec![1, 12, 8, 8], -1.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 28, 8, 8]);
        assert_eq!(c.slice_channels(0..16).unwrap(), a);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::<f32>::zeros(vec![1, 2, 4, 8]);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn sum_examples() {
        let a = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(sum_features(&[&a, &b]).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(sum_features(&[&a]).unwrap(), a);
        let neg = a.scale(-1.0);
        assert_eq!(sum_features(&[&a, &neg]).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(sum_features::<f64>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn fc_examples() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        assert_eq!(fully_connected(&x, &w, &b).unwrap().data(), &[2.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap();
        assert_eq!(
            fully_connected(&x, &eye, &Tensor::zeros(vec![2])).unwrap().data(),
            x.data()
        );
    }

    #[test]
    fn softmax_examples() {
        let l = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out = softmax_xent(&l, &[0]).unwrap();
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);

        let l = Tensor::<f64>::new(vec![1, 2], vec![std::f64::consts::LN_2, 0.0]).unwrap();
        let out = softmax_xent(&l, &[1]).unwrap();
        assert!((out.probs.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.probs.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let g = softmax_xent_backward(&out.probs, &[1], 1.0);
        assert!((g.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_target() {
        let l = Tensor::<f32>::zeros(vec![1, 3]);
        assert!(matches!(
            softmax_xent(&l, &[3]),
            Err(Error::TargetOutOfRange { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn dropout_rate_bounds() {
        let mut rng = Rng::new(0);
        assert!(dropout_mask::<f32>(4, 1.0, &mut rng).is_err());
        let m = dropout_mask::<f32>(4, 0.0, &mut rng).unwrap();
        assert_eq!(m, vec![1.0; 4]);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = Rng::new(11);
        let m = dropout_mask::<f64>(100_000, 0.5, &mut rng).unwrap();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn frames_round_trip() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 5], |i| i as f64);
        let f = columns_to_frames(&x).unwrap();
        assert_eq!(f.shape(), &[2, 5, 6]);
        // frame t of sample 0 holds column t: channel 1, row 1 → x[0,1,1,t]
        assert_eq!(f.data()[2 * 6 + 3], x.data()[(2 + 1) * 5 + 2]);
        assert_eq!(frames_to_columns(&f, (2, 3, 2, 5)).unwrap(), x);
    }
}
