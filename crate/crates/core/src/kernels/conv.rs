//! Convolution kernels: standard (im2col + GEMM) and depthwise (direct).
//!
//! Batch samples are processed in parallel. Weight gradients are reduced
//! over the batch in sample order, so results do not depend on the number of
//! worker threads.

use rayon::prelude::*;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel size, stride and zero padding of a 2-D convolution, as (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// Square kernel, unit stride, "same" padding for odd kernels.
    pub fn same(k: usize) -> Self {
        Self::new((k, k), (1, 1), (k / 2, k / 2))
    }

    pub fn pointwise() -> Self {
        Self::new((1, 1), (1, 1), (0, 0))
    }

    pub fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    /// `floor((H + 2p − k) / s) + 1` per axis.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(config_err(format!("degenerate convolution geometry {self:?}")));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(config_err(format!(
                "kernel {kh}×{kw} does not fit a padded {}×{} input",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

/// Output columns `ox` whose input column `ox·s + k − p` lies inside `0..w`.
#[inline]
fn valid_cols(k: usize, p: usize, s: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if w + p <= k {
        return (0, 0);
    }
    let hi = ((w - 1 + p - k) / s + 1).min(ow);
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let plane = oh * ow;
    cols.fill(T::zero());
    for ci in 0..c {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * plane..][..plane];
                let (lo, hi) = valid_cols(kx, pw, sw, w, ow);
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xin[iy as usize * w..];
                    let dst = &mut row[oy * ow..];
                    for ox in lo..hi {
                        dst[ox] = src[ox * sw + kx - pw];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, dx: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let plane = oh * ow;
    for ci in 0..c {
        let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * plane..][..plane];
                let (lo, hi) = valid_cols(kx, pw, sw, w, ow);
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxin[iy as usize * w..];
                    let src = &row[oy * ow..];
                    for ox in lo..hi {
                        dst[ox * sw + kx - pw] += src[ox];
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(config_err(format!(
            "conv2d: weight expects {ci} input channels, input has {c}"
        )));
    }
    if (kh, kw) != g.kernel {
        return Err(config_err(format!(
            "conv2d: weight kernel {kh}×{kw} disagrees with geometry {:?}",
            g.kernel
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != co {
            return Err(config_err(format!(
                "conv2d: bias has {} entries for {co} output channels",
                bias.len()
            )));
        }
    }
    let (oh, ow) = g.output_extent(h, w)?;
    Ok((b, c, h, w, co, oh, ow))
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (b, c, h, w, co, oh, ow) = check_conv(x, weight, bias, g)?;
    let k = c * g.kernel.0 * g.kernel.1;
    let plane = oh * ow;
    let mut out = vec![T::zero(); b * co * plane];
    let wd = weight.data();
    out.par_chunks_mut(co * plane)
        .zip(x.data().par_chunks(c * h * w))
        .for_each(|(o, xs)| {
            if g.is_pointwise() {
                T::gemm(co, k, plane, wd, false, xs, false, o, false);
            } else {
                let mut cols = vec![T::zero(); k * plane];
                im2col(xs, c, h, w, g, oh, ow, &mut cols);
                T::gemm(co, k, plane, wd, false, &cols, false, o, false);
            }
            if let Some(bias) = bias {
                for (oc, &bv) in bias.data().iter().enumerate() {
                    for v in &mut o[oc * plane..(oc + 1) * plane] {
                        *v += bv;
                    }
                }
            }
        });
    Tensor::new(vec![b, co, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    dout: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (b, c, h, w, co, oh, ow) = check_conv(x, weight, None, g)?;
    let k = c * g.kernel.0 * g.kernel.1;
    let plane = oh * ow;
    let wd = weight.data();
    let mut dx = vec![T::zero(); b * c * h * w];
    let partial_dw: Vec<Vec<T>> = dx
        .par_chunks_mut(c * h * w)
        .zip(x.data().par_chunks(c * h * w))
        .zip(dout.data().par_chunks(co * plane))
        .map(|((dxs, xs), dos)| {
            let mut dw = vec![T::zero(); co * k];
            if g.is_pointwise() {
                T::gemm(co, plane, k, dos, false, xs, true, &mut dw, false);
                T::gemm(k, co, plane, wd, true, dos, false, dxs, false);
            } else {
                let mut cols = vec![T::zero(); k * plane];
                im2col(xs, c, h, w, g, oh, ow, &mut cols);
                T::gemm(co, plane, k, dos, false, &cols, true, &mut dw, false);
                T::gemm(k, co, plane, wd, true, dos, false, &mut cols, false);
                col2im(&cols, c, h, w, g, oh, ow, dxs);
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); co * k];
    for p in &partial_dw {
        for (a, &v) in dw.iter_mut().zip(p) {
            *a += v;
        }
    }
    let mut db = vec![T::zero(); co];
    for bi in 0..b {
        for (oc, acc) in db.iter_mut().enumerate() {
            let s = &dout.data()[(bi * co + oc) * plane..][..plane];
            *acc += s.iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![co], db)?,
    })
}

fn check_depthwise<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 {
        return Err(config_err(format!(
            "depthwise conv: weight {:?} does not match {c} input channels",
            weight.shape()
        )));
    }
    if (kh, kw) != g.kernel {
        return Err(config_err(format!(
            "depthwise conv: weight kernel {kh}×{kw} disagrees with geometry {:?}",
            g.kernel
        )));
    }
    let (oh, ow) = g.output_extent(h, w)?;
    Ok((b, c, h, w, oh, ow))
}

/// Per-channel spatial convolution; weight is `C × 1 × kH × kW`.
pub fn depthwise_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let (b, c, h, w, oh, ow) = check_depthwise(x, weight, g)?;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let mut out = vec![T::zero(); b * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(x.data().par_chunks(h * w))
        .enumerate()
        .for_each(|(idx, (o, xin))| {
            let kern = &weight.data()[(idx % c) * kh * kw..][..kh * kw];
            for oy in 0..oh {
                let orow = &mut o[oy * ow..(oy + 1) * ow];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &xin[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..kw {
                        let wv = kern[ky * kw + kx];
                        let (lo, hi) = valid_cols(kx, pw, sw, w, ow);
                        if lo >= hi {
                            continue;
                        }
                        if sw == 1 {
                            let off = kx as isize - pw as isize;
                            let src = &irow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (d, &s) in orow[lo..hi].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![b, c, oh, ow], out)
}

pub struct DepthwiseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
}

pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    dout: &Tensor<T>,
) -> Result<DepthwiseGrads<T>> {
    let (b, c, h, w, oh, ow) = check_depthwise(x, weight, g)?;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let mut dx = vec![T::zero(); b * c * h * w];
    let partial: Vec<Vec<T>> = dx
        .par_chunks_mut(h * w)
        .zip(x.data().par_chunks(h * w))
        .zip(dout.data().par_chunks(oh * ow))
        .enumerate()
        .map(|(idx, ((dxin, xin), dop))| {
            let kern = &weight.data()[(idx % c) * kh * kw..][..kh * kw];
            let mut dk = vec![T::zero(); kh * kw];
            for oy in 0..oh {
                let drow = &dop[oy * ow..(oy + 1) * ow];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let wv = kern[ky * kw + kx];
                        let (lo, hi) = valid_cols(kx, pw, sw, w, ow);
                        let mut acc = T::zero();
                        for ox in lo..hi {
                            let ix = iy * w + ox * sw + kx - pw;
                            acc += drow[ox] * xin[ix];
                            dxin[ix] += wv * drow[ox];
                        }
                        dk[ky * kw + kx] += acc;
                    }
                }
            }
            dk
        })
        .collect();
    let mut dw = vec![T::zero(); c * kh * kw];
    for (idx, p) in partial.iter().enumerate() {
        let ch = idx % c;
        for (a, &v) in dw[ch * kh * kw..(ch + 1) * kh * kw].iter_mut().zip(p) {
            *a += v;
        }
    }
    Ok(DepthwiseGrads {
        input: Tensor::new(vec![b, c, h, w], dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
    })
}
