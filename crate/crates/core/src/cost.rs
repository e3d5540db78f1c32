//! Analytic parameter and multiply-accumulate counts for standard and
//! refined dense blocks.
//!
//! Only convolution weights enter the refined/standard ratio. Biases,
//! batch-norm affine parameters and the 1×1 fusion convolution are reported
//! on their own lines.

use std::fmt::Write as _;

use crate::nn::{Combine, ConvFlavor, DenseBlockSpec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub label: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: u64,
    /// `params × H'·W'`.
    pub macs: u64,
}

/// Weights of one convolution: `in·out·kH·kW` for a standard kernel,
/// `in·kH·kW + in·out` for a depthwise-separable one.
pub fn count_conv(
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    flavor: ConvFlavor,
    spatial: (usize, usize),
) -> LayerCost {
    let (i, o, kh, kw) = (in_ch as u64, out_ch as u64, kernel.0 as u64, kernel.1 as u64);
    let params = match flavor {
        ConvFlavor::Standard => i * o * kh * kw,
        ConvFlavor::DepthwiseSeparable => i * kh * kw + i * o,
    };
    LayerCost {
        label: String::new(),
        in_channels: in_ch,
        out_channels: out_ch,
        params,
        macs: params * (spatial.0 * spatial.1) as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub macs: u64,
    /// Convolution biases, one per output channel of each inner layer.
    pub bias_params: u64,
    /// Batch-norm gamma and beta of each inner layer.
    pub bn_params: u64,
}

fn block_cost(spec: &DenseBlockSpec, flavor: ConvFlavor, spatial: (usize, usize)) -> BlockCost {
    let layers: Vec<LayerCost> = (0..spec.layers)
        .map(|i| {
            let cin = spec.layer_in_channels(i);
            LayerCost {
                label: format!("layer{}", i + 1),
                ..count_conv(cin, spec.growth, spec.kernel, flavor, spatial)
            }
        })
        .collect();
    BlockCost {
        params: layers.iter().map(|l| l.params).sum(),
        macs: layers.iter().map(|l| l.macs).sum(),
        bias_params: (spec.layers * spec.growth) as u64,
        bn_params: layers.iter().map(|l| 2 * l.in_channels as u64).sum(),
        layers,
    }
}

/// Inner layer `i` reads `c0 + (i−1)·k` channels.
pub fn cost_dense_block(spec: &DenseBlockSpec, flavor: ConvFlavor, spatial: (usize, usize)) -> BlockCost {
    block_cost(&spec.with_combine(Combine::Concat), flavor, spatial)
}

/// Inner layer 1 reads `c0` channels, every later layer reads `k`.
pub fn cost_refined_dense_block(spec: &DenseBlockSpec, flavor: ConvFlavor, spatial: (usize, usize)) -> BlockCost {
    block_cost(&spec.with_combine(Combine::Sum), flavor, spatial)
}

/// `(α + L − 1) / (Lα + L(L−1)/2)` with `α = c0/k`: the standard-conv ratio.
pub fn closed_form_ratio(alpha: f64, layers: usize) -> f64 {
    let l = layers as f64;
    (alpha + l - 1.0) / (l * alpha + l * (l - 1.0) / 2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub spec: DenseBlockSpec,
    pub flavor: ConvFlavor,
    pub spatial: (usize, usize),
    pub standard: BlockCost,
    pub refined: BlockCost,
    /// The 1×1 fusion back to `c0` channels (same for both variants).
    pub fusion: LayerCost,
    pub ratio: f64,
    /// `(1/L, 2/L]`.
    pub band: (f64, f64),
    pub in_band: bool,
}

pub fn compare_blocks(spec: &DenseBlockSpec, flavor: ConvFlavor, spatial: (usize, usize)) -> CostReport {
    let standard = cost_dense_block(spec, flavor, spatial);
    let refined = cost_refined_dense_block(spec, flavor, spatial);
    let ratio = refined.params as f64 / standard.params as f64;
    let l = spec.layers as f64;
    let band = (1.0 / l, 2.0 / l);
    let fusion = LayerCost {
        label: "fusion".into(),
        ..count_conv(
            spec.out_channels(),
            spec.in_channels,
            (1, 1),
            ConvFlavor::Standard,
            spatial,
        )
    };
    CostReport {
        spec: *spec,
        flavor,
        spatial,
        standard,
        refined,
        fusion,
        ratio,
        band,
        in_band: ratio > band.0 && ratio <= band.1,
    }
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "L={} k={} c0={} kernel={}x{} flavor={} spatial={}x{}",
            s.layers, s.growth, s.in_channels, s.kernel.0, s.kernel.1, self.flavor, self.spatial.0, self.spatial.1
        );
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>10} {:>12} {:>8} {:>10} {:>12}",
            "layer", "std_in", "std_params", "std_macs", "ref_in", "ref_params", "ref_macs"
        );
        for (a, b) in self.standard.layers.iter().zip(&self.refined.layers) {
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>10} {:>12} {:>8} {:>10} {:>12}",
                a.label, a.in_channels, a.params, a.macs, b.in_channels, b.params, b.macs
            );
        }
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>10} {:>12} {:>8} {:>10} {:>12}",
            "total", "", self.standard.params, self.standard.macs, "", self.refined.params, self.refined.macs
        );
        let _ = writeln!(
            out,
            "excluded: bias {} / {}, bn {} / {}, fusion 1x1 {} params + {} bias",
            self.standard.bias_params,
            self.refined.bias_params,
            self.standard.bn_params,
            self.refined.bn_params,
            self.fusion.params,
            s.in_channels
        );
        let _ = writeln!(
            out,
            "ratio {:.4}  band ({:.4}, {:.4}]  {}",
            self.ratio,
            self.band.0,
            self.band.1,
            if self.in_band { "inside" } else { "outside" }
        );
        out
    }

    /// One row per inner layer and variant, then the totals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,layer,in_channels,out_channels,params,macs\n");
        for (name, block) in [("standard", &self.standard), ("refined", &self.refined)] {
            for l in &block.layers {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{},{}",
                    l.label, l.in_channels, l.out_channels, l.params, l.macs
                );
            }
            let _ = writeln!(out, "{name},total,,,{},{}", block.params, block.macs);
        }
        let f = &self.fusion;
        let _ = writeln!(
            out,
            "both,fusion,{},{},{},{}",
            f.in_channels, f.out_channels, f.params, f.macs
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(l: usize, k: usize, c0: usize) -> DenseBlockSpec {
        DenseBlockSpec::new(l, k, c0, Combine::Concat).with_flavor(ConvFlavor::Standard)
    }

    #[test]
    fn conv_counts() {
        assert_eq!(count_conv(16, 32, (3, 3), ConvFlavor::Standard, (1, 1)).params, 4608);
        assert_eq!(
            count_conv(16, 32, (3, 3), ConvFlavor::DepthwiseSeparable, (1, 1)).params,
            656
        );
        assert_eq!(count_conv(64, 16, (1, 1), ConvFlavor::Standard, (1, 1)).params, 1024);
        assert_eq!(count_conv(64, 16, (1, 1), ConvFlavor::Standard, (8, 8)).macs, 1024 * 64);
    }

    #[test]
    fn worked_pair() {
        let r = compare_blocks(&spec(4, 12, 24), ConvFlavor::Standard, (1, 1));
        let s: Vec<u64> = r.standard.layers.iter().map(|l| l.params).collect();
        let f: Vec<u64> = r.refined.layers.iter().map(|l| l.params).collect();
        assert_eq!(s, [2592, 3888, 5184, 6480]);
        assert_eq!(f, [2592, 1296, 1296, 1296]);
        assert_eq!((r.standard.params, r.refined.params), (18144, 6480));
        assert!((r.ratio - 6480.0 / 18144.0).abs() < 1e-15);
        assert!(r.in_band);
    }

    #[test]
    fn single_layer_reads_c0() {
        let r = compare_blocks(&spec(1, 12, 24), ConvFlavor::Standard, (1, 1));
        assert_eq!(r.standard.layers[0].in_channels, 24);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn closed_form_examples() {
        let cases = [
            (1.0, 2, 2.0 / 3.0),
            (1.0, 8, 2.0 / 9.0),
            (4.0, 3, 0.4),
            (4.0, 8, 11.0 / 60.0),
        ];
        for (alpha, l, want) in cases {
            let k = 6;
            let c0 = (alpha * k as f64) as usize;
            let r = compare_blocks(&spec(l, k, c0), ConvFlavor::Standard, (3, 3));
            assert!((r.ratio - want).abs() < 1e-12, "α={alpha} L={l}");
            assert!((closed_form_ratio(alpha, l) - want).abs() < 1e-12);
            assert!(r.ratio > 1.0 / l as f64 && r.ratio <= 2.0 / l as f64);
        }
    }

    #[test]
    fn text_and_csv_carry_totals() {
        let r = compare_blocks(&spec(4, 12, 24), ConvFlavor::Standard, (1, 1));
        let t = r.to_text();
        assert!(t.contains("18144") && t.contains("6480") && t.contains("0.3571"));
        assert!(t.contains("(0.2500, 0.5000]"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 5 + 5 + 1);
        assert!(csv.contains("standard,total,,,18144,"));
    }

    proptest! {
        #[test]
        fn band_and_monotonicity(l in 3usize..=8, alpha in 1usize..=4, k in 1usize..=16) {
            let r = compare_blocks(&spec(l, k, alpha * k), ConvFlavor::Standard, (4, 4));
            prop_assert!(r.in_band);
            let next = compare_blocks(&spec(l + 1, k, alpha * k), ConvFlavor::Standard, (4, 4));
            prop_assert!(next.ratio < r.ratio);
            prop_assert_eq!(r.refined.macs * r.standard.params, r.standard.macs * r.refined.params);
        }
    }
}
