//! Declarative block and model configurations.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::kernels::{BatchNormConfig, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvFlavor {
    Standard,
    DepthwiseSeparable,
}

impl fmt::Display for ConvFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvFlavor::Standard => "standard",
            ConvFlavor::DepthwiseSeparable => "depthwise_separable",
        })
    }
}

impl FromStr for ConvFlavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ConvFlavor::Standard),
            "depthwise_separable" | "dwsep" => Ok(ConvFlavor::DepthwiseSeparable),
            other => Err(Error::Parse(format!(
                "unknown conv flavor `{other}` (expected standard or depthwise_separable)"
            ))),
        }
    }
}

/// One BN → ReLU → convolution group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGroupSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub flavor: ConvFlavor,
}

impl ConvGroupSpec {
    /// Square kernel, unit stride, "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, flavor: ConvFlavor) -> Self {
        ConvGroupSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
            flavor,
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.padding)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
        ];
        if extents.contains(&0) {
            return Err(config_err(format!("conv group needs positive extents: {self:?}")));
        }
        if self.padding.0 >= self.kernel.0 || self.padding.1 >= self.kernel.1 {
            return Err(config_err(format!(
                "padding {:?} must be smaller than kernel {:?}",
                self.padding, self.kernel
            )));
        }
        Ok(())
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.geometry().output_extent(h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    /// Layer i sees the concatenation of the input and every earlier layer.
    Concat,
    /// Layer i > 1 sees the elementwise sum of the earlier layer outputs.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockSpec {
    /// Number of inner layers, `L`.
    pub layers: usize,
    /// Growth rate `k`: output channels of each inner layer.
    pub growth: usize,
    /// Block input channels `c0`.
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub combine: Combine,
    pub flavor: ConvFlavor,
    /// Also add the block input into the running sums of a [`Combine::Sum`]
    /// block. Needs `c0 == k`.
    pub include_input_in_sum: bool,
}

impl DenseBlockSpec {
    pub fn new(layers: usize, growth: usize, in_channels: usize, combine: Combine) -> Self {
        DenseBlockSpec {
            layers,
            growth,
            in_channels,
            kernel: (3, 3),
            combine,
            flavor: ConvFlavor::DepthwiseSeparable,
            include_input_in_sum: false,
        }
    }

    pub fn with_flavor(mut self, flavor: ConvFlavor) -> Self {
        self.flavor = flavor;
        self
    }

    pub fn with_combine(mut self, combine: Combine) -> Self {
        self.combine = combine;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.growth == 0 || self.in_channels == 0 {
            return Err(config_err(format!(
                "dense block needs L ≥ 1, k ≥ 1, c0 ≥ 1 (got L={}, k={}, c0={})",
                self.layers, self.growth, self.in_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return Err(config_err(format!(
                "inner kernel {:?} must be odd and positive",
                self.kernel
            )));
        }
        if self.include_input_in_sum && (self.combine != Combine::Sum || self.in_channels != self.growth) {
            return Err(config_err(
                "include_input_in_sum needs a sum-combined block with c0 == k",
            ));
        }
        Ok(())
    }

    /// `c0 + L·k`.
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers * self.growth
    }

    /// Input channels of inner layer `i` (zero-based).
    pub fn layer_in_channels(&self, i: usize) -> usize {
        match self.combine {
            Combine::Concat => self.in_channels + i * self.growth,
            Combine::Sum if i == 0 => self.in_channels,
            Combine::Sum => self.growth,
        }
    }

    pub fn layer_spec(&self, i: usize) -> ConvGroupSpec {
        ConvGroupSpec {
            in_channels: self.layer_in_channels(i),
            out_channels: self.growth,
            kernel: self.kernel,
            stride: (1, 1),
            padding: (self.kernel.0 / 2, self.kernel.1 / 2),
            flavor: self.flavor,
        }
    }
}

/// Refined dense block, 1×1 fusion back to `c0` channels, residual add.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RrdbSpec {
    pub dense: DenseBlockSpec,
}

impl RrdbSpec {
    pub fn new(layers: usize, growth: usize, channels: usize) -> Self {
        RrdbSpec {
            dense: DenseBlockSpec::new(layers, growth, channels, Combine::Sum),
        }
    }

    pub fn channels(&self) -> usize {
        self.dense.in_channels
    }

    pub fn fusion_in_channels(&self) -> usize {
        self.dense.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.dense.validate()?;
        if self.dense.combine != Combine::Sum {
            return Err(config_err("r-RDB needs a sum-combined dense block"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GdbSpec {
    pub shallow: ConvGroupSpec,
    pub blocks: usize,
    pub rrdb: RrdbSpec,
}

impl GdbSpec {
    pub fn validate(&self) -> Result<()> {
        self.shallow.validate()?;
        self.rrdb.validate()?;
        if self.shallow.kernel != (5, 5) {
            return Err(config_err(format!(
                "shallow extraction uses a 5×5 kernel, got {:?}",
                self.shallow.kernel
            )));
        }
        if self.blocks == 0 {
            return Err(config_err("the global dense block needs at least one r-RDB"));
        }
        if self.rrdb.channels() != self.shallow.out_channels {
            return Err(config_err(format!(
                "r-RDB channels {} differ from shallow output channels {}",
                self.rrdb.channels(),
                self.shallow.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownsampleSpec {
    pub layers: [ConvGroupSpec; 2],
}

impl DownsampleSpec {
    /// Two 3×3 groups, padding 1, each doubling the channel count.
    pub fn doubling(in_channels: usize, strides: [(usize, usize); 2], flavor: ConvFlavor) -> Self {
        let first = ConvGroupSpec::same(in_channels, 2 * in_channels, 3, flavor).with_stride(strides[0]);
        let second = ConvGroupSpec::same(2 * in_channels, 4 * in_channels, 3, flavor).with_stride(strides[1]);
        DownsampleSpec {
            layers: [first, second],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers[1].out_channels
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        let mut c = in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if l.in_channels != c {
                return Err(config_err(format!(
                    "down-sampling layer {i} expects {} channels but receives {c}",
                    l.in_channels
                )));
            }
            if l.out_channels < l.in_channels {
                return Err(config_err(format!("down-sampling layer {i} narrows channels")));
            }
            if l.stride.0.max(l.stride.1) < 2 {
                return Err(config_err(format!("down-sampling layer {i} needs a stride-2 axis")));
            }
            c = l.out_channels;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Classify {
        classes: usize,
    },
    /// Per-column frames; `alphabet` counts the blank.
    Sequence {
        alphabet: usize,
        max_label_len: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    /// After shallow feature extraction.
    pub shallow: f64,
    /// After the down-sampling block.
    pub down: f64,
    /// After the fully-connected head.
    pub head: f64,
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        shallow: 0.0,
        down: 0.0,
        head: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrnConfig {
    /// Input height and width; images have one channel.
    pub input: (usize, usize),
    pub gdb: GdbSpec,
    pub down: DownsampleSpec,
    pub head: Head,
    pub dropout: DropoutRates,
    pub batch_norm: BatchNormConfig,
}

/// Spatial geometry after each stage for a given input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub shallow: (usize, usize, usize),
    pub down: (usize, usize, usize),
}

impl DrnConfig {
    /// Small classifier for 28×28 digits: 16-channel shallow layer, three
    /// r-RDBs of four layers with growth 12.
    pub fn mnist_desk() -> Self {
        let c0 = 16;
        DrnConfig {
            input: (28, 28),
            gdb: GdbSpec {
                shallow: ConvGroupSpec::same(1, c0, 5, ConvFlavor::Standard),
                blocks: 3,
                rrdb: RrdbSpec::new(4, 12, c0),
            },
            down: DownsampleSpec::doubling(c0, [(2, 2), (2, 2)], ConvFlavor::DepthwiseSeparable),
            head: Head::Classify { classes: 10 },
            dropout: DropoutRates {
                shallow: 0.5,
                down: 0.5,
                head: 0.7,
            },
            batch_norm: BatchNormConfig::default(),
        }
    }

    /// Digit-string transcriber for 32×160 canvases: 40 frames of 11 classes.
    pub fn sequence_desk() -> Self {
        let c0 = 16;
        DrnConfig {
            input: (32, 160),
            gdb: GdbSpec {
                shallow: ConvGroupSpec::same(1, c0, 5, ConvFlavor::Standard).with_stride((2, 2)),
                blocks: 3,
                rrdb: RrdbSpec::new(4, 12, c0),
            },
            down: DownsampleSpec::doubling(c0, [(2, 2), (2, 1)], ConvFlavor::DepthwiseSeparable),
            head: Head::Sequence {
                alphabet: 11,
                max_label_len: 5,
            },
            dropout: DropoutRates {
                shallow: 0.0,
                down: 0.2,
                head: 0.0,
            },
            batch_norm: BatchNormConfig::default(),
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let (h, w) = self.input;
        if h == 0 || w == 0 {
            return Err(config_err("input geometry must be positive"));
        }
        let (sh, sw) = self.gdb.shallow.output_extent(h, w)?;
        let (h1, w1) = self.down.layers[0].output_extent(sh, sw)?;
        let (h2, w2) = self.down.layers[1].output_extent(h1, w1)?;
        Ok(Geometry {
            shallow: (self.gdb.shallow.out_channels, sh, sw),
            down: (self.down.out_channels(), h2, w2),
        })
    }

    /// Input width of the fully-connected head.
    pub fn head_in_features(&self) -> Result<usize> {
        let (c, h, w) = self.geometry()?.down;
        Ok(match self.head {
            Head::Classify { .. } => c * h * w,
            Head::Sequence { .. } => c * h,
        })
    }

    pub fn head_out_features(&self) -> usize {
        match self.head {
            Head::Classify { classes } => classes,
            Head::Sequence { alphabet, .. } => alphabet,
        }
    }

    /// Frames produced per sample by a sequence head.
    pub fn frames(&self) -> Result<usize> {
        Ok(self.geometry()?.down.2)
    }

    pub fn validate(&self) -> Result<()> {
        self.gdb.validate()?;
        self.down.validate(self.gdb.shallow.out_channels)?;
        if self.gdb.shallow.in_channels != 1 {
            return Err(config_err("images have a single channel"));
        }
        for (site, rate) in [
            ("shallow", self.dropout.shallow),
            ("down", self.dropout.down),
            ("head", self.dropout.head),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(config_err(format!(
                    "dropout rate at {site} must lie in [0, 1), got {rate}"
                )));
            }
        }
        let frames = self.frames()?;
        match self.head {
            Head::Classify { classes } if classes < 2 => Err(config_err("a classifier needs at least 2 classes")),
            Head::Sequence { alphabet, .. } if alphabet < 2 => {
                Err(config_err("the alphabet needs the blank and at least one symbol"))
            }
            Head::Sequence { max_label_len, .. } if frames < 2 * max_label_len + 1 => Err(config_err(format!(
                "{frames} frames cannot carry labels of length {max_label_len} (need {})",
                2 * max_label_len + 1
            ))),
            _ => Ok(()),
        }
    }
}
