//! Dense residual networks on a small reverse-mode autodiff core.
//!
//! The crate provides tensors and kernels ([`tensor`], [`kernels`]), a tape
//! ([`autograd`]), network blocks ([`nn`]), CTC ([`ctc`]), an analytic cost
//! model ([`cost`]), data loading ([`data`]), training ([`train`]) and
//! config-driven runs ([`config`], [`session`]).

pub mod autograd;
pub mod config;
pub mod cost;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod session;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use config::{RunConfig, Task};
pub use ctc::{AlphabetSpec, LabelSeq};
pub use error::{Error, Result};
pub use kernels::{BatchNormConfig, ConvGeometry, Mode};
pub use nn::{Drn, DrnConfig};
pub use params::{ParamStore, Parameter};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
