//! Part-based face vision transformers.
//!
//! A `no_std` (plus `alloc`) numeric core: a reverse-mode autodiff engine,
//! the holistic and landmark-driven transformers, the CosFace objective,
//! optimization, augmentation, synthetic data and evaluation metrics.

#![no_std]
// `!(x > 0.0)` is the NaN-rejecting form throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod cosface;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Graph, Var};
pub use config::{ModelConfig, PosEncoding, Preset, Variant};
pub use error::{Error, Result};
pub use model::{FaceModel, ForwardOutput};
pub use params::{Bound, DecayGroup, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
pub use vit::Mode;
