//! Caption-conditioned variational depth prior for monocular depth estimation.
//!
//! A caption is mapped to a Gaussian latent distribution over plausible metric
//! depth maps; an image-conditional sampler then picks one latent per image
//! patch, and a convolutional decoder turns the latent grid into depth.

// `!(x > 0.0)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depthdec;
pub mod diffcore;
pub mod error;
pub mod imagecond;
pub mod model;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod scenegen;
pub mod textprior;
pub mod trainer;

pub use diffcore::{Array, Graph};
pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

pub type Array32 = Array<f32>;
pub type Array64 = Array<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type Model32 = model::Model<f32>;
pub use trainer::Trainer32;
