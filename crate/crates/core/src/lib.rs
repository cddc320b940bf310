//! Layer, batch and weight normalization built on a small reverse-mode
//! autodiff engine, together with layer-normalized recurrent cells, an
//! executable invariance table for the three normalizers, and Fisher
//! information geometry for normalized generalized linear models.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the element type to `f64`, which is what the
//! experiments and the geometry checks use.

// `!(x > 0.0)` style guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod init;
pub mod invariance;
pub mod normalizers;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Activation, ReduceKind};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use normalizers::{NormKind, NormScheme, VarianceEstimator};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, Parameter};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Var<'g> = autodiff::Var<'g, f64>;
pub type Gradients = autodiff::Gradients<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type NormStats = normalizers::NormStats<f64>;
pub type AffineParams = normalizers::AffineParams<f64>;
