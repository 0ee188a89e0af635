//! Bayesian logistic shape model segmentation.
//!
//! A parametric shape function turns into a per-voxel foreground prior
//! `σ(S̃/l_ref)`; combined with a Student's-t mixture appearance model, the
//! shape parameters, intensity parameters and label posteriors are estimated
//! by EM with a Gauss-Newton shape step and a Laplace posterior.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appearance;
pub mod cochlea;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod scalar;
pub mod shape;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Volume64 = volume::Volume<f64>;
pub type Grid64 = volume::Grid<f64>;
pub type Mask64 = volume::BinaryMask<f64>;
pub type Matrix64 = linalg::SquareMatrix<f64>;
pub type IntensityParams64 = appearance::IntensityParams<f64>;
pub type FitConfig64 = inference::FitConfig<f64>;
pub type FitResult64 = inference::FitResult<f64>;
pub type ShapePosterior64 = inference::ShapePosterior<f64>;
pub type CochleaShape64 = cochlea::CochleaShape<f64>;
pub type CircleShape64 = shape::CircleShape<f64>;

pub type Volume32 = volume::Volume<f32>;
pub type IntensityParams32 = appearance::IntensityParams<f32>;
pub type FitConfig32 = inference::FitConfig<f32>;
