//! Differentiable TV/TGV inpainting of dense flow fields.
//!
//! Core math is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod confidence;
pub mod defaults;
pub mod diffops;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod matching;
mod par;
pub mod pyramid;
pub mod quadfit;
pub mod scalar;
pub mod tgv;
pub mod tv;

pub use checkpoint::{CheckpointMode, CheckpointStore};
pub use error::{Error, Result};
pub use gradcheck::Model;
pub use grid::{ConfidenceMap, DiffusionTensor, FeatureMap, Field, FlowField, ScalarMap};
pub use pyramid::PyramidConfig;
pub use scalar::Real;
pub use tv::{Precision, SolverConfig};

pub type Field64 = Field<f64>;
pub type Field32 = Field<f32>;
pub type Flow64 = FlowField<f64>;
pub type Flow32 = FlowField<f32>;
pub type Confidence64 = ConfidenceMap<f64>;
pub type Tensor64 = DiffusionTensor<f64>;
