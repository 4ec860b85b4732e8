//! Feature-space outlier synthesis for out-of-distribution detection,
//! together with the small trainable transformer, losses, scorers and
//! metrics needed to train and evaluate it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

// `!(x >= 0.0)` is used deliberately so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod grod;
pub mod loss;
pub mod metrics;
pub mod numerics;
pub mod postprocess;
pub mod projections;
pub mod scalar;
pub mod synthdata;
pub mod transformer;

pub use error::{GrodError, Result};
pub use scalar::Scalar;

pub type Model = transformer::TransformerModel<f64>;
pub type Batch = dataset::FeatureBatch<f64>;
pub type State = grod::GrodState<f64>;
pub type Matrix = numerics::RealMatrix<f64>;
pub type Vector = numerics::RealVector<f64>;
pub mod harness;
