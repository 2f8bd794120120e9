//! Dataset-aware mixture-of-experts routing: gating, capacity-limited
//! dispatch, balancing and dataset-aware auxiliary losses, and a small
//! training harness for studying routing behaviour on synthetic mixtures.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod dispatch;
pub mod error;
pub mod gating;
pub mod harness;
pub mod losses;
pub mod mapping;
pub mod numeric;
pub mod scalar;
pub mod tokens;

pub use error::{Error, Result};
pub use mapping::MappingTable;
pub use scalar::Scalar;

pub type Matrix64 = numeric::Matrix<f64>;
pub type Graph64 = numeric::Graph<f64>;
pub type TokenBatch64 = tokens::TokenBatch<f64>;
pub type GateOutput64 = gating::GateOutput<f64>;
pub type DispatchPlan64 = dispatch::DispatchPlan<f64>;
pub type FeedForward64 = dispatch::FeedForward<f64>;
pub type Model64 = harness::Model<f64>;
pub type Mixture64 = harness::Mixture<f64>;

pub type Matrix32 = numeric::Matrix<f32>;
pub type Model32 = harness::Model<f32>;
