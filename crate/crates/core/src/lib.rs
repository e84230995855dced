//! Second-order weight pruning with a block-diagonal inverse empirical
//! Fisher, gradual sparsity schedules, and a desk-scale compound compression
//! pipeline (layer dropping, pruning, fake quantization).
//!
//! Numeric code is generic over [`Scalar`]; concrete aliases below cover the
//! common instantiations.

pub mod error;
pub mod fisher;
pub mod harness;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod pruner;
pub mod recipe;
pub mod report;
pub mod saliency;
pub mod scalar;
pub mod store;

pub use error::{Error, Result};
pub use fisher::{FisherInverse, GradientSample};
pub use saliency::{GroupSpec, SaliencyReport};
pub use scalar::Scalar;
pub use store::{Layout, Mask, Segment};

/// Double-double scalar used by the reference oracles.
pub type Extended = twofloat::TwoFloat;

pub type FisherInverse64 = FisherInverse<f64>;
pub type FisherInverseExt = FisherInverse<Extended>;

pub type ToyModel32 = harness::ToyModel<f32>;
pub type ToyModel64 = harness::ToyModel<f64>;
