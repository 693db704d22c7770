//! Desk-scale vision-language toolkit for aerial imagery.
//!
//! The crate trains a miniature dual-encoder (patch-transformer vision
//! tower, token-transformer text tower) with a pairwise sigmoid
//! contrastive loss, evaluates it with zero-shot retrieval and
//! classification, localizes free-text queries inside images via
//! smoothed per-patch similarity maps, and refines the model on its own
//! thresholded pseudo-labels.
//!
//! Numeric code is generic over the scalar type: `f32` is the production
//! precision, `f64` exists so gradient oracles can run finite differences
//! below `f32` noise. The `*32` aliases at the crate root are the types
//! the rest of the pipeline uses.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod localize;
pub mod model;
pub mod refine;
pub mod scalar;
pub mod seeding;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Production-precision model parameters.
pub type ModelParams32 = model::params::ModelParams<f32>;

/// Production-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor for gradient oracles.
pub type Tensor64 = tensor::Tensor<f64>;
/// Production-precision autodiff tape.
pub type Tape32 = tape::Tape<f32>;
/// Double-precision autodiff tape for gradient oracles.
pub type Tape64 = tape::Tape<f64>;
