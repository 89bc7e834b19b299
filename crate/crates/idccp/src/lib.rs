//! Invariant deep compressible covariance pooling.
//!
//! A self-contained numerical library and training harness for D4-invariant
//! image classification: a Siamese-style equivariant convolutional backbone,
//! second-order (covariance) pooling with the trivial group projection,
//! Stiefel-manifold dimension compression trained by Riemannian SGD, and
//! Newton-Schulz matrix square-root normalization, all with manual forward
//! and backward passes verified against finite differences.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod covpool;
pub mod data;
pub mod error;
pub mod group;
pub mod isqrt;
pub mod linalg;
pub mod oracles;
pub mod pipeline;
pub mod rng;
pub mod stiefel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
