//! Training neural networks inside subspaces spanned by subsets of an
//! orthonormal dictionary, and shrinking those subsets with iterative
//! magnitude pruning.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, random rotations and the 2-D DCT-II basis.
//! - [`nn`]: a small differentiable MLP/CNN over a flat parameter vector.
//! - [`data`]: CIFAR-10 binary ingestion, synthetic blobs and batching.
//! - [`dictionary`]: orthonormal dictionaries as forward/adjoint operators,
//!   subspace projection, block-diagonal and bottleneck (shared basis) forms.
//! - [`pruning`]: the sparsify step, rewind-and-retrain pruning rounds and the
//!   fixed random subspace baseline.

pub mod data;
pub mod dictionary;
mod error;
pub mod linalg;
pub mod nn;
pub mod pruning;
mod rng;

pub use error::{Error, Result};
