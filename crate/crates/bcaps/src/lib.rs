//! B-Caps: a variational capsule encoder and baseline VAE on a minimal
//! reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//! - [`tensor`] / [`graph`]: dense tensors and the reverse-mode tape.
//! - [`kernels`]: the flop-heavy inner loops, with rayon twins behind the
//!   `parallel` feature (on by default; sequential forms always compiled).
//! - [`capsules`]: fully connected capsule layers, dynamic routing, squash,
//!   capsule norms, and batch normalization.
//! - [`models`]: the B-Caps encoder, baseline VAE encoder, shared decoder,
//!   sampling strategies, and losses.
//! - [`optim`] / [`train`] / [`checkpoint`]: Adam, the training loop, and
//!   binary checkpoints.
//! - [`dataio`] / [`metrics`] / [`classifier`]: IDX parsing, PGM/CSV output,
//!   reconstruction and classification metrics.

pub mod capsules;
pub mod checkpoint;
pub mod classifier;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
