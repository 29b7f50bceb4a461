//! Energy-based training of predictive-coding networks.
//!
//! A network holds one value node per layer block. Inference relaxes the
//! value nodes to minimize a precision-weighted squared prediction error,
//! learning then updates the weights from the relaxed state. The crate
//! provides:
//!
//! - [`tensor`] — dense row-major tensors with the handful of ops the
//!   models need (GEMM, conv, pooling) and their exact adjoints
//! - [`layers`] — dense and conv+pool blocks, the activation menu, and a
//!   batch-norm variant whose running statistics can be frozen during
//!   inference
//! - [`pcgraph`] — per-batch activities/predictions/errors, the energy,
//!   and the uniform/spiking/decaying precision schedules
//! - [`inference`] — the relaxation loop (momentum gradient descent on
//!   activities with per-step precisions)
//! - [`learning`] — standard and forward weight updates, AdamW, and the
//!   warmup-cosine learning-rate schedule
//! - [`bpref`] — an exact reverse-mode baseline over the same networks,
//!   with per-layer squared-error traces
//! - [`dataio`] — MNIST/CIFAR-10 ingestion, normalization, augmentation,
//!   seeded batching
//! - [`checkpoint`] — a named-tensor container format with bit-exact
//!   round-trips

pub mod bpref;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod inference;
pub mod layers;
pub mod learning;
pub mod pcgraph;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Rng, Tensor};

/// Relative tolerance for finite-difference checks of op adjoints.
#[cfg(not(feature = "f64"))]
pub const FD_RTOL: f64 = 1e-4;
#[cfg(feature = "f64")]
pub const FD_RTOL: f64 = 1e-7;

/// Failure threshold for full-network gradient checks.
#[cfg(not(feature = "f64"))]
pub const GRADCHECK_RTOL: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const GRADCHECK_RTOL: f64 = 1e-6;
