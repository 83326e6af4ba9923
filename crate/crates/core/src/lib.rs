//! Multi-domain convolutional network toolkit.
//!
//! A single convolutional trunk (the *universal* parameters) is shared across
//! many image-classification domains; each domain owns only a small set of
//! residual adapter matrices, its batch-norm statistics, and a classifier
//! head. The crate provides:
//!
//! - a self-contained tensor / autodiff-free backprop core (`tensor`, `ops`),
//! - series and parallel 1x1 residual adapters with exact filter fusion
//!   (`adapters`),
//! - the multi-domain residual network itself (`network`),
//! - joint cross-domain low-rank compression of adapter banks via SVD
//!   (`compression`),
//! - bit-exact serialization and deterministic synthetic datasets (`io`),
//! - training/evaluation loops with per-domain regularization (`trainer`),
//! - a command-line front end (`cli`, exposed through the `mdnet` binary).
//!
//! Everything is deterministic given a seed: the random generator is a
//! counter-based 64-bit mixer (`rng`), datasets are generated with a fixed
//! draw order, and training is single-threaded with a fixed batch order.

pub mod adapters;
pub mod cli;
pub mod compression;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod network;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{MdError, Result};
pub use tensor::{Dtype, FilterBank, Scalar, Tensor};
