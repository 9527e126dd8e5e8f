//! Video/sentence joint embedding trained with mined hard-negative triplets,
//! and zero-shot action recognition by nearest class prototype.
//!
//! The crate is organized along the pipeline:
//!
//! - [`dataio`]: FVEC feature matrices, JSON manifests, CKPT1 checkpoints.
//! - [`netmath`]: encoder kernels with analytic gradients.
//! - [`embedder`]: the visual and sentence branches of the joint embedder.
//! - [`miner`]: hard-negative triplet construction.
//! - [`trainer`]: triplet loss, AdamW, the training loop.
//! - [`zsar`]: zero-shot classification, split protocol, reports, projection
//!   and the synthetic benchmark generator.

pub mod dataio;
pub mod embedder;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod miner;
pub mod netmath;
pub mod seed;
pub mod trainer;
pub mod zsar;

pub use error::{Error, Result};
pub use matrix::{Matrix, Real};
