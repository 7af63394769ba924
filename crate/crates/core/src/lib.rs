//! Two-branch few-shot classification head over precomputed embeddings.
//!
//! A query embedding is scored against two caches:
//!
//! * a **textual cache** of class-text embeddings, shifted per query by a
//!   bias vector produced by a small gated recurrent network
//!   ([`conditionnet`]) and re-normalized;
//! * a **visual cache** of labeled support embeddings with zero-initialized
//!   learnable biases, read out through a one-hot label matrix.
//!
//! The two score vectors are mixed as `scale * (alpha * f1 + beta * f2)` and
//! trained with softmax cross-entropy ([`model`], [`trainer`]). All gradients
//! are hand-derived and checked against central finite differences.

pub mod caches;
pub mod conditionnet;
pub mod dataio;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
