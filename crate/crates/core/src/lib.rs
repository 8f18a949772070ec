//! Dynamical model embeddings.
//!
//! A population of trained recurrent (or residual feed-forward) networks is
//! summarized by a single meta-model conditioned on a low-dimensional
//! embedding vector per network. Jointly training the meta-model, the
//! per-network state maps and the embeddings yields a model embedding space
//! that can be clustered, averaged over, extrapolated in and searched for
//! better models, and whose dynamics can be probed with fixed-point analysis.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atlas;
pub mod dynamics;
pub mod error;
pub mod models;
pub mod numgrad;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
