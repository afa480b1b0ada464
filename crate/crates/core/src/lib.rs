//! Generative-model-based semantic image transmission at desk scale.
//!
//! Images are inverted to disentangled latent codes by a trained generator,
//! optionally privacy-filtered against a knowledge base, mapped through an
//! affine-coupling normalizing flow, sent over a noisy channel by a learned
//! codec, and reconstructed by the same generator.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod commands;
pub mod config;
pub mod error;
pub mod flow;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod privacy;
pub mod scene;

pub use error::{Error, Result};
