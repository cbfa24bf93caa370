//! Semi-supervised caption-model training toolkit.
//!
//! A prefix-mapping caption model is trained in two stages: cross-entropy on
//! a small labeled split, then label-free refinement that maximizes the
//! cosine similarity between image and generated-caption embeddings in a
//! frozen joint-embedding space, made differentiable with Gumbel-Softmax
//! decoding. Evaluation reports a reference-relative embedding score and
//! BLEU@4.

pub mod autodiff;
pub mod backend;
pub mod captioner;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gumbel;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
