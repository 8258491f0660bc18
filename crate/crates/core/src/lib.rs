//! Self-improvement fine-tuning for sequence generation.
//!
//! A fine-tuned model decodes its own training sources with beam search; the
//! hypothesis closest to the reference (smoothed BLEU for summarization,
//! CodeBLEU for generation) replaces the reference, and the model is
//! fine-tuned again on that pseudo dataset at a tenth of the learning rate.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod minilang;
pub mod model;
pub mod selfimprove;

pub use error::{Error, Result};
