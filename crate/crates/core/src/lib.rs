//! Self-supervised representation learning for photoplethysmography.
//!
//! Two stages: a learnable motif-based distance trained by masked
//! cross-attention reconstruction ([`distance`]), then relative contrastive
//! pre-training of a 1-D residual encoder ([`encoder`], [`relcon`],
//! [`pipeline`]). [`eval`] hosts the downstream linear-probe, fine-tuning and
//! naive-baseline harness, and [`synth`] generates the synthetic corpora used
//! throughout the tests.

pub mod dataset;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod relcon;
pub mod signal;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
