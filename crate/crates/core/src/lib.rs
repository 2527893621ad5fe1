//! Prompt-guided multimodal alignment pre-training for entity and relation
//! extraction, with a CRF tagging head and an entity-marker relation head.
//!
//! Module map:
//! - [`encoders`]: text / patch / fusion transformers and joint projections
//! - [`alignment`]: the four pre-training objectives and the batch step
//! - [`pseudo_labels`]: candidate mining, prompts, soft labels, proposal cache
//! - [`mner`]: linear-chain CRF, decoding, BIO spans and span F1
//! - [`mre`]: entity markers, relation representation, loss and metrics
//! - [`harness`]: config, readers, tokenizer, training loops, checkpoints

// Numeric kernels index several arrays in lockstep; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autograd;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod mner;
pub mod mre;
pub mod pseudo_labels;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use exec::Parallelism;
