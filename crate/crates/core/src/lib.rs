//! Tooling for retaining-dataset-free LLM unlearning of personal data.
//!
//! The crate is organised around the pieces of the pipeline:
//!
//! - [`guidance`]: classifier-free guidance score transforms (log-space and
//!   probability-space) and next-token selection.
//! - [`lm`]: the language-model interface and a deterministic tabular toy
//!   model used for desk-scale experiments.
//! - [`decoder`]: the guided autoregressive generation loop.
//! - [`model_arith`]: task-vector extraction and forgetting via negation over
//!   safetensors checkpoints.
//! - [`pii`]: a deterministic gazetteer/regex PII detector with an
//!   OntoNotes-style label taxonomy.
//! - [`api`]: a retrying client for OpenAI-compatible HTTP endpoints.
//! - [`dataset`]: conversation parsing, per-PII sample expansion, grouped
//!   splits, candidate generation and preference-triple construction.
//! - [`orpo`]: the odds-ratio preference objective as a calculator.
//! - [`eval`]: PII-leakage and judge-based evaluation drivers.

pub mod api;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod lm;
pub mod model_arith;
pub mod orpo;
pub mod pii;
pub mod prompts;

#[cfg(feature = "test-util")]
pub mod mock_http;

pub use error::{Error, Result};
