//! Preference-data construction from PII-bearing dialogues.

pub mod conversation;
pub mod expand;
pub mod generate;
pub mod pipeline;
pub mod triples;

pub use conversation::{parse_dialogues, render, Dialogue, RecordError, Role, Turn};
pub use expand::{expand, expand_all, split, split_ids, ExpandedSample};
pub use generate::{generate_all, generate_candidates, Candidate, CandidateCache, GenerationConfig, Recipe, TextGenerator};
pub use pipeline::{run_pipeline, write_outputs, CandidateSource, PipelineConfig, PipelineOutput};
pub use triples::{build_triples, enforce_lengths, DropRecord, LengthLimits, PreferenceTriple, TripleConfig};
