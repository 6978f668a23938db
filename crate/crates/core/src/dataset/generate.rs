//! Candidate answers from external models, one request per recipe.
//!
//! Every recipe adds [`GENERATION_SYSTEM_ADDITION`] to the system prompt and
//! samples at [`GENERATION_TEMPERATURE`]:
//!
//! | recipe              | route      | user nudge | answer prefix            |
//! |---------------------|------------|------------|--------------------------|
//! | `completion-system` | completion | no         | continued from prompt    |
//! | `completion-nudge`  | completion | yes        | continued from prompt    |
//! | `chat-nudge`        | chat       | yes        | not given                |
//! | `chat-prefix`       | chat       | yes        | requested, then stripped |

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conversation::{render, Role, Turn};
use super::expand::ExpandedSample;
use crate::api::{ApiClient, ChatMessage};
use crate::prompts::{append_to_system, GENERATION_SYSTEM_ADDITION, GENERATION_TEMPERATURE, USER_NUDGE};
use crate::{Error, Result};

pub const DEFAULT_COMPLETION_MODEL: &str = "meta-llama/Meta-Llama-3-8B-Instruct";
pub const DEFAULT_CHAT_MODEL: &str = "gpt-4o-mini";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    CompletionSystem,
    CompletionNudge,
    ChatNudge,
    ChatPrefix,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [
        Recipe::CompletionSystem,
        Recipe::CompletionNudge,
        Recipe::ChatNudge,
        Recipe::ChatPrefix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::CompletionSystem => "completion-system",
            Recipe::CompletionNudge => "completion-nudge",
            Recipe::ChatNudge => "chat-nudge",
            Recipe::ChatPrefix => "chat-prefix",
        }
    }

    pub fn is_chat(self) -> bool {
        matches!(self, Recipe::ChatNudge | Recipe::ChatPrefix)
    }

    fn nudges(self) -> bool {
        self != Recipe::CompletionSystem
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub completion_model: String,
    pub chat_model: String,
    pub temperature: f64,
    pub candidates_per_recipe: usize,
    pub recipes: Vec<Recipe>,
    /// Maximum number of in-flight requests.
    pub workers: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            completion_model: DEFAULT_COMPLETION_MODEL.into(),
            chat_model: DEFAULT_CHAT_MODEL.into(),
            temperature: GENERATION_TEMPERATURE,
            candidates_per_recipe: 1,
            recipes: Recipe::ALL.to_vec(),
            workers: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn model_for(&self, recipe: Recipe) -> &str {
        if recipe.is_chat() {
            &self.chat_model
        } else {
            &self.completion_model
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerationRequest {
    Completion { model: String, prompt: String },
    Chat { model: String, messages: Vec<ChatMessage> },
}

/// Anything that can serve the two request shapes; implemented by
/// [`ApiClient`] and by test doubles.
pub trait TextGenerator: Sync {
    fn complete(&self, model: &str, prompt: &str, temperature: f64) -> Result<String>;
    fn chat(&self, model: &str, messages: &[ChatMessage], temperature: f64) -> Result<String>;
}

impl TextGenerator for ApiClient {
    fn complete(&self, model: &str, prompt: &str, temperature: f64) -> Result<String> {
        ApiClient::complete(self, model, prompt, temperature)
    }

    fn chat(&self, model: &str, messages: &[ChatMessage], temperature: f64) -> Result<String> {
        ApiClient::chat(self, model, messages, temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub sample_id: String,
    pub recipe: Recipe,
    pub model: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub sample_id: String,
    pub recipe: Recipe,
    pub error: String,
}

/// Instruction appended to the last user message by `chat-prefix`.
pub fn prefix_instruction(prefix: &str) -> String {
    format!("Start your answer with exactly these words: {}", prefix.trim_end())
}

/// History turns with the generation addition and, optionally, the nudge
/// in front of the last user message.
fn adjusted_history(sample: &ExpandedSample, nudge: bool) -> Vec<Turn> {
    let mut turns = sample.history.clone();
    if let Some(system) = turns.first_mut().filter(|t| t.role == Role::System) {
        system.content = append_to_system(&system.content, GENERATION_SYSTEM_ADDITION);
    }
    if nudge {
        if let Some(user) = turns.iter_mut().rev().find(|t| t.role == Role::User) {
            user.content = format!("{USER_NUDGE} {}", user.content);
        }
    }
    turns
}

pub fn build_request(sample: &ExpandedSample, recipe: Recipe, cfg: &GenerationConfig) -> GenerationRequest {
    let model = cfg.model_for(recipe).to_string();
    let mut turns = adjusted_history(sample, recipe.nudges());
    if !recipe.is_chat() {
        turns.push(Turn::new(Role::Assistant, sample.answer_prefix.as_str()));
        return GenerationRequest::Completion {
            model,
            prompt: render(&turns),
        };
    }
    if recipe == Recipe::ChatPrefix && !sample.answer_prefix.trim().is_empty() {
        if let Some(user) = turns.iter_mut().rev().find(|t| t.role == Role::User) {
            user.content = format!("{}\n\n{}", user.content, prefix_instruction(&sample.answer_prefix));
        }
    }
    let messages = turns
        .iter()
        .map(|t| ChatMessage::new(t.role.label().to_ascii_lowercase(), t.content.as_str()))
        .collect();
    GenerationRequest::Chat { model, messages }
}

/// Cleans a raw model reply into the continuation of `answer_prefix`.
///
/// Completions are cut at the next role header. `chat-prefix` replies have
/// the requested prefix removed when the model echoed it.
pub fn postprocess(sample: &ExpandedSample, recipe: Recipe, raw: &str) -> String {
    let mut text = raw;
    if !recipe.is_chat() {
        for header in ["\nUser:", "\nSystem:", "\nAssistant:"] {
            if let Some(i) = text.find(header) {
                text = &text[..i];
            }
        }
    }
    if recipe == Recipe::ChatPrefix {
        let prefix = sample.answer_prefix.trim();
        if !prefix.is_empty() {
            if let Some(rest) = text.trim_start().strip_prefix(prefix) {
                text = rest;
            }
        }
    }
    text.trim().to_string()
}

fn run_one(
    sample: &ExpandedSample,
    recipe: Recipe,
    generator: &dyn TextGenerator,
    cfg: &GenerationConfig,
) -> std::result::Result<Candidate, GenerationFailure> {
    let reply = match build_request(sample, recipe, cfg) {
        GenerationRequest::Completion { model, prompt } => generator.complete(&model, &prompt, cfg.temperature),
        GenerationRequest::Chat { model, messages } => generator.chat(&model, &messages, cfg.temperature),
    };
    match reply {
        Ok(raw) => Ok(Candidate {
            sample_id: sample.sample_id(),
            recipe,
            model: cfg.model_for(recipe).to_string(),
            text: postprocess(sample, recipe, &raw),
        }),
        Err(e) => {
            log::warn!("{} / {recipe}: {e}", sample.sample_id());
            Err(GenerationFailure {
                sample_id: sample.sample_id(),
                recipe,
                error: e.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationOutcome {
    pub candidates: Vec<Candidate>,
    pub failures: Vec<GenerationFailure>,
}

impl GenerationOutcome {
    pub fn requests(&self) -> usize {
        self.candidates.len() + self.failures.len()
    }
}

/// Candidates for a single sample, in recipe order.
pub fn generate_candidates(
    sample: &ExpandedSample,
    generator: &dyn TextGenerator,
    cfg: &GenerationConfig,
) -> GenerationOutcome {
    let mut out = GenerationOutcome::default();
    for &recipe in &cfg.recipes {
        for _ in 0..cfg.candidates_per_recipe {
            match run_one(sample, recipe, generator, cfg) {
                Ok(c) => out.candidates.push(c),
                Err(f) => out.failures.push(f),
            }
        }
    }
    out
}

/// Generates for every sample with at most `cfg.workers` requests in
/// flight. Output order follows the input order.
pub fn generate_all(
    samples: &[ExpandedSample],
    generator: &dyn TextGenerator,
    cfg: &GenerationConfig,
) -> Result<GenerationOutcome> {
    cfg.validate()?;
    let jobs: Vec<(usize, Recipe)> = (0..samples.len())
        .flat_map(|i| {
            cfg.recipes
                .iter()
                .flat_map(move |&r| std::iter::repeat_n((i, r), cfg.candidates_per_recipe))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| run_one(&samples[i], r, generator, cfg))
            .collect()
    });
    let mut out = GenerationOutcome::default();
    for r in results {
        match r {
            Ok(c) => out.candidates.push(c),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

/// Previously generated candidates keyed by sample id, for offline runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateCache {
    by_sample: BTreeMap<String, Vec<Candidate>>,
}

impl CandidateCache {
    pub fn from_candidates(candidates: impl IntoIterator<Item = Candidate>) -> Self {
        let mut by_sample: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
        for c in candidates {
            by_sample.entry(c.sample_id.clone()).or_default().push(c);
        }
        Self { by_sample }
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut all = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::parse(Some(i + 1), e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let c: Candidate =
                serde_json::from_str(&line).map_err(|e| Error::parse(Some(i + 1), e.to_string()))?;
            all.push(c);
        }
        Ok(Self::from_candidates(all))
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for c in self.by_sample.values().flatten() {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&[Candidate]> {
        self.by_sample.get(sample_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_sample.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_sample.is_empty()
    }
}
