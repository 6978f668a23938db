//! Per-PII sample expansion and grouped train/test splitting.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conversation::{render, Dialogue, Role, Turn};
use crate::pii::{PiiDetector, PiiSpan};
use crate::{Error, Result};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.9;

/// One training sample anchored on a single PII span of an assistant answer.
///
/// `history` holds the turns before the answer; the answer itself is split
/// into `answer_prefix` (kept in the prompt) and `target_original`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedSample {
    pub dialogue_id: String,
    /// Index of the assistant turn within the dialogue.
    pub turn_index: usize,
    pub history: Vec<Turn>,
    pub answer_prefix: String,
    pub prompt_context: String,
    pub target_original: String,
    /// Span offsets are characters relative to the whole assistant answer.
    pub pii_span: PiiSpan,
}

impl ExpandedSample {
    /// Stable identifier: dialogue id, assistant turn and span start.
    pub fn sample_id(&self) -> String {
        format!("{}#{}:{}", self.dialogue_id, self.turn_index, self.pii_span.start)
    }

    /// The system prompt of the dialogue.
    pub fn system(&self) -> &str {
        self.history
            .first()
            .filter(|t| t.role == Role::System)
            .map(|t| t.content.as_str())
            .unwrap_or("")
    }
}

/// Byte offset of the start of the whitespace-delimited word containing
/// `byte_offset`.
pub fn word_boundary(text: &str, byte_offset: usize) -> usize {
    text[..byte_offset]
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0)
}

/// Prompt text for `history` followed by a partial assistant answer.
pub fn prompt_with_prefix(history: &[Turn], answer_prefix: &str) -> String {
    let mut turns = history.to_vec();
    turns.push(Turn::new(Role::Assistant, answer_prefix));
    render(&turns)
}

/// One sample per detected span in the assistant turns of `dialogue`.
pub fn expand(dialogue: &Dialogue, detector: &PiiDetector) -> Vec<ExpandedSample> {
    let mut out = Vec::new();
    for (idx, turn) in dialogue.turns.iter().enumerate() {
        if turn.role != Role::Assistant {
            continue;
        }
        let history = &dialogue.turns[..idx];
        for span in detector.detect(&turn.content) {
            let b = word_boundary(&turn.content, span.byte_start);
            let (prefix, target) = turn.content.split_at(b);
            out.push(ExpandedSample {
                dialogue_id: dialogue.id.clone(),
                turn_index: idx,
                history: history.to_vec(),
                answer_prefix: prefix.to_string(),
                prompt_context: prompt_with_prefix(history, prefix),
                target_original: target.to_string(),
                pii_span: span,
            });
        }
    }
    out
}

pub fn expand_all(dialogues: &[Dialogue], detector: &PiiDetector) -> Vec<ExpandedSample> {
    dialogues.iter().flat_map(|d| expand(d, detector)).collect()
}

/// Partitions distinct dialogue ids into `(train, test)`.
///
/// Ids are sorted, shuffled with a seeded ChaCha8 generator, and the first
/// `round(ratio * n)` go to train.
pub fn split_ids<'a, I>(ids: I, ratio: f64, seed: u64) -> Result<(BTreeSet<String>, BTreeSet<String>)>
where
    I: IntoIterator<Item = &'a str>,
{
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let unique: BTreeSet<&str> = ids.into_iter().collect();
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ids.len() as f64).round() as usize).min(ids.len());
    let train = ids[..n_train].iter().map(|s| s.to_string()).collect();
    let test = ids[n_train..].iter().map(|s| s.to_string()).collect();
    Ok((train, test))
}

/// Splits samples so that every dialogue lands entirely on one side.
pub fn split(
    samples: Vec<ExpandedSample>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ExpandedSample>, Vec<ExpandedSample>)> {
    let (train_ids, _) = split_ids(samples.iter().map(|s| s.dialogue_id.as_str()), ratio, seed)?;
    Ok(samples
        .into_iter()
        .partition(|s| train_ids.contains(&s.dialogue_id)))
}
