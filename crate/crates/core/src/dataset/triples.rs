//! Preference triples, condition-sentence augmentation and length limits.

use serde::{Deserialize, Serialize};

use super::conversation::{render, with_system_suffix, Role, Turn};
use super::expand::ExpandedSample;
use super::generate::Candidate;
use crate::pii::PiiDetector;
use crate::prompts::{AVOID_PII_CONDITION, SHARE_PII_CONDITION};
use crate::{Error, Result};

pub const DEFAULT_EOS_MARKER: &str = "<|eot_id|>";
pub const DEFAULT_MAX_PROMPT: usize = 1900;
pub const DEFAULT_MAX_TOTAL: usize = 2048;

/// One `(prompt, chosen, rejected)` record.
///
/// `prompt_turns` carries the structured prompt so it can be truncated; it
/// is not part of the serialised record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub cfg_augmented: bool,
    pub system_suffix: Option<String>,
    pub dialogue_id: String,
    #[serde(skip)]
    pub prompt_turns: Vec<Turn>,
}

impl PreferenceTriple {
    /// True for the augmented triple whose roles are swapped: its chosen
    /// side carries the PII.
    pub fn is_swapped(&self) -> bool {
        self.cfg_augmented && self.system_suffix.as_deref() == Some(SHARE_PII_CONDITION)
    }

    /// Checks the PII and EOS invariants, with the orientation inverted for
    /// swapped triples.
    pub fn validate(&self, detector: &PiiDetector, eos_marker: &str) -> Result<()> {
        if !self.chosen.ends_with(eos_marker) || !self.rejected.ends_with(eos_marker) {
            return Err(Error::invalid("chosen and rejected must end with the EOS marker"));
        }
        let (clean, leaky) = if self.is_swapped() {
            (&self.rejected, &self.chosen)
        } else {
            (&self.chosen, &self.rejected)
        };
        let clean_count = detector.count(clean);
        if clean_count != 0 {
            return Err(Error::invalid(format!("PII-free side has {clean_count} PII spans")));
        }
        if detector.count(leaky) == 0 {
            return Err(Error::invalid("PII side has no PII"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropStage {
    Generation,
    Filtration,
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub sample_id: String,
    pub dialogue_id: String,
    pub stage: DropStage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripleConfig {
    pub cfg_augment: bool,
    pub eos_marker: String,
}

impl Default for TripleConfig {
    fn default() -> Self {
        Self {
            cfg_augment: false,
            eos_marker: DEFAULT_EOS_MARKER.into(),
        }
    }
}

fn prompt_turns(sample: &ExpandedSample) -> Vec<Turn> {
    let mut turns = sample.history.clone();
    turns.push(Turn::new(Role::Assistant, sample.answer_prefix.as_str()));
    turns
}

/// Triples for one sample: every PII-free candidate is paired against the
/// original target. With augmentation each base triple is followed by the
/// avoid-PII variant (as is) and the share-PII variant (swapped).
pub fn build_triples(
    sample: &ExpandedSample,
    candidates: &[Candidate],
    detector: &PiiDetector,
    cfg: &TripleConfig,
) -> std::result::Result<Vec<PreferenceTriple>, DropRecord> {
    let drop = |reason: &str| DropRecord {
        sample_id: sample.sample_id(),
        dialogue_id: sample.dialogue_id.clone(),
        stage: DropStage::Filtration,
        reason: reason.to_string(),
    };
    let rejected_text = sample.target_original.trim_end();
    if detector.count(rejected_text) == 0 {
        return Err(drop("original target has no detectable PII"));
    }
    let rejected = format!("{rejected_text}{}", cfg.eos_marker);
    let turns = prompt_turns(sample);

    let mut out = Vec::new();
    for cand in candidates {
        let text = cand.text.trim();
        if text.is_empty() || detector.count(text) != 0 {
            continue;
        }
        let chosen = format!("{text}{}", cfg.eos_marker);
        out.push(PreferenceTriple {
            prompt: render(&turns),
            chosen: chosen.clone(),
            rejected: rejected.clone(),
            cfg_augmented: false,
            system_suffix: None,
            dialogue_id: sample.dialogue_id.clone(),
            prompt_turns: turns.clone(),
        });
        if cfg.cfg_augment {
            for (sentence, swap) in [(AVOID_PII_CONDITION, false), (SHARE_PII_CONDITION, true)] {
                let t = with_system_suffix(&turns, sentence);
                let (c, r) = if swap {
                    (rejected.clone(), chosen.clone())
                } else {
                    (chosen.clone(), rejected.clone())
                };
                out.push(PreferenceTriple {
                    prompt: render(&t),
                    chosen: c,
                    rejected: r,
                    cfg_augmented: true,
                    system_suffix: Some(sentence.to_string()),
                    dialogue_id: sample.dialogue_id.clone(),
                    prompt_turns: t,
                });
            }
        }
    }
    if out.is_empty() {
        let reason = if candidates.is_empty() {
            "no candidates"
        } else {
            "every candidate contains PII"
        };
        return Err(drop(reason));
    }
    Ok(out)
}

/// Unit in which lengths are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    Words,
    Chars,
}

impl LengthUnit {
    pub fn measure(self, text: &str) -> usize {
        match self {
            LengthUnit::Words => text.split_whitespace().count(),
            LengthUnit::Chars => text.chars().count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthLimits {
    pub max_prompt: usize,
    pub max_total: usize,
    pub unit: LengthUnit,
}

impl Default for LengthLimits {
    fn default() -> Self {
        Self {
            max_prompt: DEFAULT_MAX_PROMPT,
            max_total: DEFAULT_MAX_TOTAL,
            unit: LengthUnit::Words,
        }
    }
}

/// Drops the oldest user/assistant exchanges until the prompt fits within
/// `max_prompt` and prompt plus the longer completion fits within
/// `max_total`. The system turn and the final exchange are always kept.
pub fn enforce_lengths<F>(
    triple: PreferenceTriple,
    max_prompt: usize,
    max_total: usize,
    len: F,
) -> std::result::Result<PreferenceTriple, String>
where
    F: Fn(&str) -> usize,
{
    let completion = len(&triple.chosen).max(len(&triple.rejected));
    let fits = |prompt: &str| {
        let p = len(prompt);
        p <= max_prompt && p + completion <= max_total
    };
    if fits(&triple.prompt) {
        return Ok(triple);
    }
    let mut turns = triple.prompt_turns.clone();
    if turns.is_empty() {
        return Err("prompt has no turn structure to truncate".into());
    }
    // system, [user, assistant]*, user, assistant-prefix
    while turns.len() > 3 {
        turns.drain(1..3);
        if fits(&render(&turns)) {
            let prompt = render(&turns);
            return Ok(PreferenceTriple {
                prompt,
                prompt_turns: turns,
                ..triple
            });
        }
    }
    let p = len(&render(&turns));
    Err(if p > max_prompt {
        format!("prompt is {p} units after truncation, limit {max_prompt}")
    } else {
        format!("prompt {p} + completion {completion} exceeds {max_total}")
    })
}
