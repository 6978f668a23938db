//! Guided autoregressive decoding.
//!
//! Each step scores the positive and the baseline (negative or
//! unconditional) context in a single batched model call, combines the two
//! score vectors with the configured guidance rule, selects a token and
//! appends it to both contexts.

use serde::{Deserialize, Serialize};

use crate::dataset::conversation::{parse_template, render, with_system_suffix};
use crate::guidance::{softmax, GuidanceSpec, Scale, SelectionMode, TokenSelector, Variant};
use crate::lm::{LanguageModel, TokenId, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    /// Conversation template text, optionally ending in a partial assistant
    /// answer.
    pub dialogue_prefix: String,
    pub guidance: GuidanceSpec,
    pub max_new_tokens: usize,
    pub mode: SelectionMode,
    /// Record per-step score vectors.
    #[serde(default)]
    pub trace: bool,
}

impl DecodeRequest {
    pub fn greedy(dialogue_prefix: impl Into<String>, guidance: GuidanceSpec, max_new_tokens: usize) -> Self {
        Self {
            dialogue_prefix: dialogue_prefix.into(),
            guidance,
            max_new_tokens,
            mode: SelectionMode::Greedy,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1"));
        }
        self.guidance.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Eos,
    Length,
}

/// Scores seen at one decoding step. `positive` and `baseline` are the raw
/// model outputs (logits); `combined` is what token selection saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub positive: Vec<f64>,
    pub baseline: Vec<f64>,
    pub combined: Vec<f64>,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub stop_reason: StopReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step_scores: Option<Vec<StepTrace>>,
}

/// Positive and baseline context texts for `request`.
///
/// The positive context has the positive condition appended to the system
/// prompt. The baseline gets the negative condition, or stays unmodified
/// for unconditional guidance.
pub fn build_context_texts(request: &DecodeRequest) -> Result<(String, String)> {
    let turns = parse_template(&request.dialogue_prefix)?;
    let spec = &request.guidance;
    let positive = with_system_suffix(&turns, &spec.positive_condition);
    let baseline = match spec.variant {
        Variant::UncondLog => turns,
        Variant::DualLog | Variant::DualProb => with_system_suffix(&turns, &spec.negative_condition),
    };
    Ok((render(&positive), render(&baseline)))
}

/// Tokenised `(positive, baseline)` contexts.
pub fn build_contexts(vocab: &Vocabulary, request: &DecodeRequest) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let (positive, baseline) = build_context_texts(request)?;
    Ok((vocab.tokenize(&positive), vocab.tokenize(&baseline)))
}

pub fn decode<M: LanguageModel + ?Sized>(model: &M, request: &DecodeRequest) -> Result<DecodeResult> {
    request.validate()?;
    let vocab = model.vocab();
    let (positive, baseline) = build_contexts(vocab, request)?;
    let mut contexts = vec![positive, baseline];
    let spec = &request.guidance;
    let sampling = matches!(request.mode, SelectionMode::Sample { .. });
    let mut selector = TokenSelector::new(request.mode);
    let mut generated = Vec::new();
    let mut trace = request.trace.then(Vec::new);
    let mut stop_reason = StopReason::Length;

    for _ in 0..request.max_new_tokens {
        let mut scores = model.score_batch(&contexts)?;
        if scores.len() != 2 {
            return Err(Error::invalid(format!(
                "model returned {} score vectors for 2 contexts",
                scores.len()
            )));
        }
        let baseline_scores = scores.pop().expect("two score vectors");
        let positive_scores = scores.pop().expect("two score vectors");
        let combined = spec.combine(&baseline_scores, &positive_scores)?;
        let fallback = positive_scores.to_scale(Scale::Probs);
        let token = if sampling && spec.variant.is_log_space() {
            selector.select(&softmax(&combined), fallback.values())?
        } else {
            selector.select(&combined, fallback.values())?
        } as TokenId;

        if let Some(t) = trace.as_mut() {
            t.push(StepTrace {
                positive: positive_scores.into_values(),
                baseline: baseline_scores.into_values(),
                combined,
                token,
            });
        }
        for ctx in &mut contexts {
            ctx.push(token);
        }
        generated.push(token);
        if token == vocab.eos_id() {
            stop_reason = StopReason::Eos;
            break;
        }
    }

    Ok(DecodeResult {
        text: vocab.detokenize(&generated),
        token_ids: generated,
        stop_reason,
        per_step_scores: trace,
    })
}
