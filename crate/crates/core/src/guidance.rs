//! Classifier-free guidance over next-token scores.
//!
//! Three combination rules are provided:
//!
//! - [`cfg_log_uncond`]: `log P(w|·) + γ (log P(w|·, c) − log P(w|·))`
//! - [`cfg_log_dual`]: the same extrapolation from a negatively conditioned
//!   baseline towards a positively conditioned one
//! - [`cfg_prob_dual`]: the dual rule applied to probabilities instead of
//!   log-probabilities, which bounds every score to `[1 − γ, γ]` for `γ ≥ 1`
//!
//! The log-space rules can turn a token that is unlikely under both
//! conditions into the argmax when the negative condition makes it far less
//! likely than the positive one does; the probability-space rule cannot.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prompts::{AVOID_PII_CONDITION, SHARE_PII_CONDITION};
use crate::{Error, Result};

/// Tolerance for probability and log-probability normalisation checks.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Logits,
    LogProbs,
    Probs,
}

/// A vocabulary-length score vector tagged with the scale it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    values: Vec<f64>,
    scale: Scale,
}

impl TokenScores {
    /// Validates `values` against `scale`.
    ///
    /// `-inf` is accepted for logits and log-probabilities (a masked or
    /// impossible token); NaN and `+inf` are always rejected.
    pub fn new(values: Vec<f64>, scale: Scale) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("score vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::invalid(format!(
                "non-finite score {} at token {i}",
                values[i]
            )));
        }
        match scale {
            Scale::Logits => {
                if values.iter().all(|v| v.is_infinite()) {
                    return Err(Error::invalid("all logits are -inf"));
                }
            }
            Scale::Probs => {
                if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid(format!(
                        "probability {} at token {i} is outside [0, 1]",
                        values[i]
                    )));
                }
                let total: f64 = values.iter().sum();
                if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::invalid(format!("probabilities sum to {total}")));
                }
            }
            Scale::LogProbs => {
                if let Some(i) = values.iter().position(|v| *v > 0.0) {
                    return Err(Error::invalid(format!(
                        "log-probability {} at token {i} is positive",
                        values[i]
                    )));
                }
                let total: f64 = values.iter().map(|v| v.exp()).sum();
                if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::invalid(format!(
                        "log-probabilities exponentiate to a total of {total}"
                    )));
                }
            }
        }
        Ok(Self { values, scale })
    }

    pub fn logits(values: Vec<f64>) -> Result<Self> {
        Self::new(values, Scale::Logits)
    }

    pub fn probs(values: Vec<f64>) -> Result<Self> {
        Self::new(values, Scale::Probs)
    }

    pub fn log_probs(values: Vec<f64>) -> Result<Self> {
        Self::new(values, Scale::LogProbs)
    }

    /// Upcasts single-precision scores.
    pub fn from_f32(values: &[f32], scale: Scale) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect(), scale)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_scale(&self, target: Scale) -> TokenScores {
        let values = match (self.scale, target) {
            (from, to) if from == to => self.values.clone(),
            // Log-probabilities are a valid set of logits.
            (Scale::LogProbs, Scale::Logits) => self.values.clone(),
            (Scale::Logits, Scale::LogProbs) => log_softmax(&self.values),
            (Scale::Logits, Scale::Probs) => softmax(&self.values),
            (Scale::LogProbs, Scale::Probs) => self.values.iter().map(|v| v.exp()).collect(),
            (Scale::Probs, Scale::LogProbs) | (Scale::Probs, Scale::Logits) => {
                self.values.iter().map(|v| v.ln()).collect()
            }
            _ => unreachable!(),
        };
        TokenScores {
            values,
            scale: target,
        }
    }
}

/// Converts `scores` to `target` via softmax, log-softmax or exp/ln.
/// Idempotent when `scores` is already on `target`.
pub fn normalize(scores: &TokenScores, target: Scale) -> Result<TokenScores> {
    if let Some(i) = scores.values.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::invalid(format!("non-finite score at token {i}")));
    }
    Ok(scores.to_scale(target))
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values.iter().map(|v| v - log_total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Unconditional baseline, single condition, log space.
    UncondLog,
    /// Negative-condition baseline, positive condition, log space.
    DualLog,
    /// Negative-condition baseline, positive condition, probability space.
    DualProb,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::UncondLog, Variant::DualLog, Variant::DualProb];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::UncondLog => "uncond-log",
            Variant::DualLog => "dual-log",
            Variant::DualProb => "dual-prob",
        }
    }

    /// Whether the combined scores are log-scale (as opposed to probability).
    pub fn is_log_space(self) -> bool {
        !matches!(self, Variant::DualProb)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown guidance variant {s:?} (expected uncond-log, dual-log or dual-prob)"
                ))
            })
    }
}

/// What the log-space variants operate on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogInput {
    /// Log-softmax the model outputs first, so γ = 1 collapses exactly onto
    /// the conditioned distribution.
    #[default]
    LogSoftmax,
    /// Extrapolate raw logits without normalising.
    RawLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub gamma: f64,
    pub variant: Variant,
    pub positive_condition: String,
    /// Empty means the baseline is the unmodified context.
    pub negative_condition: String,
    #[serde(default)]
    pub log_input: LogInput,
}

impl GuidanceSpec {
    /// A spec with the default PII conditions for `variant`. The
    /// unconditional variant gets an empty negative condition.
    pub fn new(gamma: f64, variant: Variant) -> Result<Self> {
        let negative = match variant {
            Variant::UncondLog => String::new(),
            _ => SHARE_PII_CONDITION.to_string(),
        };
        let spec = Self {
            gamma,
            variant,
            positive_condition: AVOID_PII_CONDITION.to_string(),
            negative_condition: negative,
            log_input: LogInput::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_conditions(
        mut self,
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Result<Self> {
        self.positive_condition = positive.into();
        self.negative_condition = negative.into();
        self.validate()?;
        Ok(self)
    }

    pub fn with_log_input(mut self, log_input: LogInput) -> Self {
        self.log_input = log_input;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.variant == Variant::UncondLog && !self.negative_condition.is_empty() {
            return Err(Error::invalid(
                "uncond-log guidance requires an empty negative condition",
            ));
        }
        Ok(())
    }

    /// Combines the baseline (negative or unconditional) scores with the
    /// positively conditioned scores according to the configured variant.
    pub fn combine(&self, baseline: &TokenScores, conditioned: &TokenScores) -> Result<Vec<f64>> {
        check_gamma(self.gamma)?;
        check_lengths(baseline, conditioned)?;
        match (self.variant, self.log_input) {
            (Variant::DualProb, _) => cfg_prob_dual(baseline, conditioned, self.gamma),
            (_, LogInput::RawLogits) => {
                let base = normalize(baseline, Scale::Logits)?;
                let cond = normalize(conditioned, Scale::Logits)?;
                Ok(extrapolate(base.values(), cond.values(), self.gamma))
            }
            (Variant::UncondLog, LogInput::LogSoftmax) => {
                cfg_log_uncond(baseline, conditioned, self.gamma)
            }
            (Variant::DualLog, LogInput::LogSoftmax) => {
                cfg_log_dual(baseline, conditioned, self.gamma)
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::invalid(format!(
            "guidance coefficient must be finite and >= 0, got {gamma}"
        )));
    }
    Ok(())
}

fn check_lengths(a: &TokenScores, b: &TokenScores) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "score vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `base + γ (target − base)`, evaluated so that γ = 0, γ = 1 and
/// `base == target` reproduce their inputs exactly.
fn extrapolate_one(base: f64, target: f64, gamma: f64) -> f64 {
    if gamma == 1.0 || base == target {
        return target;
    }
    if gamma == 0.0 {
        return base;
    }
    if base.is_infinite() || target.is_infinite() {
        // Weighted form avoids inf − inf. Both weights are non-zero here.
        (1.0 - gamma) * base + gamma * target
    } else {
        base + gamma * (target - base)
    }
}

fn extrapolate(base: &[f64], target: &[f64], gamma: f64) -> Vec<f64> {
    base.iter()
        .zip(target)
        .map(|(&b, &t)| extrapolate_one(b, t, gamma))
        .collect()
}

fn guided(
    baseline: &TokenScores,
    conditioned: &TokenScores,
    gamma: f64,
    scale: Scale,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_lengths(baseline, conditioned)?;
    let base = normalize(baseline, scale)?;
    let cond = normalize(conditioned, scale)?;
    Ok(extrapolate(base.values(), cond.values(), gamma))
}

/// Guidance against an unconditional baseline over log-probabilities.
/// The result is an unnormalised log-score vector.
pub fn cfg_log_uncond(
    uncond: &TokenScores,
    cond: &TokenScores,
    gamma: f64,
) -> Result<Vec<f64>> {
    guided(uncond, cond, gamma, Scale::LogProbs)
}

/// Guidance from a negative towards a positive condition over
/// log-probabilities. The result is an unnormalised log-score vector.
pub fn cfg_log_dual(neg: &TokenScores, pos: &TokenScores, gamma: f64) -> Result<Vec<f64>> {
    guided(neg, pos, gamma, Scale::LogProbs)
}

/// Guidance from a negative towards a positive condition over
/// probabilities. Scores may fall outside `[0, 1]`.
pub fn cfg_prob_dual(neg: &TokenScores, pos: &TokenScores, gamma: f64) -> Result<Vec<f64>> {
    guided(neg, pos, gamma, Scale::Probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SelectionMode {
    /// Maximum score, ties to the lowest token id.
    Greedy,
    /// Clamp negative scores to zero, renormalise and draw.
    Sample { seed: u64 },
}

/// Index of the largest score, ties broken towards the lowest id. NaNs are
/// skipped.
pub fn greedy(scores: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("no selectable token: scores are empty or all NaN"))
}

/// Clamps negative (and NaN) scores to zero and renormalises. Returns `None`
/// if no mass remains.
pub fn clamp_renormalize(scores: &[f64]) -> Option<Vec<f64>> {
    let clamped: Vec<f64> = scores
        .iter()
        .map(|&s| if s > 0.0 { s } else { 0.0 })
        .collect();
    let total: f64 = clamped.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return None;
    }
    Some(clamped.into_iter().map(|p| p / total).collect())
}

fn draw<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Stateful token selection for a whole decode: the sampling RNG is seeded
/// once and advanced across steps.
#[derive(Debug, Clone)]
pub struct TokenSelector {
    rng: Option<ChaCha8Rng>,
}

impl TokenSelector {
    pub fn new(mode: SelectionMode) -> Self {
        let rng = match mode {
            SelectionMode::Greedy => None,
            SelectionMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { rng }
    }

    /// Picks the next token from non-negative-meaningful `scores`.
    /// `fallback` (normally the positively conditioned distribution) is used
    /// greedily when sampling finds no positive mass.
    pub fn select(&mut self, scores: &[f64], fallback: &[f64]) -> Result<usize> {
        if scores.iter().all(|s| s.is_nan()) {
            return Err(Error::invalid("no selectable token: scores are empty or all NaN"));
        }
        match self.rng.as_mut() {
            None => greedy(scores),
            Some(rng) => match clamp_renormalize(scores) {
                Some(dist) => Ok(draw(&dist, rng)),
                None => greedy(fallback),
            },
        }
    }
}

/// One-shot token selection.
pub fn select_token(scores: &[f64], mode: SelectionMode, fallback: &[f64]) -> Result<usize> {
    TokenSelector::new(mode).select(scores, fallback)
}
