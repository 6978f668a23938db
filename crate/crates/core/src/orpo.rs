//! Odds-ratio preference objective, as a calculator over per-token
//! log-probabilities.
//!
//! ```text
//! p          = exp(mean token log-prob), clamped to [ε, 1 − ε]
//! log odds   = log p − log(1 − p)
//! or_term    = −log σ(log odds(chosen) − log odds(rejected))
//! nll        = −mean log-prob(chosen)
//! total      = nll + β · or_term
//! ```

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probability clamp applied before the odds transform.
pub const PROB_EPSILON: f64 = 1e-8;

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCompletion {
    token_logprobs: Vec<f64>,
}

impl ScoredCompletion {
    pub fn new(token_logprobs: Vec<f64>) -> Result<Self> {
        if token_logprobs.is_empty() {
            return Err(Error::invalid("completion has no tokens"));
        }
        if let Some((i, v)) = token_logprobs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v > 0.0)
        {
            return Err(Error::invalid(format!(
                "token {i} has log-probability {v}; expected a finite value <= 0"
            )));
        }
        Ok(Self { token_logprobs })
    }

    pub fn token_logprobs(&self) -> &[f64] {
        &self.token_logprobs
    }

    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }

    pub fn sum_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// Mean token log-probability.
pub fn avg_logprob(c: &ScoredCompletion) -> f64 {
    c.sum_logprob() / c.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrpoConfig {
    pub beta: f64,
    /// Use the mean rather than the sum of token log-probs in the odds term.
    pub length_normalize: bool,
}

impl Default for OrpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            length_normalize: true,
        }
    }
}

impl OrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrpoLoss {
    pub total: f64,
    pub nll: f64,
    pub or_term: f64,
}

/// `log(p / (1 − p))` for `p = exp(logp)`, clamped.
pub fn log_odds(logp: f64) -> f64 {
    let p = logp.exp().clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    p.ln() - (-p).ln_1p()
}

/// `−log σ(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The odds-ratio term from the two sequence-level log-probabilities.
pub fn odds_ratio_term(chosen_logp: f64, rejected_logp: f64) -> f64 {
    neg_log_sigmoid(log_odds(chosen_logp) - log_odds(rejected_logp))
}

/// Analytic partial derivatives of [`odds_ratio_term`] with respect to the
/// chosen and rejected log-probabilities (inside the clamp range).
pub fn odds_ratio_gradient(chosen_logp: f64, rejected_logp: f64) -> (f64, f64) {
    let x = log_odds(chosen_logp) - log_odds(rejected_logp);
    // d/dx −log σ(x) = −σ(−x); d log_odds / d logp = 1 / (1 − p).
    let outer = -sigmoid(-x);
    let dc = 1.0 / (1.0 - chosen_logp.exp());
    let dr = 1.0 / (1.0 - rejected_logp.exp());
    (outer * dc, -outer * dr)
}

fn finite(stage: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            stage,
            detail: format!("got {v}"),
        })
    }
}

pub fn odds_ratio_loss(
    chosen: &ScoredCompletion,
    rejected: &ScoredCompletion,
    cfg: &OrpoConfig,
) -> Result<OrpoLoss> {
    cfg.validate()?;
    let (c, r) = if cfg.length_normalize {
        (avg_logprob(chosen), avg_logprob(rejected))
    } else {
        (chosen.sum_logprob(), rejected.sum_logprob())
    };
    let lo_c = finite("chosen log-odds", log_odds(c))?;
    let lo_r = finite("rejected log-odds", log_odds(r))?;
    let or_term = finite("odds-ratio term", neg_log_sigmoid(lo_c - lo_r))?;
    let nll = finite("nll", -avg_logprob(chosen))?;
    let total = finite("total", nll + cfg.beta * or_term)?;
    Ok(OrpoLoss { total, nll, or_term })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn sc(v: &[f64]) -> ScoredCompletion {
        ScoredCompletion::new(v.to_vec()).unwrap()
    }

    #[test]
    fn avg_logprob_examples() {
        assert_eq!(avg_logprob(&sc(&[0.5f64.ln()])), 0.5f64.ln());
        assert_eq!(avg_logprob(&sc(&[0.0, 0.0])), 0.0);
        let v = avg_logprob(&sc(&[0.25f64.ln(), 0.5f64.ln()]));
        assert!((v - (0.25f64.ln() + 0.5f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_completions() {
        assert!(ScoredCompletion::new(vec![]).is_err());
        assert!(ScoredCompletion::new(vec![0.1]).is_err());
        assert!(ScoredCompletion::new(vec![f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn symmetric_pair_gives_ln2() {
        let c = sc(&[-0.3, -1.2]);
        let loss = odds_ratio_loss(&c, &c, &OrpoConfig::default()).unwrap();
        assert_eq!(loss.or_term, LN_2);
    }

    #[test]
    fn known_odds_ratio() {
        let loss = odds_ratio_loss(&sc(&[0.8f64.ln()]), &sc(&[0.2f64.ln()]), &OrpoConfig::default()).unwrap();
        assert!((loss.or_term - (17.0f64 / 16.0).ln()).abs() < 1e-12);
        assert!((loss.nll + 0.8f64.ln()).abs() < 1e-15);
        assert!((loss.total - (loss.nll + 0.1 * loss.or_term)).abs() < 1e-15);
    }

    #[test]
    fn certain_tokens_are_clamped() {
        let loss = odds_ratio_loss(&sc(&[0.0]), &sc(&[0.0]), &OrpoConfig::default()).unwrap();
        assert_eq!(loss.or_term, LN_2);
        assert_eq!(loss.nll, 0.0);
    }

    #[test]
    fn unnormalised_uses_sums() {
        let cfg = OrpoConfig {
            length_normalize: false,
            ..OrpoConfig::default()
        };
        let c = sc(&[0.9f64.ln(), 0.9f64.ln()]);
        let r = sc(&[0.81f64.ln()]);
        let loss = odds_ratio_loss(&c, &r, &cfg).unwrap();
        assert!((loss.or_term - LN_2).abs() < 1e-12);
    }

    #[test]
    fn beta_must_be_positive() {
        let c = sc(&[-1.0]);
        let cfg = OrpoConfig {
            beta: 0.0,
            length_normalize: true,
        };
        assert!(odds_ratio_loss(&c, &c, &cfg).is_err());
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((neg_log_sigmoid(800.0)).abs() < 1e-300);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
    }
}
