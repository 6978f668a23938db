//! Evaluation drivers: PII leakage under guided decoding, and judge-scored
//! answer correctness.

use std::io::BufRead;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::api::ChatMessage;
use crate::dataset::generate::TextGenerator;
use crate::decoder::{decode, DecodeRequest};
use crate::guidance::{GuidanceSpec, SelectionMode};
use crate::lm::LanguageModel;
use crate::pii::{PiiDetector, PiiSpan};
use crate::prompts::JUDGE_TEMPLATE;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSample {
    pub id: String,
    /// Conversation template text ending at the assistant header.
    pub prompt: String,
}

/// Reads `{"id", "prompt"}` JSONL, failing on the first bad line.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<EvalSample>> {
    read_jsonl(reader)
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(Some(i + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(Some(i + 1), e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub text: String,
    pub pii_count: usize,
    pub pii_spans: Vec<PiiSpan>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub samples: usize,
    pub total_pii: usize,
    pub samples_with_pii: usize,
    pub failed: usize,
}

impl Totals {
    pub fn from_results(results: &[SampleResult]) -> Self {
        Self {
            samples: results.len(),
            total_pii: results.iter().map(|r| r.pii_count).sum(),
            samples_with_pii: results.iter().filter(|r| r.pii_count > 0).count(),
            failed: results.iter().filter(|r| r.error.is_some()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleResult>,
    pub totals: Totals,
    pub config_echo: Value,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiiEvalConfig {
    pub max_new_tokens: usize,
    pub workers: usize,
}

impl Default for PiiEvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            workers: 4,
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Greedy-decodes every sample under `guidance` and counts PII in the
/// completions. Per-sample failures are recorded and do not stop the run.
/// Results are ordered by sample id.
pub fn run_pii_eval<M: LanguageModel + ?Sized>(
    model: &M,
    samples: &[EvalSample],
    guidance: &GuidanceSpec,
    detector: &PiiDetector,
    cfg: &PiiEvalConfig,
    config_echo: Value,
) -> Result<EvalReport> {
    guidance.validate()?;
    let mut per_sample: Vec<SampleResult> = pool(cfg.workers)?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let req = DecodeRequest {
                    dialogue_prefix: s.prompt.clone(),
                    guidance: guidance.clone(),
                    max_new_tokens: cfg.max_new_tokens,
                    mode: SelectionMode::Greedy,
                    trace: false,
                };
                match decode(model, &req) {
                    Ok(out) => {
                        let spans = detector.detect(&out.text);
                        SampleResult {
                            id: s.id.clone(),
                            text: out.text,
                            pii_count: spans.len(),
                            pii_spans: spans,
                            error: None,
                        }
                    }
                    Err(e) => {
                        log::warn!("sample {}: {e}", s.id);
                        SampleResult {
                            id: s.id.clone(),
                            text: String::new(),
                            pii_count: 0,
                            pii_spans: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    per_sample.sort_by(|a, b| a.id.cmp(&b.id));
    let totals = Totals::from_results(&per_sample);
    Ok(EvalReport {
        per_sample,
        totals,
        config_echo,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    pub correct_answer: String,
    pub answer: String,
}

pub fn read_qa_items<R: BufRead>(reader: R) -> Result<Vec<QaItem>> {
    read_jsonl(reader)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    Incorrect,
    CantTell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub id: String,
    pub verdict: Verdict,
    pub raw_response: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Fills the judge template in a single pass, so placeholder-like text
/// inside the inputs is left alone.
pub fn fill_judge_template(question: &str, correct_answer: &str, answer: &str) -> String {
    let mut out = String::with_capacity(JUDGE_TEMPLATE.len() + question.len() + correct_answer.len() + answer.len());
    let mut rest = JUDGE_TEMPLATE;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let (value, len) = [
            ("{question}", question),
            ("{correct_answer}", correct_answer),
            ("{answer}", answer),
        ]
        .into_iter()
        .find(|(p, _)| tail.starts_with(p))
        .map(|(p, v)| (v, p.len()))
        .unwrap_or(("{", 1));
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

static VERDICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(incorrect|correct|can['’]?t tell)\b").expect("verdict regex"));

/// Leftmost keyword wins; anything else is `CantTell`.
pub fn parse_verdict(raw: &str) -> Verdict {
    match VERDICT.find(raw).map(|m| m.as_str().to_lowercase()) {
        Some(w) if w == "correct" => Verdict::Correct,
        Some(w) if w == "incorrect" => Verdict::Incorrect,
        _ => Verdict::CantTell,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub model: String,
    pub temperature: f64,
    pub workers: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub verdicts: Vec<JudgeVerdict>,
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub cant_tell: usize,
    pub correctness_rate: f64,
    pub config_echo: Value,
}

pub fn run_judge_eval(
    items: &[QaItem],
    judge: &dyn TextGenerator,
    cfg: &JudgeConfig,
    config_echo: Value,
) -> Result<JudgeReport> {
    let mut verdicts: Vec<JudgeVerdict> = pool(cfg.workers)?.install(|| {
        items
            .par_iter()
            .map(|item| {
                let prompt = fill_judge_template(&item.question, &item.correct_answer, &item.answer);
                match judge.chat(&cfg.model, &[ChatMessage::new("user", prompt)], cfg.temperature) {
                    Ok(raw) => JudgeVerdict {
                        id: item.id.clone(),
                        verdict: parse_verdict(&raw),
                        raw_response: raw,
                        error: None,
                    },
                    Err(e) => JudgeVerdict {
                        id: item.id.clone(),
                        verdict: Verdict::CantTell,
                        raw_response: String::new(),
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    verdicts.sort_by(|a, b| a.id.cmp(&b.id));
    if !verdicts.is_empty() && verdicts.iter().all(|v| v.error.is_some()) {
        return Err(Error::ExternalService(format!(
            "every judge request failed; first error: {}",
            verdicts[0].error.as_deref().unwrap_or_default()
        )));
    }
    let count = |v: Verdict| verdicts.iter().filter(|x| x.verdict == v).count();
    let (correct, incorrect, cant_tell) = (count(Verdict::Correct), count(Verdict::Incorrect), count(Verdict::CantTell));
    let total = verdicts.len();
    Ok(JudgeReport {
        correctness_rate: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        verdicts,
        total,
        correct,
        incorrect,
        cant_tell,
        config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::Variant;
    use crate::lm::{TabularLM, Vocabulary};
    use crate::pii::{Label, LabelPolicy};

    #[test]
    fn verdict_keywords() {
        assert_eq!(parse_verdict("Correct"), Verdict::Correct);
        assert_eq!(parse_verdict("incorrect."), Verdict::Incorrect);
        assert_eq!(parse_verdict("\"Can't tell\""), Verdict::CantTell);
        assert_eq!(parse_verdict("CORRECT, not incorrect"), Verdict::Correct);
        assert_eq!(parse_verdict("maybe"), Verdict::CantTell);
        assert_eq!(parse_verdict("incorrectly"), Verdict::CantTell);
    }

    #[test]
    fn template_fill_is_single_pass() {
        let s = fill_judge_template("What is {answer}?", "4", "5");
        assert!(s.contains("Question: What is {answer}?\n"));
        assert!(s.contains("Correct answer: 4\n"));
        assert!(s.contains("Answer to check: 5\n"));
    }

    fn model() -> TabularLM {
        let words = ["<unk>", "<eos>", "Alice", "fine"];
        let vocab = Vocabulary::new(words.iter().map(|s| s.to_string()).collect(), 1).unwrap();
        let mut m = TabularLM::new(vocab, 1, vec![0.0, 0.0, 5.0, 0.0]).unwrap();
        m.insert(vec![2], vec![0.0, 9.0, 0.0, 0.0]).unwrap();
        m
    }

    fn samples() -> Vec<EvalSample> {
        ["b", "a", "c"]
            .iter()
            .map(|id| EvalSample {
                id: id.to_string(),
                prompt: "System: s\nUser: hi\nAssistant:".into(),
            })
            .collect()
    }

    #[test]
    fn forced_name_leaks_everywhere() {
        let det = PiiDetector::builder()
            .gazetteer(Label::Person, ["Alice"])
            .build()
            .unwrap();
        let spec = GuidanceSpec::new(1.0, Variant::DualProb).unwrap();
        let r = run_pii_eval(&model(), &samples(), &spec, &det, &PiiEvalConfig::default(), Value::Null).unwrap();
        assert_eq!(r.totals.samples_with_pii, 3);
        assert_eq!(r.totals, Totals::from_results(&r.per_sample));
        let ids: Vec<&str> = r.per_sample.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn empty_detector_counts_nothing() {
        let det = PiiDetector::builder().policy(LabelPolicy::default()).build().unwrap();
        let spec = GuidanceSpec::new(1.0, Variant::DualProb).unwrap();
        let r = run_pii_eval(&model(), &samples(), &spec, &det, &PiiEvalConfig::default(), Value::Null).unwrap();
        assert_eq!(r.totals.total_pii, 0);
    }

    #[test]
    fn decode_failure_is_recorded() {
        let det = PiiDetector::patterns_only(LabelPolicy::default());
        let spec = GuidanceSpec::new(1.0, Variant::DualProb).unwrap();
        let bad = vec![EvalSample {
            id: "x".into(),
            prompt: "no header".into(),
        }];
        let r = run_pii_eval(&model(), &bad, &spec, &det, &PiiEvalConfig::default(), Value::Null).unwrap();
        assert_eq!(r.totals.failed, 1);
    }
}
