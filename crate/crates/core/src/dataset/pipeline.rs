//! End-to-end dataset build: expand, split, generate, filter, limit, write.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::conversation::{Dialogue, RecordError};
use super::expand::{expand_all, split, ExpandedSample, DEFAULT_SPLIT_RATIO};
use super::generate::{generate_all, Candidate, CandidateCache, GenerationConfig, GenerationFailure, TextGenerator};
use super::triples::{build_triples, enforce_lengths, DropRecord, DropStage, LengthLimits, PreferenceTriple, TripleConfig};
use crate::pii::PiiDetector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub split_ratio: f64,
    pub seed: u64,
    pub triples: TripleConfig,
    pub limits: LengthLimits,
    pub generation: GenerationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split_ratio: DEFAULT_SPLIT_RATIO,
            seed: 0,
            triples: TripleConfig::default(),
            limits: LengthLimits::default(),
            generation: GenerationConfig::default(),
        }
    }
}

/// Where candidates come from.
pub enum CandidateSource<'a> {
    Live(&'a dyn TextGenerator),
    /// Offline: only cached candidates are used and no request is made.
    Cache(&'a CandidateCache),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineStats {
    pub dialogues: usize,
    pub samples: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub candidates: usize,
    pub failed_requests: usize,
    pub train_triples: usize,
    pub test_triples: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub train: Vec<PreferenceTriple>,
    pub test: Vec<PreferenceTriple>,
    pub drops: Vec<DropRecord>,
    pub candidates: Vec<Candidate>,
    pub failures: Vec<GenerationFailure>,
    pub stats: PipelineStats,
}

fn triples_for(
    samples: &[ExpandedSample],
    candidates: &CandidateCache,
    failures: &[GenerationFailure],
    detector: &PiiDetector,
    cfg: &PipelineConfig,
    drops: &mut Vec<DropRecord>,
) -> Result<Vec<PreferenceTriple>> {
    let mut out = Vec::new();
    for sample in samples {
        let id = sample.sample_id();
        let cands = candidates.get(&id).unwrap_or(&[]);
        if cands.is_empty() {
            let failed = failures.iter().filter(|f| f.sample_id == id).count();
            drops.push(DropRecord {
                sample_id: id,
                dialogue_id: sample.dialogue_id.clone(),
                stage: DropStage::Generation,
                reason: if failed > 0 {
                    format!("all {failed} generation requests failed")
                } else {
                    "no candidates available".into()
                },
            });
            continue;
        }
        let triples = match build_triples(sample, cands, detector, &cfg.triples) {
            Ok(t) => t,
            Err(d) => {
                drops.push(d);
                continue;
            }
        };
        for t in triples {
            match enforce_lengths(t, cfg.limits.max_prompt, cfg.limits.max_total, |s| cfg.limits.unit.measure(s)) {
                Ok(t) => {
                    t.validate(detector, &cfg.triples.eos_marker)?;
                    out.push(t);
                }
                Err(reason) => drops.push(DropRecord {
                    sample_id: sample.sample_id(),
                    dialogue_id: sample.dialogue_id.clone(),
                    stage: DropStage::Length,
                    reason,
                }),
            }
        }
    }
    Ok(out)
}

pub fn run_pipeline(
    dialogues: &[Dialogue],
    detector: &PiiDetector,
    source: CandidateSource<'_>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let samples = expand_all(dialogues, detector);
    let n_samples = samples.len();
    let (train, test) = split(samples, cfg.split_ratio, cfg.seed)?;

    let (cache, candidates, failures) = match source {
        CandidateSource::Cache(cache) => (cache.clone(), Vec::new(), Vec::new()),
        CandidateSource::Live(generator) => {
            let all: Vec<ExpandedSample> = train.iter().chain(&test).cloned().collect();
            let outcome = generate_all(&all, generator, &cfg.generation)?;
            if outcome.candidates.is_empty() && !outcome.failures.is_empty() {
                return Err(Error::ExternalService(format!(
                    "all {} generation requests failed; first error: {}",
                    outcome.failures.len(),
                    outcome.failures[0].error
                )));
            }
            let cache = CandidateCache::from_candidates(outcome.candidates.clone());
            (cache, outcome.candidates, outcome.failures)
        }
    };

    let mut drops = Vec::new();
    let train_triples = triples_for(&train, &cache, &failures, detector, cfg, &mut drops)?;
    let test_triples = triples_for(&test, &cache, &failures, detector, cfg, &mut drops)?;

    let stats = PipelineStats {
        dialogues: dialogues.len(),
        samples: n_samples,
        train_samples: train.len(),
        test_samples: test.len(),
        candidates: candidates.len(),
        failed_requests: failures.len(),
        train_triples: train_triples.len(),
        test_triples: test_triples.len(),
        dropped: drops.len(),
    };
    Ok(PipelineOutput {
        train: train_triples,
        test: test_triples,
        drops,
        candidates,
        failures,
        stats,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `train.jsonl`, `test.jsonl`, `drops.jsonl`, `candidates.jsonl`
/// and `manifest.json` (resolved configuration, counts, skipped input
/// records and failed requests) to `dir`.
pub fn write_outputs(dir: &Path, out: &PipelineOutput, input_errors: &[RecordError], config_echo: &Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &out.train)?;
    write_jsonl(&dir.join("test.jsonl"), &out.test)?;
    write_jsonl(&dir.join("drops.jsonl"), &out.drops)?;
    write_jsonl(&dir.join("candidates.jsonl"), &out.candidates)?;
    let manifest = serde_json::json!({
        "config": config_echo,
        "stats": out.stats,
        "input_errors": input_errors,
        "generation_failures": out.failures,
    });
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
