use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use unlearn_core::api::ApiClient;
use unlearn_core::dataset::generate::CandidateCache;
use unlearn_core::dataset::{parse_dialogues, run_pipeline, write_outputs, CandidateSource};
use unlearn_core::decoder::{decode, DecodeRequest, DecodeResult};
use unlearn_core::eval::{read_qa_items, read_samples, run_judge_eval, run_pii_eval, PiiEvalConfig};
use unlearn_core::guidance::SelectionMode;
use unlearn_core::lm::TabularLM;
use unlearn_core::model_arith::negate_files_with_metadata;
use unlearn_core::orpo::{odds_ratio_loss, OrpoLoss, ScoredCompletion};
use unlearn_core::pii::PiiDetector;
use unlearn_core::Error;

use crate::config::{ModeName, RunConfig};
use crate::CliError;

/// Header metadata key holding the resolved configuration.
const CONFIG_METADATA_KEY: &str = "unlearn.config";

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into())
}

fn emit(out: Option<&Path>, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| {
            Error::Io {
                path: p.to_path_buf(),
                source: e,
            }
            .into()
        }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Core(Error::Io { path: "<stdout>".into(), source: e })),
    }
}

fn detector(cfg: &RunConfig) -> Result<PiiDetector, CliError> {
    let policy = cfg.pii.policy()?;
    Ok(match &cfg.pii.gazetteers {
        Some(dir) => PiiDetector::from_dir(dir, policy)?,
        None => PiiDetector::patterns_only(policy),
    })
}

fn client(cfg: &RunConfig, api_key: Option<String>) -> Result<ApiClient, CliError> {
    let endpoint = cfg
        .api
        .endpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("an --endpoint is required".into()))?;
    Ok(ApiClient::new(
        endpoint,
        api_key,
        cfg.api.retry.clone(),
        Duration::from_secs(cfg.api.timeout_secs),
    )?)
}

pub fn subtract(cfg: &RunConfig, base: &Path, finetuned: &Path, out: &Path) -> Result<(), CliError> {
    let alpha = cfg.subtract.alpha;
    if !alpha.is_finite() {
        return Err(CliError::Usage(format!("alpha must be finite, got {alpha}")));
    }
    let echo = cfg.echo();
    let meta = vec![(CONFIG_METADATA_KEY.to_string(), echo.to_string())];
    let summary = negate_files_with_metadata(base, finetuned, out, alpha, cfg.subtract.relu, meta)?;
    emit(
        None,
        &json!({
            "config": echo,
            "output": out.display().to_string(),
            "tensors": summary.tensors,
            "parameters": summary.parameters,
        }),
    )
}

#[derive(Serialize)]
struct Completion {
    id: String,
    #[serde(flatten)]
    result: DecodeResult,
}

pub fn generate(cfg: &RunConfig, model: &Path, prompts: &Path, trace: bool, out: Option<&Path>) -> Result<(), CliError> {
    let spec = cfg.guidance.spec()?;
    if cfg.decode.max_new_tokens == 0 {
        return Err(CliError::Usage("max_new_tokens must be at least 1".into()));
    }
    let model = TabularLM::load(model)?;
    let samples = read_samples(open(prompts)?)?;
    let mut completions = Vec::with_capacity(samples.len());
    for (i, s) in samples.into_iter().enumerate() {
        let mode = match cfg.decode.mode {
            ModeName::Greedy => SelectionMode::Greedy,
            ModeName::Sample => SelectionMode::Sample {
                seed: cfg.seed.wrapping_add(i as u64),
            },
        };
        let req = DecodeRequest {
            dialogue_prefix: s.prompt,
            guidance: spec.clone(),
            max_new_tokens: cfg.decode.max_new_tokens,
            mode,
            trace,
        };
        completions.push(Completion {
            id: s.id,
            result: decode(&model, &req)?,
        });
    }
    emit(out, &json!({ "config": cfg.echo(), "completions": completions }))
}

pub fn build_dataset(
    cfg: &RunConfig,
    api_key: Option<String>,
    dialogues: &Path,
    offline_cache: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let ratio = cfg.dataset.split_ratio;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CliError::Usage(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let det = detector(cfg)?;
    let (dialogues, errors) = parse_dialogues(open(dialogues)?)?;
    let pipeline = cfg.pipeline();
    let output = match offline_cache {
        Some(path) => {
            let cache = CandidateCache::read(open(path)?)?;
            run_pipeline(&dialogues, &det, CandidateSource::Cache(&cache), &pipeline)?
        }
        None => {
            let client = client(cfg, api_key)?;
            run_pipeline(&dialogues, &det, CandidateSource::Live(&client), &pipeline)?
        }
    };
    write_outputs(out_dir, &output, &errors, &cfg.echo())?;
    log::info!(
        "{} train / {} test triples, {} drops",
        output.stats.train_triples,
        output.stats.test_triples,
        output.stats.dropped
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OrpoRecord {
    chosen_logprobs: Vec<f64>,
    rejected_logprobs: Vec<f64>,
}

#[derive(Serialize)]
struct OrpoRow {
    line: usize,
    #[serde(flatten)]
    loss: OrpoLoss,
}

pub fn orpo_loss(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    cfg.orpo.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, line) in open(input)?.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: Some(n),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |m: String| Error::Parse {
            line: Some(n),
            message: m,
        };
        let rec: OrpoRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let chosen = ScoredCompletion::new(rec.chosen_logprobs).map_err(|e| parse_err(e.to_string()))?;
        let rejected = ScoredCompletion::new(rec.rejected_logprobs).map_err(|e| parse_err(e.to_string()))?;
        rows.push(OrpoRow {
            line: n,
            loss: odds_ratio_loss(&chosen, &rejected, &cfg.orpo)?,
        });
    }
    let mean = |f: fn(&OrpoLoss) -> f64| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| f(&r.loss)).sum::<f64>() / rows.len() as f64
        }
    };
    let aggregate = json!({
        "records": rows.len(),
        "mean_total": mean(|l| l.total),
        "mean_nll": mean(|l| l.nll),
        "mean_or_term": mean(|l| l.or_term),
    });
    emit(out, &json!({ "config": cfg.echo(), "records": rows, "aggregate": aggregate }))
}

pub fn eval_pii(cfg: &RunConfig, model: &Path, samples: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let spec = cfg.guidance.spec()?;
    if cfg.decode.max_new_tokens == 0 {
        return Err(CliError::Usage("max_new_tokens must be at least 1".into()));
    }
    let det = detector(cfg)?;
    let model = TabularLM::load(model)?;
    let samples = read_samples(open(samples)?)?;
    let eval_cfg = PiiEvalConfig {
        max_new_tokens: cfg.decode.max_new_tokens,
        workers: cfg.workers,
    };
    let report = run_pii_eval(&model, &samples, &spec, &det, &eval_cfg, cfg.echo())?;
    emit(out, &serde_json::to_value(&report).map_err(Error::from)?)
}

pub fn eval_judge(cfg: &RunConfig, api_key: Option<String>, items: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let items = read_qa_items(open(items)?)?;
    let client = client(cfg, api_key)?;
    let report = run_judge_eval(&items, &client, &cfg.judge_config(), cfg.echo())?;
    emit(out, &serde_json::to_value(&report).map_err(Error::from)?)
}
