//! `unlearn`: command-line entry point for the unlearning toolkit.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 structural or
//! data error, 3 external-service error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unlearn_core::guidance::Variant;
use unlearn_core::model_arith::ReluSign;

use crate::config::{ModeName, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(unlearn_core::Error),
}

impl From<unlearn_core::Error> for CliError {
    fn from(e: unlearn_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use unlearn_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::ExternalService(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "unlearn", version, about = "Guided decoding, task-vector negation and PII-aware preference data for LLM unlearning")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for request and evaluation parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Seed for splitting and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forget a fine-tune by subtracting its scaled task vector from the base.
    Subtract(SubtractArgs),
    /// Decode prompts with a tabular model under guidance.
    Generate(GenerateArgs),
    /// Build preference triples from PII-bearing dialogues.
    BuildDataset(BuildDatasetArgs),
    /// Compute the odds-ratio preference loss from token log-probabilities.
    OrpoLoss(OrpoArgs),
    /// Evaluation drivers.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
struct SubtractArgs {
    /// Base checkpoint (safetensors).
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint (safetensors).
    #[arg(long)]
    finetuned: PathBuf,
    /// Scaling coefficient for the task vector.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Keep only deltas of one sign before negating (default sign: positive).
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "positive")]
    relu: Option<ReluArg>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ReluArg {
    Positive,
    Negative,
}

impl From<ReluArg> for ReluSign {
    fn from(r: ReluArg) -> Self {
        match r {
            ReluArg::Positive => ReluSign::Positive,
            ReluArg::Negative => ReluSign::Negative,
        }
    }
}

#[derive(Debug, Args, Default)]
struct GuidanceArgs {
    /// Guidance rule.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Guidance coefficient (finite, >= 0).
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Sentence appended to the system prompt of the positive context.
    #[arg(long)]
    positive_condition: Option<String>,
    /// Sentence appended to the system prompt of the negative context.
    #[arg(long)]
    negative_condition: Option<String>,
    /// Extrapolate raw logits instead of log-softmax outputs.
    #[arg(long)]
    raw_logits: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: unlearn_core::Error| e.to_string())
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Tabular model (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Prompts as JSONL lines of {"id", "prompt"}.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Token selection.
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Record per-step score vectors.
    #[arg(long)]
    trace: bool,
    /// Output JSON file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildDatasetArgs {
    /// Dialogues as JSONL lines of {"id", "messages": [{"role", "content"}]}.
    #[arg(long)]
    dialogues: PathBuf,
    /// Gazetteer directory.
    #[arg(long)]
    gazetteers: Option<PathBuf>,
    /// OpenAI-compatible server root. The key is read from UNLEARN_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    /// Add the condition-sentence variants of every triple.
    #[arg(long)]
    cfg: bool,
    /// Use cached candidates only; never contact the API.
    #[arg(long, requires = "cache")]
    offline: bool,
    /// Candidate cache (JSONL) written by an earlier run.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    eos_marker: Option<String>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct OrpoArgs {
    /// JSONL lines of {"chosen_logprobs": [...], "rejected_logprobs": [...]}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    /// Sum token log-probs instead of averaging them in the odds term.
    #[arg(long)]
    no_length_normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Count PII in guided greedy completions.
    Pii(EvalPiiArgs),
    /// Score answers with an external judge model.
    Judge(EvalJudgeArgs),
}

#[derive(Debug, Args)]
struct EvalPiiArgs {
    #[arg(long)]
    model: PathBuf,
    /// Samples as JSONL lines of {"id", "prompt"}.
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long)]
    gazetteers: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalJudgeArgs {
    /// JSONL lines of {"id", "question", "correct_answer", "answer"}.
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    endpoint: Option<String>,
    /// Judge model name.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn apply_guidance(cfg: &mut RunConfig, g: &GuidanceArgs) {
    if let Some(v) = g.variant {
        cfg.guidance.variant = v;
    }
    if let Some(x) = g.gamma {
        cfg.guidance.gamma = x;
    }
    if let Some(s) = &g.positive_condition {
        cfg.guidance.positive_condition = Some(s.clone());
    }
    if let Some(s) = &g.negative_condition {
        cfg.guidance.negative_condition = Some(s.clone());
    }
    if g.raw_logits {
        cfg.guidance.raw_logits = true;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cfg.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let api_key = std::env::var(unlearn_core::api::API_KEY_ENV).ok();

    match cli.command {
        Command::Subtract(a) => {
            if let Some(x) = a.alpha {
                cfg.subtract.alpha = x;
            }
            if let Some(r) = a.relu {
                cfg.subtract.relu = Some(r.into());
            }
            commands::subtract(&cfg, &a.base, &a.finetuned, &a.out)
        }
        Command::Generate(a) => {
            apply_guidance(&mut cfg, &a.guidance);
            if let Some(m) = a.mode {
                cfg.decode.mode = m;
            }
            if let Some(n) = a.max_new_tokens {
                cfg.decode.max_new_tokens = n;
            }
            commands::generate(&cfg, &a.model, &a.prompts, a.trace, a.out.as_deref())
        }
        Command::BuildDataset(a) => {
            if let Some(g) = a.gazetteers {
                cfg.pii.gazetteers = Some(g);
            }
            if let Some(e) = a.endpoint {
                cfg.api.endpoint = Some(e);
            }
            if a.cfg {
                cfg.dataset.cfg_augment = true;
            }
            if let Some(r) = a.split_ratio {
                cfg.dataset.split_ratio = r;
            }
            if let Some(m) = a.eos_marker {
                cfg.dataset.eos_marker = m;
            }
            let cache = if a.offline { a.cache.as_deref() } else { None };
            commands::build_dataset(&cfg, api_key, &a.dialogues, cache, &a.out_dir)
        }
        Command::OrpoLoss(a) => {
            if let Some(b) = a.beta {
                cfg.orpo.beta = b;
            }
            if a.no_length_normalize {
                cfg.orpo.length_normalize = false;
            }
            commands::orpo_loss(&cfg, &a.input, a.out.as_deref())
        }
        Command::Eval(EvalCommand::Pii(a)) => {
            apply_guidance(&mut cfg, &a.guidance);
            if let Some(g) = a.gazetteers {
                cfg.pii.gazetteers = Some(g);
            }
            if let Some(n) = a.max_new_tokens {
                cfg.decode.max_new_tokens = n;
            }
            commands::eval_pii(&cfg, &a.model, &a.samples, a.out.as_deref())
        }
        Command::Eval(EvalCommand::Judge(a)) => {
            if let Some(e) = a.endpoint {
                cfg.api.endpoint = Some(e);
            }
            if let Some(m) = a.model {
                cfg.judge.model = m;
            }
            commands::eval_judge(&cfg, api_key, &a.items, a.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
