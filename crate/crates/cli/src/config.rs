//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! then by command-line flags. The API key is read from the environment
//! only and never stored here, so the whole struct can be echoed into
//! outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearn_core::api::RetryPolicy;
use unlearn_core::dataset::generate::{GenerationConfig, Recipe, DEFAULT_CHAT_MODEL, DEFAULT_COMPLETION_MODEL};
use unlearn_core::dataset::triples::{LengthLimits, LengthUnit, TripleConfig, DEFAULT_EOS_MARKER};
use unlearn_core::dataset::PipelineConfig;
use unlearn_core::eval::JudgeConfig;
use unlearn_core::guidance::{GuidanceSpec, LogInput, Variant};
use unlearn_core::model_arith::ReluSign;
use unlearn_core::orpo::OrpoConfig;
use unlearn_core::pii::LabelPolicy;
use unlearn_core::prompts::GENERATION_TEMPERATURE;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub api: ApiSection,
    pub guidance: GuidanceSection,
    pub decode: DecodeSection,
    pub pii: PiiSection,
    pub dataset: DatasetSection,
    pub orpo: OrpoConfig,
    pub subtract: SubtractSection,
    pub judge: JudgeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 4,
            api: ApiSection::default(),
            guidance: GuidanceSection::default(),
            decode: DecodeSection::default(),
            pii: PiiSection::default(),
            dataset: DatasetSection::default(),
            orpo: OrpoConfig::default(),
            subtract: SubtractSection::default(),
            judge: JudgeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApiSection {
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for ApiSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub variant: Variant,
    pub gamma: f64,
    /// Defaults to the avoid-PII sentence when unset.
    pub positive_condition: Option<String>,
    /// Defaults to the share-PII sentence (empty for `uncond-log`).
    pub negative_condition: Option<String>,
    pub raw_logits: bool,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            variant: Variant::DualProb,
            gamma: 3.0,
            positive_condition: None,
            negative_condition: None,
            raw_logits: false,
        }
    }
}

impl GuidanceSection {
    pub fn spec(&self) -> Result<GuidanceSpec, CliError> {
        let usage = |e: unlearn_core::Error| CliError::Usage(e.to_string());
        let mut spec = GuidanceSpec::new(self.gamma, self.variant).map_err(usage)?;
        let pos = self.positive_condition.clone().unwrap_or(spec.positive_condition.clone());
        let neg = self.negative_condition.clone().unwrap_or(spec.negative_condition.clone());
        spec = spec.with_conditions(pos, neg).map_err(usage)?;
        if self.raw_logits {
            spec = spec.with_log_input(LogInput::RawLogits);
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub max_new_tokens: usize,
    pub mode: ModeName,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            mode: ModeName::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiiSection {
    /// Directory of `<LABEL>.txt` gazetteers; patterns only when unset.
    pub gazetteers: Option<PathBuf>,
    pub exclude: Vec<String>,
}

impl Default for PiiSection {
    fn default() -> Self {
        Self {
            gazetteers: None,
            exclude: LabelPolicy::default().excluded.iter().map(|l| l.to_string()).collect(),
        }
    }
}

impl PiiSection {
    pub fn policy(&self) -> Result<LabelPolicy, CliError> {
        LabelPolicy::parse_list(&self.exclude.join(",")).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub split_ratio: f64,
    pub cfg_augment: bool,
    pub eos_marker: String,
    pub completion_model: String,
    pub chat_model: String,
    pub temperature: f64,
    pub candidates_per_recipe: usize,
    pub recipes: Vec<Recipe>,
    pub max_prompt: usize,
    pub max_total: usize,
    pub length_unit: LengthUnit,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let limits = LengthLimits::default();
        Self {
            split_ratio: unlearn_core::dataset::expand::DEFAULT_SPLIT_RATIO,
            cfg_augment: false,
            eos_marker: DEFAULT_EOS_MARKER.into(),
            completion_model: DEFAULT_COMPLETION_MODEL.into(),
            chat_model: DEFAULT_CHAT_MODEL.into(),
            temperature: GENERATION_TEMPERATURE,
            candidates_per_recipe: 1,
            recipes: Recipe::ALL.to_vec(),
            max_prompt: limits.max_prompt,
            max_total: limits.max_total,
            length_unit: limits.unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubtractSection {
    pub alpha: f64,
    /// Keep only deltas of this sign before negating.
    pub relu: Option<ReluSign>,
}

impl Default for SubtractSection {
    fn default() -> Self {
        Self { alpha: 1.0, relu: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    pub model: String,
    pub temperature: f64,
}

impl Default for JudgeSection {
    fn default() -> Self {
        let j = JudgeConfig::default();
        Self {
            model: j.model,
            temperature: j.temperature,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let d = &self.dataset;
        PipelineConfig {
            split_ratio: d.split_ratio,
            seed: self.seed,
            triples: TripleConfig {
                cfg_augment: d.cfg_augment,
                eos_marker: d.eos_marker.clone(),
            },
            limits: LengthLimits {
                max_prompt: d.max_prompt,
                max_total: d.max_total,
                unit: d.length_unit,
            },
            generation: GenerationConfig {
                completion_model: d.completion_model.clone(),
                chat_model: d.chat_model.clone(),
                temperature: d.temperature,
                candidates_per_recipe: d.candidates_per_recipe,
                recipes: d.recipes.clone(),
                workers: self.workers,
            },
        }
    }

    pub fn judge_config(&self) -> JudgeConfig {
        JudgeConfig {
            model: self.judge.model.clone(),
            temperature: self.judge.temperature,
            workers: self.workers,
        }
    }
}
