//! Task vectors and forgetting via negation.
//!
//! A task vector is the elementwise difference `finetuned − base`. Negation
//! subtracts a scaled task vector from the base model:
//! `out = base − α · δ`. Optionally the deltas are rectified first.
//!
//! All arithmetic happens in f32; results are stored back in the base
//! tensor's dtype with round-to-nearest-even.

pub mod safetensors;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};
pub use safetensors::{Checkpoint, CheckpointReader, CheckpointWriter, DType, Header, NamedTensor, TensorInfo};

/// Which deltas survive rectification. Which sign carries the fine-tuned
/// behaviour is model dependent, so both are offered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReluSign {
    /// `max(0, δ)`
    #[default]
    Positive,
    /// `min(0, δ)`
    Negative,
}

impl ReluSign {
    fn apply(self, d: f32) -> f32 {
        match self {
            ReluSign::Positive => d.max(0.0),
            ReluSign::Negative => d.min(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    /// F32 deltas in base-checkpoint order.
    pub tensors: Vec<NamedTensor>,
    /// `(base id, finetuned id)`.
    pub source_pair: (String, String),
}

impl TaskVector {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: Some(vec![
                ("base".into(), self.source_pair.0.clone()),
                ("finetuned".into(), self.source_pair.1.clone()),
            ]),
            tensors: self.tensors.clone(),
        }
    }
}

/// Checks that two tensor listings have the same names and shapes.
/// Dtypes may differ.
pub fn check_compatible<'a>(
    base: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    other: impl IntoIterator<Item = (&'a str, &'a [usize])>,
) -> Result<()> {
    let base: Vec<_> = base.into_iter().collect();
    let other: Vec<_> = other.into_iter().collect();
    let base_names: BTreeSet<&str> = base.iter().map(|(n, _)| *n).collect();
    let other_names: BTreeSet<&str> = other.iter().map(|(n, _)| *n).collect();
    let diff: Vec<&str> = base_names.symmetric_difference(&other_names).copied().collect();
    if !diff.is_empty() {
        return Err(Error::Structural(format!(
            "tensor names differ; present in only one checkpoint: {}",
            diff.join(", ")
        )));
    }
    for (name, shape) in &base {
        let (_, other_shape) = other.iter().find(|(n, _)| n == name).expect("same name sets");
        if shape != other_shape {
            return Err(Error::Structural(format!(
                "tensor {name:?} has shape {shape:?} in one checkpoint and {other_shape:?} in the other"
            )));
        }
    }
    Ok(())
}

fn listing(tensors: &[NamedTensor]) -> impl Iterator<Item = (&str, &[usize])> {
    tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice()))
}

fn header_listing(header: &Header) -> impl Iterator<Item = (&str, &[usize])> {
    header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice()))
}

fn delta_tensor(base: &NamedTensor, finetuned: &NamedTensor) -> Result<NamedTensor> {
    let delta: Vec<f32> = finetuned
        .values()
        .iter()
        .zip(base.values())
        .map(|(f, b)| f - b)
        .collect();
    NamedTensor::from_values(base.name.clone(), DType::F32, base.shape.clone(), &delta)
}

/// `δ[name] = finetuned[name] − base[name]` for every tensor.
pub fn extract_task_vector(base: &Checkpoint, finetuned: &Checkpoint) -> Result<TaskVector> {
    extract_task_vector_with_ids(base, finetuned, "base", "finetuned")
}

pub fn extract_task_vector_with_ids(
    base: &Checkpoint,
    finetuned: &Checkpoint,
    base_id: &str,
    finetuned_id: &str,
) -> Result<TaskVector> {
    check_compatible(listing(&base.tensors), listing(&finetuned.tensors))?;
    let tensors = base
        .tensors
        .iter()
        .map(|b| delta_tensor(b, finetuned.tensor(&b.name).expect("checked")))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskVector {
        tensors,
        source_pair: (base_id.to_string(), finetuned_id.to_string()),
    })
}

fn relu_tensor(t: &NamedTensor, sign: ReluSign) -> NamedTensor {
    let values: Vec<f32> = t.values().into_iter().map(|d| sign.apply(d)).collect();
    NamedTensor::from_values(t.name.clone(), DType::F32, t.shape.clone(), &values)
        .expect("same shape")
}

/// Rectifies every delta. Idempotent.
pub fn relu_filter(tv: &TaskVector, sign: ReluSign) -> TaskVector {
    TaskVector {
        tensors: tv.tensors.iter().map(|t| relu_tensor(t, sign)).collect(),
        source_pair: tv.source_pair.clone(),
    }
}

fn negate_tensor(base: &NamedTensor, delta: &NamedTensor, alpha: f32) -> Result<NamedTensor> {
    let out: Vec<f32> = base
        .values()
        .iter()
        .zip(delta.values())
        .map(|(b, d)| b - alpha * d)
        .collect();
    NamedTensor::from_values(base.name.clone(), base.dtype, base.shape.clone(), &out)
}

fn check_alpha(alpha: f64) -> Result<f32> {
    if !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be finite, got {alpha}")));
    }
    Ok(alpha as f32)
}

/// `out[name] = base[name] − α · δ[name]`, stored in the base dtype.
pub fn apply_negation(base: &Checkpoint, tv: &TaskVector, alpha: f64) -> Result<Checkpoint> {
    let alpha = check_alpha(alpha)?;
    check_compatible(listing(&base.tensors), listing(&tv.tensors))?;
    let tensors = base
        .tensors
        .iter()
        .map(|b| negate_tensor(b, tv.tensor(&b.name).expect("checked"), alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        metadata: base.metadata.clone(),
        tensors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegationSummary {
    pub tensors: usize,
    pub parameters: usize,
    pub alpha: f64,
    pub relu: Option<ReluSign>,
}

/// Streams `base − α · relu?(finetuned − base)` into `out`, one tensor
/// resident at a time. Names and shapes are validated from the headers
/// before the output file is created.
pub fn negate_files(
    base: impl AsRef<Path>,
    finetuned: impl AsRef<Path>,
    out: impl AsRef<Path>,
    alpha: f64,
    relu: Option<ReluSign>,
) -> Result<NegationSummary> {
    negate_files_with_metadata(base, finetuned, out, alpha, relu, Vec::new())
}

/// [`negate_files`], adding `extra` entries to the output header metadata.
/// Keys already present in the base metadata are overwritten.
pub fn negate_files_with_metadata(
    base: impl AsRef<Path>,
    finetuned: impl AsRef<Path>,
    out: impl AsRef<Path>,
    alpha: f64,
    relu: Option<ReluSign>,
    extra: Vec<(String, String)>,
) -> Result<NegationSummary> {
    let alpha32 = check_alpha(alpha)?;
    let mut base = CheckpointReader::open(base)?;
    let mut finetuned = CheckpointReader::open(finetuned)?;
    check_compatible(header_listing(base.header()), header_listing(finetuned.header()))?;

    let mut metadata = base.header().metadata.clone();
    if !extra.is_empty() {
        let m = metadata.get_or_insert_with(Vec::new);
        for (k, v) in extra {
            m.retain(|(key, _)| *key != k);
            m.push((k, v));
        }
    }
    let out_header = Header::layout(
        metadata,
        base.header()
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.dtype, t.shape.clone())),
    )?;
    let names: Vec<String> = out_header.tensors.iter().map(|t| t.name.clone()).collect();
    let mut writer = CheckpointWriter::create(out, out_header)?;
    let mut parameters = 0;
    for name in &names {
        let b = base.read(name)?;
        let f = finetuned.read(name)?;
        let mut delta = delta_tensor(&b, &f)?;
        if let Some(sign) = relu {
            delta = relu_tensor(&delta, sign);
        }
        parameters += b.numel();
        writer.write_tensor(&negate_tensor(&b, &delta, alpha32)?)?;
    }
    writer.finish()?;
    Ok(NegationSummary {
        tensors: names.len(),
        parameters,
        alpha,
        relu,
    })
}
