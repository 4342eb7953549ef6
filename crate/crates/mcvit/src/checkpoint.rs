//! Checkpoints (raw-tensor files plus a JSON manifest), metrics CSV, and
//! the bench CSV schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mcvit_core::runtime::ModelParams;
use mcvit_core::train::StepMetrics;
use mcvit_core::Tensor;

use crate::error::{CliError, Result};
use crate::format;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub config_fnv1a: String,
    pub classes: usize,
    pub params: Vec<ParamEntry>,
    pub captions_file: String,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Write every parameter tensor and the caption table under `dir`, with a
/// `manifest.json` describing them.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    captions: &Tensor,
    seed: u64,
    config_hash: u64,
    last_metrics: Option<&StepMetrics>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut failure: Option<CliError> = None;
    params.for_each_param(|name, tensor, trainable| {
        if failure.is_some() {
            return;
        }
        let file = format!("{name}.mcvt");
        if let Err(e) = format::write_tensor(&dir.join(&file), tensor) {
            failure = Some(e);
            return;
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: tensor.shape().to_vec(),
            trainable,
        });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    format::write_tensor(&dir.join("captions.mcvt"), captions)?;
    let manifest = CheckpointManifest {
        seed,
        config_fnv1a: format!("{config_hash:#018x}"),
        classes: captions.rows(),
        params: entries,
        captions_file: String::from("captions.mcvt"),
        final_loss: last_metrics.map(|m| m.loss),
        final_accuracy: last_metrics.map(|m| m.accuracy),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    format::write_atomic(&dir.join("manifest.json"), &json)
}

/// Load a checkpoint into an initialized parameter struct of the same
/// architecture; shapes must match exactly.
pub fn load_checkpoint(manifest_path: &Path, params: &mut ModelParams) -> Result<Tensor> {
    let dir = manifest_path
        .parent()
        .ok_or_else(|| CliError::io("checkpoint manifest has no parent directory"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let mut by_name = std::collections::BTreeMap::new();
    for entry in &manifest.params {
        by_name.insert(entry.name.clone(), entry);
    }
    let mut failure: Option<CliError> = None;
    params.for_each_param_mut(|name, tensor, _| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(name) else {
            failure = Some(CliError::io(format!("checkpoint is missing {name}")));
            return;
        };
        // The positional table may come from a different video length; it
        // is loaded at its stored length and interpolated by the caller.
        let rows_may_differ = name == "embed.positional";
        match format::read_tensor(&dir.join(&entry.file)) {
            Ok(loaded)
                if loaded.shape() == tensor.shape()
                    || (rows_may_differ
                        && loaded.rank() == 2
                        && loaded.cols() == tensor.cols()) =>
            {
                *tensor = loaded
            }
            Ok(loaded) => {
                failure = Some(CliError::io(format!(
                    "{name}: checkpoint shape {:?} does not match model {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(CliError::io(format!(
            "checkpoint parameter {extra} does not exist in this model"
        )));
    }
    format::read_tensor(&dir.join(&manifest.captions_file))
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("step,loss,accuracy\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.step, m.loss, m.accuracy));
    }
    out
}

pub const BENCH_CSV_HEADER: &str =
    "variant,frames,segments,K,attention_flops,projection_flops,mlp_flops,peak_attention_elements,peak_resident_tokens";

pub fn bench_csv(rows: &[mcvit_core::profiler::SweepRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.variant.name(),
            row.frames,
            row.segments,
            row.memories_per_segment,
            row.report.attention_flops,
            row.report.projection_flops,
            row.report.mlp_flops,
            row.report.peak_attention_elements,
            row.report.peak_resident_tokens,
        ));
    }
    out
}
