//! JSON run configuration.
//!
//! One document drives every subcommand; each command reads the sections it
//! needs. Unknown keys are rejected everywhere, and training keys reuse the
//! fine-tuning table's names (`base_learning_rate`, `linear_warmup_steps`,
//! `gradient_clip`, `batch_size`, `label_smoothing`, `weight_decay_rate`,
//! `training_steps`, `memories_per_segment`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use mcvit_core::consolidation::{ConsolidationConfig, ConsolidationMethod, MemoryPolicy};
use mcvit_core::runtime::{ModelConfig, Variant, DEFAULT_MAX_JOINT_TOKENS};
use mcvit_core::tokenizer::{PatchConfig, SegmentPlan, DEFAULT_FRAMES_PER_SEGMENT};
use mcvit_core::train::{SyntheticTaskConfig, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub video: Option<VideoSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
    #[serde(default)]
    pub gradcheck: Option<GradCheckSection>,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub mlp_hidden_dim: Option<usize>,
    #[serde(default)]
    pub max_joint_tokens: Option<usize>,
    #[serde(default)]
    pub backprop_through_memory: bool,
    /// Segment count when the input is an already-embedded token file.
    #[serde(default)]
    pub token_segments: Option<usize>,
    /// Interpolate the positional table when the input length differs from
    /// the table (used with loaded checkpoints).
    #[serde(default = "default_true")]
    pub interpolate_positional: bool,
    #[serde(default)]
    pub consolidation: Option<ConsolidationSection>,
    #[serde(default)]
    pub memory_policy: Option<PolicySection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsolidationSection {
    pub method: String,
    pub memories_per_segment: usize,
    #[serde(default)]
    pub kmeans_iters: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PolicySection {
    #[serde(rename = "unbounded")]
    Unbounded,
    #[serde(rename = "last_n")]
    LastN { segments: usize },
    #[serde(rename = "global_random")]
    GlobalRandom { cap_tokens: usize },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSection {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub patch_frames: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    #[serde(default = "default_frames_per_segment")]
    pub frames_per_segment: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    pub base_learning_rate: f64,
    #[serde(default)]
    pub linear_warmup_steps: usize,
    #[serde(default = "default_gradient_clip")]
    pub gradient_clip: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub weight_decay_rate: f64,
    pub training_steps: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub normalize_embeddings: bool,
    pub classes: usize,
    pub motif_segments: [usize; 2],
    #[serde(default = "default_amplitude")]
    pub motif_amplitude: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Held-out samples evaluated after training (0 disables).
    #[serde(default)]
    pub eval_samples: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub frames: Vec<usize>,
    #[serde(default = "default_true")]
    pub include_patch_embed: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_gc_batch")]
    pub batch_size: usize,
    /// Test fixture: corrupt the analytic gradient so the check must fail.
    #[serde(default)]
    pub corrupt_analytic: bool,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            step: default_step(),
            tolerance: default_tolerance(),
            batch_size: default_gc_batch(),
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub tokens_output: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub bench_csv: Option<PathBuf>,
    /// Checkpoint manifest to initialize parameters from.
    #[serde(default)]
    pub params: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}
fn default_channels() -> usize {
    1
}
fn default_frames_per_segment() -> usize {
    DEFAULT_FRAMES_PER_SEGMENT
}
fn default_optimizer() -> String {
    String::from("adamw")
}
fn default_gradient_clip() -> f64 {
    2.0
}
fn default_temperature() -> f64 {
    1.0
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.25
}
fn default_step() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_gc_batch() -> usize {
    2
}

/// FNV-1a over the raw config bytes; recorded in manifests so outputs are
/// traceable to the exact configuration text.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub struct LoadedConfig {
    pub config: RunConfig,
    pub config_hash: u64,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_slice(&bytes)?;
    Ok(LoadedConfig {
        config,
        config_hash: fnv1a(&bytes),
    })
}

pub fn parse_variant(name: &str) -> Result<Variant> {
    match name {
        "joint" => Ok(Variant::Joint),
        "streaming" => Ok(Variant::Streaming),
        "memory_augmented" => Ok(Variant::MemoryAugmented),
        "memory_consolidated" => Ok(Variant::MemoryConsolidated),
        other => Err(CliError::config(format!(
            "unknown variant {other:?} (expected joint, streaming, memory_augmented, memory_consolidated)"
        ))),
    }
}

pub fn parse_method(name: &str) -> Result<ConsolidationMethod> {
    match name {
        "none" => Ok(ConsolidationMethod::None),
        "random" => Ok(ConsolidationMethod::Random),
        "coreset" => Ok(ConsolidationMethod::Coreset),
        "kmeans" => Ok(ConsolidationMethod::KMeans),
        other => Err(CliError::config(format!(
            "unknown consolidation method {other:?}"
        ))),
    }
}

impl ModelSection {
    pub fn policy(&self) -> MemoryPolicy {
        match &self.memory_policy {
            None | Some(PolicySection::Unbounded) => MemoryPolicy::Unbounded,
            Some(PolicySection::LastN { segments }) => MemoryPolicy::LastN {
                segments: *segments,
            },
            Some(PolicySection::GlobalRandom { cap_tokens }) => MemoryPolicy::GlobalRandom {
                cap_tokens: *cap_tokens,
            },
        }
    }

    /// Assemble a validated core model config for the given segment plan.
    pub fn to_model_config(&self, plan: SegmentPlan, seed: u64) -> Result<ModelConfig> {
        let variant = parse_variant(&self.variant)?;
        let mut cfg = ModelConfig::new(variant, self.layers, self.heads, self.embed_dim, plan);
        if let Some(hidden) = self.mlp_hidden_dim {
            cfg.mlp_hidden = hidden;
        }
        cfg.max_joint_tokens = self.max_joint_tokens.unwrap_or(DEFAULT_MAX_JOINT_TOKENS);
        cfg.backprop_through_memory = self.backprop_through_memory;
        if let Some(c) = &self.consolidation {
            let mut consolidation =
                ConsolidationConfig::new(parse_method(&c.method)?, c.memories_per_segment, seed);
            if let Some(iters) = c.kmeans_iters {
                consolidation.kmeans_iters = iters;
            }
            cfg.consolidation = consolidation;
        } else if variant == Variant::MemoryConsolidated {
            return Err(CliError::config(
                "memory_consolidated requires a model.consolidation section",
            ));
        }
        cfg.policy = self.policy();
        cfg.validate()?;
        Ok(cfg)
    }
}

impl VideoSection {
    pub fn patch_config(&self, embed_dim: usize) -> Result<PatchConfig> {
        PatchConfig::new(
            self.patch_frames,
            self.patch_height,
            self.patch_width,
            self.channels,
            embed_dim,
        )
        .map_err(CliError::from)
    }

    pub fn segment_plan(&self, patch: &PatchConfig) -> Result<SegmentPlan> {
        SegmentPlan::for_video(
            patch,
            self.frames,
            self.height,
            self.width,
            self.frames_per_segment,
        )
        .map_err(CliError::from)
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        if self.optimizer != "adamw" {
            return Err(CliError::config(format!(
                "unsupported optimizer {:?} (only adamw)",
                self.optimizer
            )));
        }
        Ok(TrainConfig {
            training_steps: self.training_steps,
            batch_size: self.batch_size,
            base_learning_rate: self.base_learning_rate,
            linear_warmup_steps: self.linear_warmup_steps,
            gradient_clip: self.gradient_clip,
            weight_decay_rate: self.weight_decay_rate,
            label_smoothing: self.label_smoothing,
            temperature: self.temperature,
            normalize_embeddings: self.normalize_embeddings,
            seed,
        })
    }

    pub fn to_task_config(&self, video: &VideoSection, seed: u64) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            classes: self.classes,
            frames: video.frames,
            height: video.height,
            width: video.width,
            channels: video.channels,
            frames_per_segment: video.frames_per_segment,
            motif_segments: (self.motif_segments[0], self.motif_segments[1]),
            motif_amplitude: self.motif_amplitude,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"seed": 1, "model": {"variant": "joint", "layers": 1, "heads": 1, "embed_dim": 4, "typo_key": 3}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let json = r#"{"seed": 1, "unknown_top": true, "model": {"variant": "joint", "layers": 1, "heads": 1, "embed_dim": 4}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn minimal_config_parses() {
        let json = r#"{"seed": 7, "model": {"variant": "joint", "layers": 2, "heads": 2, "embed_dim": 8}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.model.interpolate_positional);
    }

    #[test]
    fn fnv1a_is_stable() {
        // Reference value of FNV-1a("hello").
        assert_eq!(fnv1a(b"hello"), 0xa430d84680aabd0b);
    }

    #[test]
    fn mc_variant_requires_consolidation() {
        let json = r#"{"seed": 1, "model": {"variant": "memory_consolidated", "layers": 1, "heads": 1, "embed_dim": 4}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        let plan = SegmentPlan::for_tokens(8, 2).unwrap();
        assert!(cfg.model.to_model_config(plan, 1).is_err());
    }
}
