//! Analytic FLOP and peak-memory accounting for every forward variant.
//!
//! Counting convention, fixed so numbers are reproducible bit for bit:
//! one multiply-accumulate costs 2 FLOPs; softmax costs 5 FLOPs per score
//! element per head, plus 1 for the logit scaling; layer norm, GELU, and
//! residual adds are not counted. The memory proxy is the largest attention
//! score matrix (queries x keys, per head) plus the largest key/value row
//! count any attention call consults — deterministic across platforms,
//! unlike allocator bytes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::runtime::{ModelConfig, Variant};
use crate::tokenizer::{PatchConfig, SegmentPlan};

/// Attention cost for one layer: `n` queries against `m` keys at width `d`.
/// Scores and the weighted sum are `2 n m d` each; scaling and softmax add
/// `6 H n m`.
pub fn attention_flops(n: usize, m: usize, d: usize, heads: usize) -> u64 {
    (n as u64) * (m as u64) * (4 * d as u64 + 6 * heads as u64)
}

/// Q and O projections over `n` rows, K and V projections over `m` rows.
pub fn projection_flops(n: usize, m: usize, d: usize) -> u64 {
    4 * (d as u64) * (d as u64) * (n as u64 + m as u64)
}

/// Two matmuls around the activation.
pub fn mlp_flops(n: usize, d: usize, hidden: usize) -> u64 {
    4 * (n as u64) * (d as u64) * (hidden as u64)
}

/// Patch projection of the whole video.
pub fn patch_embed_flops(tokens: usize, patch_dim: usize, d: usize) -> u64 {
    2 * (tokens as u64) * (patch_dim as u64) * (d as u64)
}

/// Exact shape-derived counts for one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub attention_flops: u64,
    pub projection_flops: u64,
    pub mlp_flops: u64,
    pub peak_attention_elements: u64,
    pub peak_resident_tokens: u64,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.attention_flops + self.projection_flops + self.mlp_flops
    }
}

/// Queries/keys row counts per segment for a variant, the quantity every
/// cost below is derived from.
fn segment_key_counts(variant: Variant, total: usize, segments: usize, k: usize, cap: Option<usize>) -> Vec<(usize, usize)> {
    let n = total / segments;
    match variant {
        Variant::Joint => alloc::vec![(total, total)],
        Variant::Streaming => (0..segments).map(|_| (n, n)).collect(),
        Variant::MemoryAugmented => (0..segments).map(|tau| (n, n + tau * n)).collect(),
        Variant::MemoryConsolidated => (0..segments)
            .map(|tau| {
                let stored = tau * k;
                let resident = cap.map_or(stored, |c| stored.min(c));
                (n, n + resident)
            })
            .collect(),
    }
}

/// Closed-form cost of running `cfg` over `total_tokens` tokens. When
/// `patch_dim` is given, the initial patch projection is included in
/// `projection_flops`.
pub fn cost_of_variant(cfg: &ModelConfig, total_tokens: usize, patch_dim: Option<usize>) -> Result<CostReport> {
    cfg.validate()?;
    let segments = match cfg.variant {
        Variant::Joint => 1,
        _ => {
            if cfg.plan.total_tokens() != total_tokens {
                return Err(CoreError::config(format!(
                    "{total_tokens} tokens do not match the segment plan ({} x {})",
                    cfg.plan.segments, cfg.plan.tokens_per_segment
                )));
            }
            cfg.plan.segments
        }
    };
    let pairs = segment_key_counts(
        cfg.variant,
        total_tokens,
        segments,
        cfg.consolidation.memories_per_segment,
        cfg.memory_cap(),
    );
    let mut report = CostReport::default();
    for &(n, m) in &pairs {
        report.attention_flops += cfg.layers as u64 * attention_flops(n, m, cfg.embed_dim, cfg.heads);
        report.projection_flops += cfg.layers as u64 * projection_flops(n, m, cfg.embed_dim);
        report.mlp_flops += cfg.layers as u64 * mlp_flops(n, cfg.embed_dim, cfg.mlp_hidden);
        report.peak_attention_elements = report.peak_attention_elements.max((n * m) as u64);
        report.peak_resident_tokens = report.peak_resident_tokens.max(m as u64);
    }
    if let Some(p) = patch_dim {
        report.projection_flops += patch_embed_flops(total_tokens, p, cfg.embed_dim);
    }
    Ok(report)
}

/// Model and geometry shared by every row of a sweep.
#[derive(Clone, Debug)]
pub struct SweepTemplate {
    pub patch: PatchConfig,
    pub height: usize,
    pub width: usize,
    pub frames_per_segment: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub memories_per_segment: usize,
    pub policy: crate::consolidation::MemoryPolicy,
    /// Count the patch projection in each row's projection FLOPs.
    pub include_patch_embed: bool,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub variant: Variant,
    pub frames: usize,
    pub segments: usize,
    pub memories_per_segment: usize,
    pub report: CostReport,
}

pub const SWEEP_VARIANTS: [Variant; 4] = [
    Variant::Joint,
    Variant::Streaming,
    Variant::MemoryAugmented,
    Variant::MemoryConsolidated,
];

/// One row per (variant, frame count), reproducing the scaling figures'
/// x-axes as cost curves.
pub fn sweep_rows(template: &SweepTemplate, frame_counts: &[usize]) -> Result<Vec<SweepRow>> {
    if frame_counts.is_empty() {
        return Err(CoreError::EmptyInput {
            context: "sweep frame list",
        });
    }
    let mut rows = Vec::with_capacity(frame_counts.len() * SWEEP_VARIANTS.len());
    for &frames in frame_counts {
        let plan = SegmentPlan::for_video(
            &template.patch,
            frames,
            template.height,
            template.width,
            template.frames_per_segment,
        )?;
        let total = plan.total_tokens();
        for variant in SWEEP_VARIANTS {
            let mut cfg = ModelConfig::new(
                variant,
                template.layers,
                template.heads,
                template.patch.embed_dim,
                plan.clone(),
            );
            cfg.mlp_hidden = template.mlp_hidden;
            cfg.consolidation = crate::consolidation::ConsolidationConfig::new(
                crate::consolidation::ConsolidationMethod::KMeans,
                template.memories_per_segment,
                0,
            );
            cfg.policy = template.policy;
            cfg.max_joint_tokens = usize::MAX;
            let patch_dim = template.include_patch_embed.then(|| template.patch.patch_dim());
            let report = cost_of_variant(&cfg, total, patch_dim)?;
            rows.push(SweepRow {
                variant,
                frames,
                segments: plan.segments,
                memories_per_segment: template.memories_per_segment,
                report,
            });
        }
    }
    Ok(rows)
}
