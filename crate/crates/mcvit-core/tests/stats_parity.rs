//! The analytic cost model must agree exactly with the instrumented
//! shape-derived counters of real forward passes, for every variant and
//! policy.

use mcvit_core::consolidation::{ConsolidationConfig, ConsolidationMethod, MemoryPolicy};
use mcvit_core::profiler::cost_of_variant;
use mcvit_core::runtime::{run, ModelConfig, ModelParams, Variant};
use mcvit_core::tokenizer::{PatchConfig, SegmentPlan};
use mcvit_core::SplitRng;

fn check(cfg: &ModelConfig, total: usize, seed: u64) {
    let patch = PatchConfig::new(1, 1, 1, 1, cfg.embed_dim).unwrap();
    let mut rng = SplitRng::new(seed);
    let params = ModelParams::init(&patch, total, cfg, &mut rng);
    let tokens = rng.normal_tensor(vec![total, cfg.embed_dim], 1.0);
    let (_, stats) = run(&tokens, &params, cfg).unwrap();
    let analytic = cost_of_variant(cfg, total, None).unwrap();
    assert_eq!(stats.attention_flops, analytic.attention_flops, "{:?}", cfg.variant);
    assert_eq!(stats.projection_flops, analytic.projection_flops, "{:?}", cfg.variant);
    assert_eq!(stats.mlp_flops, analytic.mlp_flops, "{:?}", cfg.variant);
    assert_eq!(
        stats.peak_attention_elements, analytic.peak_attention_elements,
        "{:?}",
        cfg.variant
    );
    assert_eq!(
        stats.peak_resident_tokens, analytic.peak_resident_tokens,
        "{:?}",
        cfg.variant
    );
}

#[test]
fn analytic_counts_match_instrumentation_for_every_variant() {
    let total = 24;
    let segments = 4;
    for variant in [
        Variant::Joint,
        Variant::Streaming,
        Variant::MemoryAugmented,
        Variant::MemoryConsolidated,
    ] {
        let plan = SegmentPlan::for_tokens(total, segments).unwrap();
        let mut cfg = ModelConfig::new(variant, 2, 2, 8, plan);
        cfg.consolidation = ConsolidationConfig::new(ConsolidationMethod::Random, 3, 11);
        check(&cfg, total, 21);
    }
}

#[test]
fn analytic_counts_match_instrumentation_under_bounded_policies() {
    let total = 48;
    let segments = 8;
    for policy in [
        MemoryPolicy::Unbounded,
        MemoryPolicy::LastN { segments: 2 },
        MemoryPolicy::GlobalRandom { cap_tokens: 7 },
    ] {
        let plan = SegmentPlan::for_tokens(total, segments).unwrap();
        let mut cfg = ModelConfig::new(Variant::MemoryConsolidated, 3, 2, 8, plan);
        cfg.consolidation = ConsolidationConfig::new(ConsolidationMethod::KMeans, 4, 13);
        cfg.policy = policy;
        check(&cfg, total, 22);
    }
}

#[test]
fn joint_and_mc_peak_ratio_is_exact() {
    // Measured peak score-matrix scalars must reproduce the analytic ratio
    // exactly at s = 8.
    let total = 64;
    let segments = 8;
    let plan = SegmentPlan::for_tokens(total, segments).unwrap();
    let mut mc = ModelConfig::new(Variant::MemoryConsolidated, 1, 2, 8, plan.clone());
    mc.consolidation = ConsolidationConfig::new(ConsolidationMethod::Random, 2, 14);
    let joint = ModelConfig::new(Variant::Joint, 1, 2, 8, plan);

    let patch = PatchConfig::new(1, 1, 1, 1, 8).unwrap();
    let mut rng = SplitRng::new(23);
    let params = ModelParams::init(&patch, total, &joint, &mut rng);
    let tokens = rng.normal_tensor(vec![total, 8], 1.0);

    let (_, joint_stats) = run(&tokens, &params, &joint).unwrap();
    let (_, mc_stats) = run(&tokens, &params, &mc).unwrap();
    let joint_analytic = cost_of_variant(&joint, total, None).unwrap();
    let mc_analytic = cost_of_variant(&mc, total, None).unwrap();
    assert_eq!(
        joint_stats.peak_attention_elements * mc_analytic.peak_attention_elements,
        mc_stats.peak_attention_elements * joint_analytic.peak_attention_elements
    );
}
