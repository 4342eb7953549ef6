//! Subcommand implementations: run, bench, train, consolidate, gradcheck.

use std::path::Path;

use serde_json::json;

use mcvit_core::consolidation::{self};
use mcvit_core::gradcheck::gradcheck;
use mcvit_core::graph::VarId;
use mcvit_core::runtime::{self, ModelConfig, ModelParams, ModelVars};
use mcvit_core::tokenizer::{self, PatchConfig, SegmentPlan, VideoTensor};
use mcvit_core::train::{self, SyntheticTask, TrainState};
use mcvit_core::{SplitRng, Tensor};

use crate::checkpoint;
use crate::config::{load_config, parse_method, LoadedConfig, RunConfig};
use crate::empirical::parallel_map;
use crate::error::{CliError, Result};
use crate::format;

/// Tag for the held-out evaluation stream, distinct from every training
/// step's batch stream.
const HELDOUT_STREAM_TAG: u64 = 0xE7A1;

fn require<'a, T>(opt: &'a Option<T>, what: &str) -> Result<&'a T> {
    opt.as_ref()
        .ok_or_else(|| CliError::config(format!("missing {what}")))
}

fn validate_input_path(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(CliError::io(format!("{}: no such file", path.display())));
    }
    Ok(())
}

fn validate_output_path(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(CliError::io(format!(
                "{}: parent directory does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

/// Initialize parameters (optionally from a checkpoint) and fit the
/// positional table to the actual token count.
fn prepare_params(
    loaded: &RunConfig,
    patch: &PatchConfig,
    cfg: &ModelConfig,
    total_tokens: usize,
) -> Result<(ModelParams, Option<Tensor>)> {
    let mut rng = SplitRng::new(loaded.seed);
    let mut params = ModelParams::init(patch, total_tokens, cfg, &mut rng);
    let mut captions = None;
    if let Some(manifest) = &loaded.io.params {
        validate_input_path(manifest)?;
        captions = Some(checkpoint::load_checkpoint(manifest, &mut params)?);
    }
    if params.embed.positional.rows() != total_tokens {
        if !loaded.model.interpolate_positional {
            return Err(CliError::config(format!(
                "positional table has {} rows but the input produces {total_tokens} tokens \
                 and interpolation is disabled",
                params.embed.positional.rows()
            )));
        }
        params.embed.positional =
            tokenizer::interpolate_pos_emb(&params.embed.positional, total_tokens)?;
    }
    Ok((params, captions))
}

pub fn cmd_run(config_path: &Path) -> Result<()> {
    let LoadedConfig {
        config,
        config_hash,
    } = load_config(config_path)?;
    let input_path = require(&config.io.input, "io.input")?;
    let output_path = require(&config.io.output, "io.output")?;
    validate_input_path(input_path)?;
    validate_output_path(output_path)?;
    if let Some(p) = &config.io.manifest {
        validate_output_path(p)?;
    }
    if let Some(p) = &config.io.tokens_output {
        validate_output_path(p)?;
    }

    let input = format::read_tensor(input_path)?;
    let (embedding, stats, plan, total_tokens) = match input.rank() {
        4 => {
            let video_section = require(&config.video, "video section for rank-4 input")?;
            let shape = input.shape();
            if shape
                != [
                    video_section.frames,
                    video_section.height,
                    video_section.width,
                    video_section.channels,
                ]
            {
                return Err(CliError::io(format!(
                    "input video shape {shape:?} does not match the video section"
                )));
            }
            let patch = video_section.patch_config(config.model.embed_dim)?;
            let plan = video_section.segment_plan(&patch)?;
            let cfg = config.model.to_model_config(plan.clone(), config.seed)?;
            let video = VideoTensor::new(
                video_section.frames,
                video_section.height,
                video_section.width,
                video_section.channels,
                input.clone(),
            )?;
            let total = plan.total_tokens();
            let (params, _) = prepare_params(&config, &patch, &cfg, total)?;
            let (embedding, stats) = runtime::run_video(&video, &patch, &params, &cfg)?;
            (embedding, stats, plan, total)
        }
        2 => {
            let total = input.rows();
            if input.cols() != config.model.embed_dim {
                return Err(CliError::io(format!(
                    "token width {} does not match embed_dim {}",
                    input.cols(),
                    config.model.embed_dim
                )));
            }
            let segments = config.model.token_segments.unwrap_or(1);
            let plan = SegmentPlan::for_tokens(total, segments)?;
            let cfg = config.model.to_model_config(plan.clone(), config.seed)?;
            // Embedding weights are unused on pre-embedded tokens, but a
            // checkpoint can only load into matching shapes, so take the
            // patch geometry from the video section when it is present.
            let patch = match &config.video {
                Some(v) => v.patch_config(config.model.embed_dim)?,
                None => PatchConfig::new(1, 1, 1, 1, config.model.embed_dim)?,
            };
            let (params, _) = prepare_params(&config, &patch, &cfg, total)?;
            let (embedding, stats) = runtime::run(&input, &params, &cfg)?;
            (embedding, stats, plan, total)
        }
        r => {
            return Err(CliError::io(format!(
                "input must be a rank-4 video or rank-2 token matrix, got rank {r}"
            )))
        }
    };

    format::write_tensor(output_path, &embedding.pooled)?;
    if let Some(tokens_path) = &config.io.tokens_output {
        format::write_tensor(tokens_path, &embedding.tokens)?;
    }
    if let Some(manifest_path) = &config.io.manifest {
        let manifest = json!({
            "command": "run",
            "variant": config.model.variant,
            "seed": config.seed,
            "config_fnv1a": format!("{config_hash:#018x}"),
            "input": { "path": input_path, "shape": input.shape() },
            "tokens": total_tokens,
            "segments": plan.segments,
            "embedding": { "path": output_path, "dim": embedding.pooled.len() },
            "stats": {
                "attention_flops": stats.attention_flops,
                "projection_flops": stats.projection_flops,
                "mlp_flops": stats.mlp_flops,
                "peak_attention_elements": stats.peak_attention_elements,
                "peak_resident_tokens": stats.peak_resident_tokens,
                "per_segment_keys": stats.per_segment_keys,
            },
        });
        format::write_atomic(manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    }
    println!(
        "run: {} tokens -> {} (dim {})",
        total_tokens,
        output_path.display(),
        embedding.pooled.len()
    );
    Ok(())
}

pub fn cmd_bench(config_path: &Path) -> Result<()> {
    let LoadedConfig { config, .. } = load_config(config_path)?;
    let bench = require(&config.bench, "bench section")?;
    let video = require(&config.video, "video section")?;
    let csv_path = require(&config.io.bench_csv, "io.bench_csv")?;
    validate_output_path(csv_path)?;
    if bench.frames.is_empty() {
        return Err(CliError::config("bench.frames must be non-empty"));
    }
    let consolidation = require(&config.model.consolidation, "model.consolidation")?;
    let patch = video.patch_config(config.model.embed_dim)?;
    let template = mcvit_core::profiler::SweepTemplate {
        patch,
        height: video.height,
        width: video.width,
        frames_per_segment: video.frames_per_segment,
        layers: config.model.layers,
        heads: config.model.heads,
        mlp_hidden: config
            .model
            .mlp_hidden_dim
            .unwrap_or(4 * config.model.embed_dim),
        memories_per_segment: consolidation.memories_per_segment,
        policy: config.model.policy(),
        include_patch_embed: bench.include_patch_embed,
    };
    // One worker chunk per frame count; rows stay in input order.
    let chunks = parallel_map(bench.frames.clone(), |frames| {
        mcvit_core::profiler::sweep_rows(&template, &[frames])
    });
    let mut rows = Vec::new();
    for chunk in chunks {
        rows.extend(chunk.map_err(CliError::from)?);
    }
    format::write_atomic(csv_path, checkpoint::bench_csv(&rows).as_bytes())?;
    println!("bench: wrote {} rows to {}", rows.len(), csv_path.display());
    Ok(())
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let LoadedConfig {
        config,
        config_hash,
    } = load_config(config_path)?;
    let video = require(&config.video, "video section")?;
    let train_section = require(&config.train, "train section")?;
    let metrics_path = require(&config.io.metrics, "io.metrics")?;
    let ckpt_dir = require(&config.io.checkpoint_dir, "io.checkpoint_dir")?;
    validate_output_path(metrics_path)?;

    let patch = video.patch_config(config.model.embed_dim)?;
    let plan = video.segment_plan(&patch)?;
    let total_tokens = plan.total_tokens();
    let cfg = config.model.to_model_config(plan, config.seed)?;
    let task = SyntheticTask::new(train_section.to_task_config(video, config.seed))?;
    let train_cfg = train_section.to_train_config(config.seed)?;

    let mut rng = SplitRng::new(config.seed);
    let mut state = TrainState::init(&patch, total_tokens, &cfg, train_section.classes, &mut rng);
    if let Some(manifest) = &config.io.params {
        validate_input_path(manifest)?;
        state.captions = checkpoint::load_checkpoint(manifest, &mut state.params)?;
    }

    let metrics = train::train_loop(&mut state, &patch, &cfg, &task, &train_cfg)?;
    format::write_atomic(metrics_path, checkpoint::metrics_csv(&metrics).as_bytes())?;
    checkpoint::save_checkpoint(
        ckpt_dir,
        &state.params,
        &state.captions,
        config.seed,
        config_hash,
        metrics.last(),
    )?;

    if let Some(last) = metrics.last() {
        println!(
            "train: {} steps, final loss {:.6}, final batch accuracy {:.3}",
            metrics.len(),
            last.loss,
            last.accuracy
        );
    }
    if train_section.eval_samples > 0 {
        let mut eval_rng = SplitRng::new(config.seed).split(HELDOUT_STREAM_TAG);
        let samples: Vec<_> = (0..train_section.eval_samples)
            .map(|_| task.sample(&mut eval_rng))
            .collect();
        let accuracy =
            state.evaluate(&samples, &patch, &cfg, train_cfg.normalize_embeddings)?;
        println!(
            "eval: held-out accuracy {:.3} over {} samples",
            accuracy, train_section.eval_samples
        );
    }
    Ok(())
}

pub fn cmd_consolidate(
    method_name: &str,
    k: usize,
    input: &Path,
    output: &Path,
    seed: u64,
    kmeans_iters: usize,
) -> Result<()> {
    validate_input_path(input)?;
    validate_output_path(output)?;
    let tokens = format::read_tensor(input)?;
    if tokens.rank() != 2 {
        return Err(CliError::io(format!(
            "consolidate expects a rank-2 tensor, got rank {}",
            tokens.rank()
        )));
    }
    let method = parse_method(method_name)?;
    let mut cfg = consolidation::ConsolidationConfig::new(method, k, seed);
    cfg.kmeans_iters = kmeans_iters;
    let mut rng = SplitRng::new(seed);
    let out = consolidation::consolidate(&tokens, &cfg, &mut rng)?;
    format::write_tensor(output, &out)?;
    println!(
        "consolidate: {} of {} rows -> {}",
        out.rows(),
        tokens.rows(),
        output.display()
    );
    Ok(())
}

/// Parameter budget for gradcheck configurations; central differences cost
/// two forwards per scalar.
pub const GRADCHECK_MAX_PARAMS: usize = 5000;

pub fn cmd_gradcheck(config_path: &Path) -> Result<()> {
    let LoadedConfig { config, .. } = load_config(config_path)?;
    let video = require(&config.video, "video section")?;
    let section = config.gradcheck.unwrap_or_default();

    let patch = video.patch_config(config.model.embed_dim)?;
    let plan = video.segment_plan(&patch)?;
    let total_tokens = plan.total_tokens();
    let mut cfg = config.model.to_model_config(plan, config.seed)?;
    // Finite differences measure the executed forward; memories must stay
    // on the tape for the analytic side to match.
    cfg.backprop_through_memory = cfg.variant.uses_memory();
    cfg.validate().map_err(CliError::from)?;

    let mut rng = SplitRng::new(config.seed);
    let params = ModelParams::init(&patch, total_tokens, &cfg, &mut rng);
    let classes = section.batch_size.max(2);
    let captions = rng.normal_tensor(vec![classes, cfg.embed_dim], 1.0);
    let budget: usize = params.param_count() + captions.len();
    if budget > GRADCHECK_MAX_PARAMS {
        return Err(CliError::config(format!(
            "gradcheck configurations are capped at {GRADCHECK_MAX_PARAMS} parameters, got {budget}"
        )));
    }
    let videos: Vec<VideoTensor> = (0..section.batch_size)
        .map(|_| {
            VideoTensor::new(
                video.frames,
                video.height,
                video.width,
                video.channels,
                rng.normal_tensor(
                    vec![video.frames, video.height, video.width, video.channels],
                    0.5,
                ),
            )
            .map_err(CliError::from)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..section.batch_size).map(|i| i % classes).collect();

    let mut named: Vec<(String, Tensor)> = Vec::new();
    params.for_each_param(|name, t, _| named.push((name.to_string(), t.clone())));
    named.push((String::from("captions"), captions));
    let n_model = named.len() - 1;

    let corrupt = section.corrupt_analytic;
    let mut first_call = true;
    let build = |g: &mut mcvit_core::Graph, ids: &[VarId]| {
        let vars = ModelVars::from_ordered_ids(&params, &ids[..n_model])?;
        let captions_id = ids[n_model];
        let mut pooled = Vec::new();
        let mut texts = Vec::new();
        for (v, label) in videos.iter().zip(&labels) {
            let tokens = tokenizer::patch_embed_graph(
                g,
                v,
                &patch,
                vars.embed_projection,
                vars.embed_positional,
            )?;
            let (out, _) = runtime::forward_tokens_graph(g, tokens, &vars, &cfg)?;
            pooled.push(g.mean_rows(out)?);
            texts.push(g.slice_rows(captions_id, *label, 1)?);
        }
        let zv = g.concat_rows(&pooled)?;
        let zt = g.concat_rows(&texts)?;
        let loss = train::contrastive_loss_graph(g, zv, zt, 1.0, 0.0, true)?;
        // Test fixture: the first (analytic) evaluation sees a scaled loss,
        // so the check must report a failure.
        if corrupt && first_call {
            first_call = false;
            return Ok(g.scale(loss, 1.001));
        }
        first_call = false;
        Ok(loss)
    };
    let report = gradcheck(&named, build, section.step, section.tolerance)?;

    for entry in &report.entries {
        let status = if entry.max_rel_err <= report.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "{status:4} {:<28} max_rel_err {:.3e} (analytic {:.6e}, numeric {:.6e})",
            entry.name, entry.max_rel_err, entry.analytic_at_worst, entry.numeric_at_worst
        );
    }
    if report.passed() {
        println!(
            "gradcheck: all {} parameter groups within tolerance {:.1e}",
            report.entries.len(),
            report.tolerance
        );
        Ok(())
    } else {
        let worst = report.worst().expect("non-empty report");
        Err(CliError::CheckFailed(format!(
            "gradcheck: {} has max relative error {:.3e} above tolerance {:.1e}",
            worst.name, worst.max_rel_err, report.tolerance
        )))
    }
}
