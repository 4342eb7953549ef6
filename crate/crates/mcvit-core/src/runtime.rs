//! Forward-pass variants over a segmented token stream.
//!
//! * joint — one pass of full self-attention over every token;
//! * streaming — each segment processed independently;
//! * memory-augmented — each layer attends over the current segment plus the
//!   stored activations of every previous segment;
//! * memory-consolidated — as memory-augmented, but each segment contributes
//!   only `K` consolidated rows and a finite-memory policy may bound the
//!   bank.
//!
//! All variants share one engine. Memory rows are the post-block activations
//! of the layer that produced them, layer-normed with that layer's first
//! norm at store time and not normed again when attended. Stored memories
//! are detached from the gradient tape unless `backprop_through_memory` is
//! set (selection is then expressed as a constant row-weight matrix so
//! gradients flow into past segments).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::blocks::{self, BlockParams, BlockVars, LayerAdapterVars, LayerAdapters};
use crate::consolidation::{
    consolidate, consolidation_weights, ConsolidationConfig, ConsolidationMethod, MemoryBank,
    MemoryPolicy,
};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, VarId};
use crate::profiler;
use crate::rng::SplitRng;
use crate::tensor::{self, Tensor};
use crate::tokenizer::{EmbedParams, SegmentPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Joint,
    Streaming,
    MemoryAugmented,
    MemoryConsolidated,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::Streaming => "streaming",
            Variant::MemoryAugmented => "memory_augmented",
            Variant::MemoryConsolidated => "memory_consolidated",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Variant::MemoryAugmented | Variant::MemoryConsolidated)
    }
}

/// Default ceiling on joint-attention tokens; the quadratic blow-up becomes
/// an explicit error instead of an out-of-memory surprise.
pub const DEFAULT_MAX_JOINT_TOKENS: usize = 4096;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub plan: SegmentPlan,
    pub consolidation: ConsolidationConfig,
    pub policy: MemoryPolicy,
    pub max_joint_tokens: usize,
    pub backprop_through_memory: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, layers: usize, heads: usize, embed_dim: usize, plan: SegmentPlan) -> Self {
        ModelConfig {
            variant,
            layers,
            heads,
            embed_dim,
            mlp_hidden: 4 * embed_dim,
            plan,
            consolidation: ConsolidationConfig::new(ConsolidationMethod::KMeans, 1, 0),
            policy: MemoryPolicy::Unbounded,
            max_joint_tokens: DEFAULT_MAX_JOINT_TOKENS,
            backprop_through_memory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(CoreError::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.variant == Variant::MemoryConsolidated {
            if self.consolidation.method == ConsolidationMethod::None {
                return Err(CoreError::config(
                    "memory_consolidated requires a consolidation method",
                ));
            }
            self.consolidation.validate(self.plan.tokens_per_segment)?;
        }
        if self.backprop_through_memory && self.policy != MemoryPolicy::Unbounded {
            return Err(CoreError::config(
                "backprop_through_memory supports only the unbounded policy",
            ));
        }
        Ok(())
    }

    /// Per-layer memory cap in tokens, when bounded.
    pub fn memory_cap(&self) -> Option<usize> {
        match self.variant {
            Variant::MemoryConsolidated => self
                .policy
                .cap_tokens(self.consolidation.memories_per_segment),
            _ => None,
        }
    }
}

/// All learnable weights of one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
    pub adapters: Option<Vec<LayerAdapters>>,
}

impl ModelParams {
    pub fn init(
        patch: &crate::tokenizer::PatchConfig,
        total_tokens: usize,
        cfg: &ModelConfig,
        rng: &mut SplitRng,
    ) -> Self {
        let embed = EmbedParams::init(patch, total_tokens, rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams::init(cfg.embed_dim, cfg.mlp_hidden, rng))
            .collect();
        ModelParams {
            embed,
            blocks,
            adapters: None,
        }
    }

    /// Attach freshly initialized LoRA adapters to every layer; base weights
    /// become frozen for training from this point on.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut SplitRng) -> Result<()> {
        let d = self
            .blocks
            .first()
            .map(|b| b.embed_dim())
            .ok_or_else(|| CoreError::config("cannot attach LoRA to a 0-layer model"))?;
        let hidden = self.blocks[0].mlp_in.cols();
        let adapters = self
            .blocks
            .iter()
            .map(|_| LayerAdapters::init(d, hidden, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        self.adapters = Some(adapters);
        Ok(())
    }

    pub fn lora_active(&self) -> bool {
        self.adapters.is_some()
    }

    /// Visit every parameter tensor with a stable name and its
    /// trainability under the current adapter state (adapters active means
    /// only adapter tensors train).
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor, bool)) {
        let base = !self.lora_active();
        f("embed.projection", &self.embed.projection, base);
        f("embed.positional", &self.embed.positional, base);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.ln1.gain"), &b.ln1_gain, base);
            f(&format!("block{i}.ln1.bias"), &b.ln1_bias, base);
            f(&format!("block{i}.ln2.gain"), &b.ln2_gain, base);
            f(&format!("block{i}.ln2.bias"), &b.ln2_bias, base);
            f(&format!("block{i}.attn.wq"), &b.wq, base);
            f(&format!("block{i}.attn.wk"), &b.wk, base);
            f(&format!("block{i}.attn.wv"), &b.wv, base);
            f(&format!("block{i}.attn.wo"), &b.wo, base);
            f(&format!("block{i}.mlp.w_in"), &b.mlp_in, base);
            f(&format!("block{i}.mlp.w_out"), &b.mlp_out, base);
        }
        if let Some(adapters) = &self.adapters {
            for (i, a) in adapters.iter().enumerate() {
                for (site, ad) in [
                    ("q", &a.q),
                    ("k", &a.k),
                    ("v", &a.v),
                    ("o", &a.o),
                    ("mlp_in", &a.mlp_in),
                    ("mlp_out", &a.mlp_out),
                ] {
                    f(&format!("block{i}.lora.{site}.down"), &ad.down, true);
                    f(&format!("block{i}.lora.{site}.up"), &ad.up, true);
                }
            }
        }
    }

    /// Mutable variant of [`Self::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, bool)) {
        let base = self.adapters.is_none();
        f("embed.projection", &mut self.embed.projection, base);
        f("embed.positional", &mut self.embed.positional, base);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.ln1.gain"), &mut b.ln1_gain, base);
            f(&format!("block{i}.ln1.bias"), &mut b.ln1_bias, base);
            f(&format!("block{i}.ln2.gain"), &mut b.ln2_gain, base);
            f(&format!("block{i}.ln2.bias"), &mut b.ln2_bias, base);
            f(&format!("block{i}.attn.wq"), &mut b.wq, base);
            f(&format!("block{i}.attn.wk"), &mut b.wk, base);
            f(&format!("block{i}.attn.wv"), &mut b.wv, base);
            f(&format!("block{i}.attn.wo"), &mut b.wo, base);
            f(&format!("block{i}.mlp.w_in"), &mut b.mlp_in, base);
            f(&format!("block{i}.mlp.w_out"), &mut b.mlp_out, base);
        }
        if let Some(adapters) = &mut self.adapters {
            for (i, a) in adapters.iter_mut().enumerate() {
                for (site, ad) in [
                    ("q", &mut a.q),
                    ("k", &mut a.k),
                    ("v", &mut a.v),
                    ("o", &mut a.o),
                    ("mlp_in", &mut a.mlp_in),
                    ("mlp_out", &mut a.mlp_out),
                ] {
                    f(&format!("block{i}.lora.{site}.down"), &mut ad.down, true);
                    f(&format!("block{i}.lora.{site}.up"), &mut ad.up, true);
                }
            }
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor, bool)> {
        let mut out = Vec::new();
        self.for_each_param(|name, t, trainable| out.push((String::from(name), t.clone(), trainable)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t, _| n += t.len());
        n
    }
}

/// Graph handles for every model parameter, plus a flat name -> id view in
/// the same order as [`ModelParams::for_each_param`].
pub struct ModelVars {
    pub embed_projection: VarId,
    pub embed_positional: VarId,
    pub blocks: Vec<BlockVars>,
    pub adapters: Option<Vec<LayerAdapterVars>>,
    flat: Vec<(String, VarId, bool)>,
}

impl ModelVars {
    /// Insert every parameter as a graph leaf. With `trainable` set, base
    /// weights require gradients unless adapters are active, in which case
    /// only the adapters do.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let base = trainable && !params.lora_active();
        let mut flat = Vec::new();
        let mut put = |g: &mut Graph, name: String, t: &Tensor, train: bool| {
            let mut t = t.clone();
            t.set_requires_grad(train);
            let id = g.leaf(t);
            flat.push((name, id, train));
            id
        };
        let embed_projection = put(g, String::from("embed.projection"), &params.embed.projection, base);
        let embed_positional = put(g, String::from("embed.positional"), &params.embed.positional, base);
        let mut block_vars = Vec::with_capacity(params.blocks.len());
        for (i, b) in params.blocks.iter().enumerate() {
            let vars = BlockVars {
                ln1_gain: put(g, format!("block{i}.ln1.gain"), &b.ln1_gain, base),
                ln1_bias: put(g, format!("block{i}.ln1.bias"), &b.ln1_bias, base),
                ln2_gain: put(g, format!("block{i}.ln2.gain"), &b.ln2_gain, base),
                ln2_bias: put(g, format!("block{i}.ln2.bias"), &b.ln2_bias, base),
                wq: put(g, format!("block{i}.attn.wq"), &b.wq, base),
                wk: put(g, format!("block{i}.attn.wk"), &b.wk, base),
                wv: put(g, format!("block{i}.attn.wv"), &b.wv, base),
                wo: put(g, format!("block{i}.attn.wo"), &b.wo, base),
                mlp_in: put(g, format!("block{i}.mlp.w_in"), &b.mlp_in, base),
                mlp_out: put(g, format!("block{i}.mlp.w_out"), &b.mlp_out, base),
            };
            block_vars.push(vars);
        }
        let adapter_vars = params.adapters.as_ref().map(|adapters| {
            adapters
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let mut site = |g: &mut Graph, name: &str, ad: &crate::blocks::LoraAdapter| {
                        let down = put(g, format!("block{i}.lora.{name}.down"), &ad.down, trainable);
                        let up = put(g, format!("block{i}.lora.{name}.up"), &ad.up, trainable);
                        crate::blocks::AdapterVars {
                            down,
                            up,
                            alpha: ad.alpha,
                        }
                    };
                    LayerAdapterVars {
                        q: site(g, "q", &a.q),
                        k: site(g, "k", &a.k),
                        v: site(g, "v", &a.v),
                        o: site(g, "o", &a.o),
                        mlp_in: site(g, "mlp_in", &a.mlp_in),
                        mlp_out: site(g, "mlp_out", &a.mlp_out),
                    }
                })
                .collect()
        });
        ModelVars {
            embed_projection,
            embed_positional,
            blocks: block_vars,
            adapters: adapter_vars,
            flat,
        }
    }

    /// `(name, id, trainable)` triples in parameter order.
    pub fn flat(&self) -> &[(String, VarId, bool)] {
        &self.flat
    }

    /// Rebuild the structured view from leaves that were inserted in
    /// [`ModelParams::for_each_param`] order (as the gradient checker does).
    pub fn from_ordered_ids(params: &ModelParams, ids: &[VarId]) -> Result<Self> {
        let mut names = Vec::new();
        params.for_each_param(|name, _, trainable| names.push((String::from(name), trainable)));
        if names.len() != ids.len() {
            return Err(CoreError::config(format!(
                "expected {} parameter ids, got {}",
                names.len(),
                ids.len()
            )));
        }
        let flat: Vec<(String, VarId, bool)> = names
            .into_iter()
            .zip(ids)
            .map(|((name, trainable), id)| (name, *id, trainable))
            .collect();
        let mut cursor = 0usize;
        let mut next = || {
            let id = flat[cursor].1;
            cursor += 1;
            id
        };
        let embed_projection = next();
        let embed_positional = next();
        let blocks = (0..params.blocks.len())
            .map(|_| BlockVars {
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_in: next(),
                mlp_out: next(),
            })
            .collect();
        let adapters = params.adapters.as_ref().map(|layer_adapters| {
            layer_adapters
                .iter()
                .map(|a| {
                    let mut site = |alpha: f64| crate::blocks::AdapterVars {
                        down: next(),
                        up: next(),
                        alpha,
                    };
                    LayerAdapterVars {
                        q: site(a.q.alpha),
                        k: site(a.k.alpha),
                        v: site(a.v.alpha),
                        o: site(a.o.alpha),
                        mlp_in: site(a.mlp_in.alpha),
                        mlp_out: site(a.mlp_out.alpha),
                    }
                })
                .collect()
        });
        Ok(ModelVars {
            embed_projection,
            embed_positional,
            blocks,
            adapters,
            flat,
        })
    }
}

/// Instrumented shape-derived counters for one forward pass, using the same
/// conventions as the analytic cost model.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub attention_flops: u64,
    pub projection_flops: u64,
    pub mlp_flops: u64,
    /// Largest single attention score matrix (queries x keys), in scalars.
    pub peak_attention_elements: u64,
    /// Largest key/value row count consulted by any attention call
    /// (current segment plus memory).
    pub peak_resident_tokens: u64,
    /// Key/value rows per segment (recorded at the first layer).
    pub per_segment_keys: Vec<usize>,
}

impl RunStats {
    fn record_layer(&mut self, n: usize, m: usize, d: usize, heads: usize, mlp_hidden: usize) {
        self.attention_flops += profiler::attention_flops(n, m, d, heads);
        self.projection_flops += profiler::projection_flops(n, m, d);
        self.mlp_flops += profiler::mlp_flops(n, d, mlp_hidden);
        self.peak_attention_elements = self.peak_attention_elements.max((n * m) as u64);
        self.peak_resident_tokens = self.peak_resident_tokens.max(m as u64);
    }

    fn record_patch_embed(&mut self, tokens: usize, patch_dim: usize, d: usize) {
        self.projection_flops += profiler::patch_embed_flops(tokens, patch_dim, d);
    }
}

/// Final per-token representation and its mean-pooled summary.
#[derive(Clone, Debug)]
pub struct VideoEmbedding {
    pub tokens: Tensor,
    /// Mean over token rows, rank-1 of width d.
    pub pooled: Tensor,
}

/// Arithmetic mean of token rows as a rank-1 vector.
pub fn pool(tokens: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return Err(CoreError::shape("pool expects a rank-2 token matrix"));
    }
    let d = tokens.cols();
    tokens.mean_rows()?.reshaped(alloc::vec![d])
}

enum BankState {
    /// Detached memories held as plain values.
    Detached(MemoryBank),
    /// Per-layer consolidated segment nodes kept on the tape.
    FlowThrough(Vec<Vec<VarId>>),
}

/// Build the selected variant's forward pass on `g`. `tokens` is the full
/// `N_T x d` embedded sequence; returns the output token node and the
/// instrumented counters.
pub fn forward_tokens_graph(
    g: &mut Graph,
    tokens: VarId,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<(VarId, RunStats)> {
    cfg.validate()?;
    let total = g.value(tokens).rows();
    let d = g.value(tokens).cols();
    if d != cfg.embed_dim {
        return Err(CoreError::config(format!(
            "tokens of width {d} do not match embed_dim {}",
            cfg.embed_dim
        )));
    }
    let plan = match cfg.variant {
        Variant::Joint => {
            if total > cfg.max_joint_tokens {
                return Err(CoreError::config(format!(
                    "joint attention over {total} tokens exceeds the configured cap {}",
                    cfg.max_joint_tokens
                )));
            }
            SegmentPlan::whole(total)
        }
        _ => {
            if cfg.plan.total_tokens() != total {
                return Err(CoreError::config(format!(
                    "{total} tokens do not match the segment plan ({} x {})",
                    cfg.plan.segments, cfg.plan.tokens_per_segment
                )));
            }
            cfg.plan.clone()
        }
    };

    let mut stats = RunStats::default();
    let mut rng = SplitRng::new(cfg.consolidation.seed);
    let bank_policy = match cfg.variant {
        Variant::MemoryConsolidated => cfg.policy,
        _ => MemoryPolicy::Unbounded,
    };
    let mut bank = if cfg.backprop_through_memory {
        BankState::FlowThrough((0..cfg.layers).map(|_| Vec::new()).collect())
    } else {
        BankState::Detached(MemoryBank::new(cfg.layers, bank_policy, rng.split(u64::MAX)))
    };

    let n = plan.tokens_per_segment;
    let mut out_parts = Vec::with_capacity(plan.segments);
    for seg in 0..plan.segments {
        let mut z = g.slice_rows(tokens, seg * n, n)?;
        for layer in 0..cfg.layers {
            let memory = match &bank {
                BankState::Detached(b) => b.memory(layer).map(|m| g.constant(m)),
                BankState::FlowThrough(store) => {
                    if store[layer].is_empty() {
                        None
                    } else {
                        Some(g.concat_rows(&store[layer])?)
                    }
                }
            };
            let mem_rows = memory.map(|m| g.value(m).rows()).unwrap_or(0);
            let kv_rows = n + mem_rows;
            stats.record_layer(n, kv_rows, cfg.embed_dim, cfg.heads, cfg.mlp_hidden);
            if layer == 0 {
                stats.per_segment_keys.push(kv_rows);
            }

            let block = &vars.blocks[layer];
            let adapters = vars.adapters.as_ref().map(|a| &a[layer]);
            z = blocks::transformer_layer_graph(g, z, memory, block, cfg.heads, adapters)?;

            if cfg.variant.uses_memory() {
                store_segment_memory(g, z, layer, block, cfg, &mut rng, &mut bank)?;
            }
        }
        out_parts.push(z);
    }
    let out = if out_parts.len() == 1 {
        out_parts[0]
    } else {
        g.concat_rows(&out_parts)?
    };
    Ok((out, stats))
}

/// Consolidate a segment's post-block activations and append them to the
/// layer's memory, layer-normed with the layer's first norm.
fn store_segment_memory(
    g: &mut Graph,
    z: VarId,
    layer: usize,
    block: &BlockVars,
    cfg: &ModelConfig,
    rng: &mut SplitRng,
    bank: &mut BankState,
) -> Result<()> {
    match bank {
        BankState::Detached(b) => {
            let value = g.value(z);
            let reduced = match cfg.variant {
                Variant::MemoryAugmented => value.clone(),
                Variant::MemoryConsolidated => consolidate(value, &cfg.consolidation, rng)?,
                _ => unreachable!("memoryless variants do not store"),
            };
            let gain = g.value(block.ln1_gain).data().to_vec();
            let bias = g.value(block.ln1_bias).data().to_vec();
            let normed = tensor::layer_norm_rows(&reduced, &gain, &bias, crate::graph::LAYER_NORM_EPS);
            b.append(layer, normed)?;
        }
        BankState::FlowThrough(store) => {
            let reduced = match cfg.variant {
                Variant::MemoryAugmented => z,
                Variant::MemoryConsolidated => {
                    let weights = consolidation_weights(g.value(z), &cfg.consolidation, rng)?;
                    let weights = g.constant(weights);
                    g.matmul(weights, z)?
                }
                _ => unreachable!("memoryless variants do not store"),
            };
            let normed = g.layer_norm(reduced, block.ln1_gain, block.ln1_bias)?;
            store[layer].push(normed);
        }
    }
    Ok(())
}

/// Run a variant on plain tokens and return its embedding plus counters.
pub fn run(tokens: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<(VideoEmbedding, RunStats)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params, false);
    let tokens_id = g.constant(tokens.clone());
    let (out, stats) = forward_tokens_graph(&mut g, tokens_id, &vars, cfg)?;
    let token_values = g.value(out).clone();
    let pooled = pool(&token_values)?;
    Ok((
        VideoEmbedding {
            tokens: token_values,
            pooled,
        },
        stats,
    ))
}

/// Embed a raw video and run the configured variant; the patch projection
/// is included in the instrumented projection FLOPs.
pub fn run_video(
    video: &crate::tokenizer::VideoTensor,
    patch: &crate::tokenizer::PatchConfig,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(VideoEmbedding, RunStats)> {
    let tokens = crate::tokenizer::patch_embed(video, patch, &params.embed)?;
    let (embedding, mut stats) = run(&tokens, params, cfg)?;
    stats.record_patch_embed(tokens.rows(), patch.patch_dim(), cfg.embed_dim);
    Ok((embedding, stats))
}

fn with_variant(cfg: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut cfg = cfg.clone();
    cfg.variant = variant;
    cfg
}

/// Joint space-time attention over all tokens at once.
pub fn run_joint(tokens: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<(VideoEmbedding, RunStats)> {
    run(tokens, params, &with_variant(cfg, Variant::Joint))
}

/// Independent per-segment processing, no memory.
pub fn run_streaming(
    tokens: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(VideoEmbedding, RunStats)> {
    run(tokens, params, &with_variant(cfg, Variant::Streaming))
}

/// Segments attend over all previous segments' stored activations.
pub fn run_memory_augmented(
    tokens: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(VideoEmbedding, RunStats)> {
    run(tokens, params, &with_variant(cfg, Variant::MemoryAugmented))
}

/// Segments attend over a consolidated, optionally bounded memory bank.
pub fn run_mc_vit(
    tokens: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(VideoEmbedding, RunStats)> {
    run(tokens, params, &with_variant(cfg, Variant::MemoryConsolidated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PatchConfig;

    fn small_cfg(variant: Variant, layers: usize, d: usize, segments: usize, n_tokens: usize) -> ModelConfig {
        let plan = SegmentPlan::for_tokens(n_tokens, segments).unwrap();
        let mut cfg = ModelConfig::new(variant, layers, 2, d, plan);
        cfg.consolidation =
            ConsolidationConfig::new(ConsolidationMethod::Random, n_tokens / segments, 7);
        cfg
    }

    fn params_for(cfg: &ModelConfig, n_tokens: usize, seed: u64) -> ModelParams {
        let patch = PatchConfig::new(1, 1, 1, 1, cfg.embed_dim).unwrap();
        let mut rng = SplitRng::new(seed);
        ModelParams::init(&patch, n_tokens, cfg, &mut rng)
    }

    #[test]
    fn zero_layers_is_identity_with_mean_pool() {
        let cfg = small_cfg(Variant::Joint, 0, 4, 1, 6);
        let params = params_for(&cfg, 6, 1);
        let mut rng = SplitRng::new(2);
        let tokens = rng.normal_tensor(alloc::vec![6, 4], 1.0);
        let (emb, _) = run_joint(&tokens, &params, &cfg).unwrap();
        assert_eq!(emb.tokens.data(), tokens.data());
        let mean = tokens.mean_rows().unwrap();
        assert_eq!(emb.pooled.data(), mean.data());
    }

    #[test]
    fn single_token_equals_repeated_layer() {
        let cfg = small_cfg(Variant::Joint, 3, 4, 1, 1);
        let params = params_for(&cfg, 1, 3);
        let mut rng = SplitRng::new(4);
        let tokens = rng.normal_tensor(alloc::vec![1, 4], 1.0);
        let (emb, _) = run_joint(&tokens, &params, &cfg).unwrap();
        let mut z = tokens.clone();
        for b in &params.blocks {
            z = blocks::transformer_layer(&z, None, b, cfg.heads, None).unwrap();
        }
        assert_eq!(emb.tokens.data(), z.data());
    }

    #[test]
    fn output_token_count_matches_input_for_all_variants() {
        let n_tokens = 12;
        for variant in [
            Variant::Joint,
            Variant::Streaming,
            Variant::MemoryAugmented,
            Variant::MemoryConsolidated,
        ] {
            let mut cfg = small_cfg(variant, 2, 4, 3, n_tokens);
            cfg.consolidation.memories_per_segment = 2;
            let params = params_for(&cfg, n_tokens, 5);
            let mut rng = SplitRng::new(6);
            let tokens = rng.normal_tensor(alloc::vec![n_tokens, 4], 1.0);
            let (emb, _) = run(&tokens, &params, &cfg).unwrap();
            assert_eq!(emb.tokens.rows(), n_tokens, "{variant:?}");
        }
    }

    #[test]
    fn streaming_halves_match_joint_on_halves() {
        let n_tokens = 8;
        let cfg = small_cfg(Variant::Streaming, 2, 4, 2, n_tokens);
        let params = params_for(&cfg, n_tokens, 7);
        let mut rng = SplitRng::new(8);
        let tokens = rng.normal_tensor(alloc::vec![n_tokens, 4], 1.0);
        let (stream, _) = run_streaming(&tokens, &params, &cfg).unwrap();
        for (seg, start) in [(0usize, 0usize), (1, 4)] {
            let half = tokens.slice_rows(start, 4).unwrap();
            let half_cfg = small_cfg(Variant::Joint, 2, 4, 1, 4);
            let (joint, _) = run_joint(&half, &params, &half_cfg).unwrap();
            let got = stream.tokens.slice_rows(seg * 4, 4).unwrap();
            for (a, b) in got.data().iter().zip(joint.tokens.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_augmented_key_counts_grow_linearly() {
        let n_tokens = 12;
        let cfg = small_cfg(Variant::MemoryAugmented, 2, 4, 3, n_tokens);
        let params = params_for(&cfg, n_tokens, 9);
        let mut rng = SplitRng::new(10);
        let tokens = rng.normal_tensor(alloc::vec![n_tokens, 4], 1.0);
        let (_, stats) = run_memory_augmented(&tokens, &params, &cfg).unwrap();
        assert_eq!(stats.per_segment_keys, alloc::vec![4, 8, 12]);
    }

    #[test]
    fn mc_key_counts_respect_bank_cap() {
        let n_tokens = 24;
        let mut cfg = small_cfg(Variant::MemoryConsolidated, 1, 4, 6, n_tokens);
        cfg.consolidation.memories_per_segment = 2;
        cfg.policy = MemoryPolicy::LastN { segments: 2 };
        let params = params_for(&cfg, n_tokens, 11);
        let mut rng = SplitRng::new(12);
        let tokens = rng.normal_tensor(alloc::vec![n_tokens, 4], 1.0);
        let (_, stats) = run_mc_vit(&tokens, &params, &cfg).unwrap();
        assert_eq!(stats.per_segment_keys, alloc::vec![4, 6, 8, 8, 8, 8]);
        assert_eq!(stats.peak_resident_tokens, 8);
    }

    #[test]
    fn joint_token_cap_is_enforced() {
        let mut cfg = small_cfg(Variant::Joint, 1, 4, 1, 8);
        cfg.max_joint_tokens = 4;
        let params = params_for(&cfg, 8, 13);
        let mut rng = SplitRng::new(14);
        let tokens = rng.normal_tensor(alloc::vec![8, 4], 1.0);
        assert!(run_joint(&tokens, &params, &cfg).is_err());
    }

    #[test]
    fn pool_trivial_cases() {
        let one = Tensor::matrix(1, 3, alloc::vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool(&one).unwrap().data(), &[1.0, 2.0, 3.0]);
        let opposite = Tensor::matrix(2, 2, alloc::vec![1.0, -2.0, -1.0, 2.0]).unwrap();
        assert_eq!(pool(&opposite).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn pool_matches_per_column_mean_oracle() {
        let mut rng = SplitRng::new(15);
        let t = rng.normal_tensor(alloc::vec![5, 3], 1.0);
        let p = pool(&t).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..5).map(|i| t.at(i, j)).sum::<f64>() / 5.0;
            assert!((p.data()[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn mc_requires_consolidation_method() {
        let mut cfg = small_cfg(Variant::MemoryConsolidated, 1, 4, 2, 8);
        cfg.consolidation.method = ConsolidationMethod::None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_vars_align_with_param_listing() {
        let mut cfg = small_cfg(Variant::Joint, 2, 4, 1, 6);
        cfg.mlp_hidden = 8;
        let mut params = params_for(&cfg, 6, 16);
        params.attach_lora(2, 4.0, &mut SplitRng::new(17)).unwrap();
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &params, true);
        let mut listed = Vec::new();
        params.for_each_param(|name, _, trainable| listed.push((String::from(name), trainable)));
        assert_eq!(vars.flat().len(), listed.len());
        for (flat, listed) in vars.flat().iter().zip(&listed) {
            assert_eq!(flat.0, listed.0);
            assert_eq!(flat.2, listed.1, "{}", flat.0);
        }
        // With adapters active, base weights must be frozen.
        assert!(vars.flat().iter().all(|(name, _, t)| {
            if name.contains(".lora.") {
                *t
            } else {
                !*t
            }
        }));
    }
}
