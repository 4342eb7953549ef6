//! Contrastive fine-tuning, zero-shot evaluation, AdamW with warmup-cosine
//! scheduling, and a synthetic cross-segment classification task.
//!
//! The loss for one batch item is the symmetric noise-contrastive pair
//!
//! ```text
//! l_i = -log softmax_j(zv_i . zt_j)[i] - log softmax_j(zt_i . zv_j)[i]
//! ```
//!
//! over in-batch negatives, with embeddings L2-normalized first and dot
//! products divided by a temperature (1 by default, matching the printed
//! form). The text side is a learnable per-class caption table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fm;
use crate::graph::{Graph, VarId};
use crate::rng::SplitRng;
use crate::runtime::{self, ModelConfig, ModelParams, ModelVars};
use crate::tensor::{self, Tensor};
use crate::tokenizer::{self, PatchConfig, VideoTensor};

/// One video/text embedding pair entering the contrastive loss.
#[derive(Clone, Debug)]
pub struct EmbeddingPair {
    pub video: Tensor,
    pub text: Tensor,
}

fn stack_normalized(rows: &[&Tensor], d: usize, context: &'static str) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(CoreError::EmptyInput { context });
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(CoreError::ShapeMismatch {
                op: "embedding stack",
                left: vec![d],
                right: r.shape().to_vec(),
            });
        }
        data.extend_from_slice(r.data());
    }
    Ok(tensor::l2_normalize_rows(&Tensor::matrix(
        rows.len(),
        d,
        data,
    )?))
}

/// Per-item symmetric contrastive losses over in-batch negatives. Both
/// embeddings are L2-normalized before the dot products.
pub fn contrastive_loss_per_item(pairs: &[EmbeddingPair], temperature: f64) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyInput {
            context: "contrastive_loss batch",
        });
    }
    if temperature <= 0.0 {
        return Err(CoreError::config("temperature must be positive"));
    }
    let d = pairs[0].video.len();
    let videos: Vec<&Tensor> = pairs.iter().map(|p| &p.video).collect();
    let texts: Vec<&Tensor> = pairs.iter().map(|p| &p.text).collect();
    let zv = stack_normalized(&videos, d, "contrastive_loss videos")?;
    let zt = stack_normalized(&texts, d, "contrastive_loss texts")?;
    let logits = zv.matmul(&zt.transpose()?)?.scale(1.0 / temperature);
    let v2t = logits.log_softmax_rows()?;
    let t2v = logits.transpose()?.log_softmax_rows()?;
    Ok((0..pairs.len())
        .map(|i| -v2t.at(i, i) - t2v.at(i, i))
        .collect())
}

/// Mean of the per-item losses.
pub fn contrastive_loss(pairs: &[EmbeddingPair], temperature: f64) -> Result<f64> {
    let items = contrastive_loss_per_item(pairs, temperature)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

/// Graph version of the batch loss. `zv` and `zt` are `B x d` nodes; rows
/// are normalized here when `normalize` is set. Label smoothing spreads
/// `smoothing / B` of each row's target mass over all candidates.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    zv: VarId,
    zt: VarId,
    temperature: f64,
    label_smoothing: f64,
    normalize: bool,
) -> Result<VarId> {
    if temperature <= 0.0 {
        return Err(CoreError::config("temperature must be positive"));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(CoreError::config("label_smoothing must be in [0, 1)"));
    }
    let b = g.value(zv).rows();
    if g.value(zt).rows() != b {
        return Err(CoreError::ShapeMismatch {
            op: "contrastive_loss",
            left: g.value(zv).shape().to_vec(),
            right: g.value(zt).shape().to_vec(),
        });
    }
    let (zv, zt) = if normalize {
        (g.normalize_rows(zv)?, g.normalize_rows(zt)?)
    } else {
        (zv, zt)
    };
    let ztt = g.transpose(zt)?;
    let sims = g.matmul(zv, ztt)?;
    let logits = g.scale(sims, 1.0 / temperature);

    // Target weights: (1 - eps) on the diagonal plus eps/B everywhere.
    let mut target = Tensor::full(vec![b, b], label_smoothing / b as f64);
    for i in 0..b {
        target.row_mut(i)[i] += 1.0 - label_smoothing;
    }
    let target = g.constant(target);

    let v2t = g.log_softmax_rows(logits)?;
    let lt = g.transpose(logits)?;
    let t2v = g.log_softmax_rows(lt)?;
    let weighted_v = g.mul(v2t, target)?;
    let weighted_t = g.mul(t2v, target)?;
    let sum_v = g.sum_all(weighted_v);
    let sum_t = g.sum_all(weighted_t);
    let total = g.add(sum_v, sum_t)?;
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Video-to-text contrastive term with an explicit negative set instead of
/// in-batch negatives. All embeddings are L2-normalized.
pub fn contrastive_loss_hard_negatives(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    temperature: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(CoreError::EmptyInput {
            context: "hard negatives",
        });
    }
    if temperature <= 0.0 {
        return Err(CoreError::config("temperature must be positive"));
    }
    let d = anchor.len();
    let anchor_n = stack_normalized(&[anchor], d, "hard-negative anchor")?;
    let mut candidates: Vec<&Tensor> = Vec::with_capacity(1 + negatives.len());
    candidates.push(positive);
    candidates.extend(negatives.iter());
    let cands = stack_normalized(&candidates, d, "hard-negative candidates")?;
    let logits = anchor_n.matmul(&cands.transpose()?)?.scale(1.0 / temperature);
    let lsm = logits.log_softmax_rows()?;
    Ok(-lsm.at(0, 0))
}

/// Index of the candidate with the highest dot-product similarity; exact
/// ties resolve to the lowest index.
pub fn zero_shot_predict(video: &Tensor, candidates: &[Tensor]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(CoreError::EmptyInput {
            context: "zero_shot candidates",
        });
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        if c.len() != video.len() {
            return Err(CoreError::ShapeMismatch {
                op: "zero_shot_predict",
                left: video.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let score: f64 = video.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

/// Learning rate at `step`: linear warmup from zero, then cosine decay to
/// zero at `total_steps`.
pub fn learning_rate_at(step: usize, base: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.min(1.0);
    base * 0.5 * (1.0 + fm::cos(core::f64::consts::PI * progress))
}

/// Decoupled-weight-decay Adam over a fixed slot layout.
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(shapes: &[Vec<usize>], weight_decay: f64) -> Self {
        AdamW {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Advance the step counter; call once before updating the slots.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter slot in place.
    pub fn update(&mut self, slot: usize, lr: f64, param: &mut Tensor, grad: &Tensor) {
        debug_assert!(self.t > 0, "begin_step before update");
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        let g = grad.data();
        let p = param.data_mut();
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (fm::sqrt(v_hat) + self.eps) + self.weight_decay * p[i]);
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = fm::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// Synthetic cross-segment classification: a video is noise plus two symbol
/// motifs, one in each of two distinct segments, and the class is the
/// modular sum of the two symbols. Each segment's marginal distribution is
/// identical across classes, so per-segment features pooled additively
/// cannot solve the task; combining the segments solves it exactly.
#[derive(Clone, Debug)]
pub struct SyntheticTaskConfig {
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames_per_segment: usize,
    /// The two segments carrying the symbols; must differ.
    pub motif_segments: (usize, usize),
    pub motif_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub struct SyntheticTask {
    cfg: SyntheticTaskConfig,
    /// Fixed pixel pattern per (slot, symbol), spanning one segment.
    patterns: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(cfg: SyntheticTaskConfig) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(CoreError::config("synthetic task needs >= 2 classes"));
        }
        if cfg.frames_per_segment == 0 || cfg.frames % cfg.frames_per_segment != 0 {
            return Err(CoreError::config("frames must divide into segments"));
        }
        let segments = cfg.frames / cfg.frames_per_segment;
        let (a, b) = cfg.motif_segments;
        if a == b || a >= segments || b >= segments {
            return Err(CoreError::config(format!(
                "motif segments ({a}, {b}) must be distinct and < {segments}"
            )));
        }
        let voxels = cfg.frames_per_segment * cfg.height * cfg.width * cfg.channels;
        let mut patterns = Vec::with_capacity(2 * cfg.classes);
        for slot in 0..2usize {
            for symbol in 0..cfg.classes {
                let mut rng = SplitRng::new(cfg.seed).split(1 + (slot * cfg.classes + symbol) as u64);
                let pattern: Vec<f64> = (0..voxels)
                    .map(|_| {
                        if rng.next_u64() & 1 == 0 {
                            cfg.motif_amplitude
                        } else {
                            -cfg.motif_amplitude
                        }
                    })
                    .collect();
                patterns.push(pattern);
            }
        }
        Ok(SyntheticTask { cfg, patterns })
    }

    pub fn config(&self) -> &SyntheticTaskConfig {
        &self.cfg
    }

    pub fn segments(&self) -> usize {
        self.cfg.frames / self.cfg.frames_per_segment
    }

    fn pattern(&self, slot: usize, symbol: usize) -> &[f64] {
        &self.patterns[slot * self.cfg.classes + symbol]
    }

    fn stamp(&self, video: &mut VideoTensor, segment: usize, slot: usize, symbol: usize) {
        let c = &self.cfg;
        let seg_voxels = c.frames_per_segment * c.height * c.width * c.channels;
        let offset = segment * seg_voxels;
        let data = video.data_mut().data_mut();
        for (i, &p) in self.pattern(slot, symbol).iter().enumerate() {
            data[offset + i] += p;
        }
    }

    /// One labeled sample: noise everywhere, symbol `x1` stamped into the
    /// first motif segment and `x2 = (label - x1) mod classes` into the
    /// second.
    pub fn sample_with_label(&self, label: usize, rng: &mut SplitRng) -> VideoTensor {
        let c = &self.cfg;
        let mut video = VideoTensor::new(
            c.frames,
            c.height,
            c.width,
            c.channels,
            rng.normal_tensor(
                vec![c.frames, c.height, c.width, c.channels],
                c.noise_sigma,
            ),
        )
        .expect("geometry fixed by config");
        let x1 = rng.index(c.classes);
        let x2 = (label + c.classes - x1) % c.classes;
        self.stamp(&mut video, c.motif_segments.0, 0, x1);
        self.stamp(&mut video, c.motif_segments.1, 1, x2);
        video
    }

    pub fn sample(&self, rng: &mut SplitRng) -> (VideoTensor, usize) {
        let label = rng.index(self.cfg.classes);
        (self.sample_with_label(label, rng), label)
    }

    /// Class-balanced batch: labels cycle through all classes in shuffled
    /// order so small batches never pit a caption against itself.
    pub fn batch(&self, size: usize, rng: &mut SplitRng) -> Vec<(VideoTensor, usize)> {
        let c = self.cfg.classes;
        let mut labels: Vec<usize> = (0..size).map(|i| i % c).collect();
        rng.shuffle(&mut labels);
        labels
            .into_iter()
            .map(|label| (self.sample_with_label(label, rng), label))
            .collect()
    }
}

/// Hyperparameters for [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub training_steps: usize,
    pub batch_size: usize,
    pub base_learning_rate: f64,
    pub linear_warmup_steps: usize,
    pub gradient_clip: f64,
    pub weight_decay_rate: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub normalize_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            training_steps: 1000,
            batch_size: 4,
            base_learning_rate: 3e-3,
            linear_warmup_steps: 100,
            gradient_clip: 2.0,
            weight_decay_rate: 0.0,
            label_smoothing: 0.0,
            temperature: 1.0,
            normalize_embeddings: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Batch accuracy of zero-shot prediction against the caption table.
    pub accuracy: f64,
}

/// Model plus the learnable per-class caption table.
pub struct TrainState {
    pub params: ModelParams,
    pub captions: Tensor,
}

impl TrainState {
    pub fn init(
        patch: &PatchConfig,
        total_tokens: usize,
        cfg: &ModelConfig,
        classes: usize,
        rng: &mut SplitRng,
    ) -> Self {
        let params = ModelParams::init(patch, total_tokens, cfg, rng);
        let captions = rng.normal_tensor(vec![classes, cfg.embed_dim], 1.0);
        TrainState { params, captions }
    }

    /// Embed, run the configured variant, and pool one video on the graph.
    pub fn video_embedding_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        video: &VideoTensor,
        patch: &PatchConfig,
        cfg: &ModelConfig,
    ) -> Result<VarId> {
        let tokens = tokenizer::patch_embed_graph(
            g,
            video,
            patch,
            vars.embed_projection,
            vars.embed_positional,
        )?;
        let (out, _) = runtime::forward_tokens_graph(g, tokens, vars, cfg)?;
        g.mean_rows(out)
    }

    /// Plain pooled embedding of one video under the current parameters.
    pub fn video_embedding(
        &self,
        video: &VideoTensor,
        patch: &PatchConfig,
        cfg: &ModelConfig,
    ) -> Result<Tensor> {
        let tokens = tokenizer::patch_embed(video, patch, &self.params.embed)?;
        let (emb, _) = runtime::run(&tokens, &self.params, cfg)?;
        Ok(emb.pooled)
    }

    /// Caption rows, normalized the same way training treats them.
    pub fn caption_embeddings(&self, normalize: bool) -> Vec<Tensor> {
        let table = if normalize {
            tensor::l2_normalize_rows(&self.captions)
        } else {
            self.captions.clone()
        };
        (0..table.rows())
            .map(|i| {
                let d = table.cols();
                Tensor::new(vec![d], table.row(i).to_vec()).expect("row shape")
            })
            .collect()
    }

    /// Zero-shot accuracy over labeled videos.
    pub fn evaluate(
        &self,
        samples: &[(VideoTensor, usize)],
        patch: &PatchConfig,
        cfg: &ModelConfig,
        normalize: bool,
    ) -> Result<f64> {
        let captions = self.caption_embeddings(normalize);
        let mut correct = 0usize;
        for (video, label) in samples {
            let pooled = self.video_embedding(video, patch, cfg)?;
            let pooled = if normalize {
                let m = pooled.reshaped(vec![1, pooled.len()])?;
                let n = tensor::l2_normalize_rows(&m);
                n.reshaped(vec![pooled.len()])?
            } else {
                pooled
            };
            if zero_shot_predict(&pooled, &captions)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

/// Fine-tune on the synthetic task with AdamW, global-norm gradient
/// clipping, and warmup-cosine scheduling. Aborts with
/// [`CoreError::Diverged`] if the loss goes non-finite.
pub fn train_loop(
    state: &mut TrainState,
    patch: &PatchConfig,
    cfg: &ModelConfig,
    task: &SyntheticTask,
    train: &TrainConfig,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if train.batch_size == 0 {
        return Err(CoreError::config("batch_size must be >= 1"));
    }
    let data_rng = SplitRng::new(train.seed);
    let mut metrics = Vec::with_capacity(train.training_steps);

    // Slot layout: trainable model tensors in listing order, captions last.
    let mut trainable_shapes: Vec<Vec<usize>> = Vec::new();
    state.params.for_each_param(|_, t, trainable| {
        if trainable {
            trainable_shapes.push(t.shape().to_vec());
        }
    });
    trainable_shapes.push(state.captions.shape().to_vec());
    let mut optimizer = AdamW::new(&trainable_shapes, train.weight_decay_rate);

    for step in 0..train.training_steps {
        let mut batch_rng = data_rng.split(step as u64);
        let batch = task.batch(train.batch_size, &mut batch_rng);

        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &state.params, true);
        let captions_id = g.leaf(state.captions.clone().with_grad());

        let mut pooled_ids = Vec::with_capacity(batch.len());
        let mut caption_ids = Vec::with_capacity(batch.len());
        for (video, label) in &batch {
            pooled_ids.push(state.video_embedding_graph(&mut g, &vars, video, patch, cfg)?);
            caption_ids.push(g.slice_rows(captions_id, *label, 1)?);
        }
        let zv = g.concat_rows(&pooled_ids)?;
        let zt = g.concat_rows(&caption_ids)?;
        let loss_id = contrastive_loss_graph(
            &mut g,
            zv,
            zt,
            train.temperature,
            train.label_smoothing,
            train.normalize_embeddings,
        )?;
        let loss = g.value(loss_id).data()[0];
        if !loss.is_finite() {
            return Err(CoreError::Diverged { step });
        }

        let grads = g.backward(loss_id)?;
        let mut grad_slots: Vec<Tensor> = Vec::with_capacity(trainable_shapes.len());
        for (_, id, trainable) in vars.flat() {
            if *trainable {
                grad_slots.push(grads.get_or_zeros(*id, g.value(*id).shape()));
            }
        }
        grad_slots.push(grads.get_or_zeros(captions_id, state.captions.shape()));
        clip_global_norm(&mut grad_slots, train.gradient_clip);

        // Batch accuracy at this step's parameters: argmax over the caption
        // table, mirroring the loss's normalization (row normalization of
        // the query cannot change its argmax).
        let zv_vals = g.value(zv).clone();
        let table = if train.normalize_embeddings {
            tensor::l2_normalize_rows(&state.captions)
        } else {
            state.captions.clone()
        };
        let mut correct = 0usize;
        for (i, (_, label)) in batch.iter().enumerate() {
            let sims = zv_vals.slice_rows(i, 1)?.matmul(&table.transpose()?)?;
            let row = sims.row(0);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == *label {
                correct += 1;
            }
        }
        metrics.push(StepMetrics {
            step,
            loss,
            accuracy: correct as f64 / batch.len() as f64,
        });

        let lr = learning_rate_at(step, train.base_learning_rate, train.linear_warmup_steps, train.training_steps);
        optimizer.begin_step();
        let mut slot = 0usize;
        state.params.for_each_param_mut(|_, t, trainable| {
            if trainable {
                optimizer.update(slot, lr, t, &grad_slots[slot]);
                slot += 1;
            }
        });
        optimizer.update(slot, lr, &mut state.captions, &grad_slots[slot]);
    }
    Ok(metrics)
}
