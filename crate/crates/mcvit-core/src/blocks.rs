//! Transformer building blocks: layer norm, multi-head self- and
//! cross-attention, the MLP, and LoRA-wrapped linears.
//!
//! One layer computes
//!
//! ```text
//! y = Attn(LN(z), [LN(z); m]) + z
//! z' = MLP(LN(y)) + y
//! ```
//!
//! where `m` is optional memory whose rows were layer-normed when stored and
//! are not normed again here. Layer norm of the current tokens is recomputed
//! at every layer. Attention logits are scaled by `1/sqrt(d/H)`; the MLP is
//! two matmuls around an exact GELU with hidden width `d_ff`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, VarId};
use crate::rng::SplitRng;
use crate::tensor::{self, Tensor};

/// Weights for one transformer layer. Attention projections are stored in
/// row convention (`tokens x d` times `d x d`), no biases; the MLP hidden
/// width is `mlp_in.cols()`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

impl BlockParams {
    pub fn init(embed_dim: usize, mlp_hidden: usize, rng: &mut SplitRng) -> Self {
        let d = embed_dim;
        let scale = 1.0 / crate::fm::sqrt(d as f64);
        BlockParams {
            ln1_gain: Tensor::full(alloc::vec![d], 1.0),
            ln1_bias: Tensor::zeros(alloc::vec![d]),
            ln2_gain: Tensor::full(alloc::vec![d], 1.0),
            ln2_bias: Tensor::zeros(alloc::vec![d]),
            wq: rng.normal_tensor(alloc::vec![d, d], scale),
            wk: rng.normal_tensor(alloc::vec![d, d], scale),
            wv: rng.normal_tensor(alloc::vec![d, d], scale),
            wo: rng.normal_tensor(alloc::vec![d, d], scale),
            mlp_in: rng.normal_tensor(alloc::vec![d, mlp_hidden], scale),
            mlp_out: rng.normal_tensor(
                alloc::vec![mlp_hidden, d],
                1.0 / crate::fm::sqrt(mlp_hidden as f64),
            ),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.wq.rows()
    }
}

/// One low-rank adapter, `x W + (1/alpha) (x down) up` in row convention.
/// `down` corresponds to the usual A matrix (small random), `up` to B
/// (zero-initialized so a fresh adapter leaves the forward pass unchanged).
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut SplitRng) -> Result<Self> {
        if rank == 0 {
            return Err(CoreError::config("LoRA rank must be >= 1"));
        }
        if alpha <= 0.0 {
            return Err(CoreError::config("LoRA alpha must be positive"));
        }
        Ok(LoraAdapter {
            down: rng.normal_tensor(alloc::vec![d_in, rank], 1.0 / crate::fm::sqrt(d_in as f64)),
            up: Tensor::zeros(alloc::vec![rank, d_out]),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    /// A rank at or above the base width defeats the low-rank purpose;
    /// legal, but callers may want to warn.
    pub fn is_overparameterized(&self) -> bool {
        self.rank() >= self.down.rows().min(self.up.cols())
    }
}

/// Adapters for the attachment points of one layer: the QKV input
/// projections, the attention output projection, and both MLP matmuls.
#[derive(Clone, Debug)]
pub struct LayerAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
    pub o: LoraAdapter,
    pub mlp_in: LoraAdapter,
    pub mlp_out: LoraAdapter,
}

impl LayerAdapters {
    pub fn init(embed_dim: usize, mlp_hidden: usize, rank: usize, alpha: f64, rng: &mut SplitRng) -> Result<Self> {
        let d = embed_dim;
        Ok(LayerAdapters {
            q: LoraAdapter::init(d, d, rank, alpha, rng)?,
            k: LoraAdapter::init(d, d, rank, alpha, rng)?,
            v: LoraAdapter::init(d, d, rank, alpha, rng)?,
            o: LoraAdapter::init(d, d, rank, alpha, rng)?,
            mlp_in: LoraAdapter::init(d, mlp_hidden, rank, alpha, rng)?,
            mlp_out: LoraAdapter::init(mlp_hidden, d, rank, alpha, rng)?,
        })
    }
}

/// Graph handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gain: VarId,
    pub ln1_bias: VarId,
    pub ln2_gain: VarId,
    pub ln2_bias: VarId,
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
    pub wo: VarId,
    pub mlp_in: VarId,
    pub mlp_out: VarId,
}

impl BlockVars {
    pub fn bind(g: &mut Graph, params: &BlockParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            g.leaf(t)
        };
        BlockVars {
            ln1_gain: put(&params.ln1_gain),
            ln1_bias: put(&params.ln1_bias),
            ln2_gain: put(&params.ln2_gain),
            ln2_bias: put(&params.ln2_bias),
            wq: put(&params.wq),
            wk: put(&params.wk),
            wv: put(&params.wv),
            wo: put(&params.wo),
            mlp_in: put(&params.mlp_in),
            mlp_out: put(&params.mlp_out),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: VarId,
    pub up: VarId,
    pub alpha: f64,
}

impl AdapterVars {
    pub fn bind(g: &mut Graph, adapter: &LoraAdapter, trainable: bool) -> Self {
        let mut down = adapter.down.clone();
        let mut up = adapter.up.clone();
        down.set_requires_grad(trainable);
        up.set_requires_grad(trainable);
        AdapterVars {
            down: g.leaf(down),
            up: g.leaf(up),
            alpha: adapter.alpha,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerAdapterVars {
    pub q: AdapterVars,
    pub k: AdapterVars,
    pub v: AdapterVars,
    pub o: AdapterVars,
    pub mlp_in: AdapterVars,
    pub mlp_out: AdapterVars,
}

impl LayerAdapterVars {
    pub fn bind(g: &mut Graph, adapters: &LayerAdapters, trainable: bool) -> Self {
        LayerAdapterVars {
            q: AdapterVars::bind(g, &adapters.q, trainable),
            k: AdapterVars::bind(g, &adapters.k, trainable),
            v: AdapterVars::bind(g, &adapters.v, trainable),
            o: AdapterVars::bind(g, &adapters.o, trainable),
            mlp_in: AdapterVars::bind(g, &adapters.mlp_in, trainable),
            mlp_out: AdapterVars::bind(g, &adapters.mlp_out, trainable),
        }
    }
}

/// `x W`, plus `(1/alpha) (x down) up` when an adapter is attached.
pub fn lora_linear_graph(
    g: &mut Graph,
    x: VarId,
    w: VarId,
    adapter: Option<&AdapterVars>,
) -> Result<VarId> {
    let base = g.matmul(x, w)?;
    match adapter {
        None => Ok(base),
        Some(a) => {
            let down = g.matmul(x, a.down)?;
            let up = g.matmul(down, a.up)?;
            let scaled = g.scale(up, 1.0 / a.alpha);
            g.add(base, scaled)
        }
    }
}

/// Multi-head scaled dot-product attention with queries from `q_rows` and
/// keys/values from `kv_rows`. With `kv_rows == q_rows` this is exactly MSA.
pub fn cross_attention_graph(
    g: &mut Graph,
    q_rows: VarId,
    kv_rows: VarId,
    vars: &BlockVars,
    heads: usize,
    adapters: Option<&LayerAdapterVars>,
) -> Result<VarId> {
    let d = g.value(q_rows).cols();
    if g.value(kv_rows).cols() != d {
        return Err(CoreError::ShapeMismatch {
            op: "cross_attention",
            left: g.value(q_rows).shape().to_vec(),
            right: g.value(kv_rows).shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(CoreError::config(format!(
            "embed_dim {d} not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / crate::fm::sqrt(head_dim as f64);

    let q = lora_linear_graph(g, q_rows, vars.wq, adapters.map(|a| &a.q))?;
    let k = lora_linear_graph(g, kv_rows, vars.wk, adapters.map(|a| &a.k))?;
    let v = lora_linear_graph(g, kv_rows, vars.wv, adapters.map(|a| &a.v))?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let scaled = g.scale(logits, scale);
        let weights = g.softmax_rows(scaled)?;
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    lora_linear_graph(g, merged, vars.wo, adapters.map(|a| &a.o))
}

/// One full layer: pre-norm attention over `[LN(z); memory]` with a residual,
/// then a pre-norm MLP with a residual. `memory` rows must already be
/// layer-normed by the caller (they are stored that way).
pub fn transformer_layer_graph(
    g: &mut Graph,
    z: VarId,
    memory: Option<VarId>,
    vars: &BlockVars,
    heads: usize,
    adapters: Option<&LayerAdapterVars>,
) -> Result<VarId> {
    let zn = g.layer_norm(z, vars.ln1_gain, vars.ln1_bias)?;
    let kv = match memory {
        None => zn,
        Some(m) => g.concat_rows(&[zn, m])?,
    };
    let att = cross_attention_graph(g, zn, kv, vars, heads, adapters)?;
    let y = g.add(att, z)?;

    let yn = g.layer_norm(y, vars.ln2_gain, vars.ln2_bias)?;
    let hidden = lora_linear_graph(g, yn, vars.mlp_in, adapters.map(|a| &a.mlp_in))?;
    let activated = g.gelu(hidden);
    let mlp = lora_linear_graph(g, activated, vars.mlp_out, adapters.map(|a| &a.mlp_out))?;
    g.add(mlp, y)
}

/// Plain layer norm over rows with affine gain and bias.
pub fn layer_norm(z: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if gain.rank() != 1 || bias.rank() != 1 || gain.cols() != z.cols() || bias.cols() != z.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "layer_norm",
            left: z.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    Ok(tensor::layer_norm_rows(
        z,
        gain.data(),
        bias.data(),
        crate::graph::LAYER_NORM_EPS,
    ))
}

/// Multi-head self-attention over already-normed tokens.
pub fn msa(z_norm: &Tensor, params: &BlockParams, heads: usize) -> Result<Tensor> {
    mca(z_norm, z_norm, params, heads)
}

/// Multi-head cross-attention: queries from `q_rows`, keys/values from
/// `kv_rows`. With identical inputs it equals [`msa`] bit for bit.
pub fn mca(q_rows: &Tensor, kv_rows: &Tensor, params: &BlockParams, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = BlockVars::bind(&mut g, params, false);
    let q = g.constant(q_rows.clone());
    let kv = g.constant(kv_rows.clone());
    let out = cross_attention_graph(&mut g, q, kv, &vars, heads, None)?;
    Ok(g.value(out).clone())
}

/// Plain one-layer forward; see [`transformer_layer_graph`].
pub fn transformer_layer(
    z: &Tensor,
    memory: Option<&Tensor>,
    params: &BlockParams,
    heads: usize,
    adapters: Option<&LayerAdapters>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = BlockVars::bind(&mut g, params, false);
    let avars = adapters.map(|a| LayerAdapterVars::bind(&mut g, a, false));
    let z_id = g.constant(z.clone());
    let mem_id = memory.map(|m| g.constant(m.clone()));
    let out = transformer_layer_graph(&mut g, z_id, mem_id, &vars, heads, avars.as_ref())?;
    Ok(g.value(out).clone())
}

/// `x W + (1/alpha) (x down) up` on plain tensors.
pub fn lora_linear(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let base = x.matmul(w)?;
    let low = x.matmul(&adapter.down)?.matmul(&adapter.up)?;
    base.add(&low.scale(1.0 / adapter.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;
    use alloc::vec;
    use alloc::vec::Vec;

    fn unit_ln(d: usize) -> (Tensor, Tensor) {
        (Tensor::full(vec![d], 1.0), Tensor::zeros(vec![d]))
    }

    #[test]
    fn layer_norm_unit_affine_two_point() {
        let (gain, bias) = unit_ln(2);
        let z = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let out = layer_norm(&z, &gain, &bias).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = SplitRng::new(2);
        let (gain, bias) = unit_ln(16);
        let z = rng.normal_tensor(vec![4, 16], 3.0);
        let out = layer_norm(&z, &gain, &bias).unwrap();
        for i in 0..4 {
            let row = out.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = SplitRng::new(4);
        let params = BlockParams::init(4, 8, &mut rng);
        let z = rng.normal_tensor(vec![1, 4], 1.0);
        let out = msa(&z, &params, 2).unwrap();
        // Softmax over one key is exactly 1, so out = (z Wv) Wo.
        let direct = z.matmul(&params.wv).unwrap().matmul(&params.wo).unwrap();
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_tokens_identical_rows() {
        let mut rng = SplitRng::new(5);
        let params = BlockParams::init(4, 8, &mut rng);
        let row = rng.normal_tensor(vec![1, 4], 1.0);
        let z = Tensor::concat_rows(&[&row, &row]).unwrap();
        let out = msa(&z, &params, 2).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn mca_with_no_memory_equals_msa_bitwise() {
        let mut rng = SplitRng::new(6);
        let params = BlockParams::init(8, 16, &mut rng);
        let z = rng.normal_tensor(vec![3, 8], 1.0);
        let a = msa(&z, &params, 4).unwrap();
        let b = mca(&z, &z, &params, 4).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mca_key_value_permutation_invariance() {
        let mut rng = SplitRng::new(7);
        let params = BlockParams::init(4, 8, &mut rng);
        let q = rng.normal_tensor(vec![2, 4], 1.0);
        let kv = rng.normal_tensor(vec![5, 4], 1.0);
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Tensor> = perm.iter().map(|&i| kv.slice_rows(i, 1).unwrap()).collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        let kv_perm = Tensor::concat_rows(&refs).unwrap();
        let a = mca(&q, &kv, &params, 2).unwrap();
        let b = mca(&q, &kv_perm, &params, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // Naive single-loop attention, written independently of the graph path.
    fn naive_mca(q: &Tensor, kv: &Tensor, params: &BlockParams, heads: usize) -> Tensor {
        let d = q.cols();
        let hd = d / heads;
        let qp = q.matmul(&params.wq).unwrap();
        let kp = kv.matmul(&params.wk).unwrap();
        let vp = kv.matmul(&params.wv).unwrap();
        let mut merged = Tensor::zeros(vec![q.rows(), d]);
        for h in 0..heads {
            for i in 0..q.rows() {
                let mut logits = vec![0.0; kv.rows()];
                for (j, logit) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for e in 0..hd {
                        dot += qp.at(i, h * hd + e) * kp.at(j, h * hd + e);
                    }
                    *logit = dot / crate::fm::sqrt(hd as f64);
                }
                let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f64> = logits.iter().map(|&l| crate::fm::exp(l - max)).collect();
                let sum: f64 = exps.iter().sum();
                for e in 0..hd {
                    let mut acc = 0.0;
                    for (j, &w) in exps.iter().enumerate() {
                        acc += w / sum * vp.at(j, h * hd + e);
                    }
                    merged.row_mut(i)[h * hd + e] = acc;
                }
            }
        }
        merged.matmul(&params.wo).unwrap()
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = SplitRng::new(8);
        let params = BlockParams::init(4, 8, &mut rng);
        let z = rng.normal_tensor(vec![3, 4], 1.0);
        let got = msa(&z, &params, 2).unwrap();
        let want = naive_mca(&z, &z, &params, 2);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let q = rng.normal_tensor(vec![2, 4], 1.0);
        let kv = rng.normal_tensor(vec![5, 4], 1.0);
        let got = mca(&q, &kv, &params, 2).unwrap();
        let want = naive_mca(&q, &kv, &params, 2);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = SplitRng::new(9);
        let params = BlockParams::init(4, 8, &mut rng);
        let z = rng.normal_tensor(vec![2, 4], 1.0);
        assert!(matches!(
            msa(&z, &params, 3),
            Err(CoreError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn zero_weights_pass_residual_through() {
        let mut rng = SplitRng::new(10);
        let mut params = BlockParams::init(4, 8, &mut rng);
        for w in [
            &mut params.wq,
            &mut params.wk,
            &mut params.wv,
            &mut params.wo,
        ] {
            *w = w.zeros_like();
        }
        params.mlp_in = params.mlp_in.zeros_like();
        params.mlp_out = params.mlp_out.zeros_like();
        let z = rng.normal_tensor(vec![3, 4], 1.0);
        let out = transformer_layer(&z, None, &params, 2, None).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn lora_zero_up_is_identity() {
        let mut rng = SplitRng::new(11);
        let w = rng.normal_tensor(vec![6, 6], 1.0);
        let adapter = LoraAdapter::init(6, 6, 2, 8.0, &mut rng).unwrap();
        let x = rng.normal_tensor(vec![3, 6], 1.0);
        let out = lora_linear(&x, &w, &adapter).unwrap();
        assert_eq!(out.data(), x.matmul(&w).unwrap().data());
    }

    #[test]
    fn lora_identity_pair_adds_input() {
        let mut rng = SplitRng::new(12);
        let d = 4;
        let alpha = 3.0;
        let w = rng.normal_tensor(vec![d, d], 1.0);
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.row_mut(i)[i] = 1.0;
        }
        let adapter = LoraAdapter {
            down: eye.clone(),
            up: eye.scale(alpha),
            alpha,
        };
        assert!(adapter.is_overparameterized());
        let x = rng.normal_tensor(vec![2, d], 1.0);
        let out = lora_linear(&x, &w, &adapter).unwrap();
        let want = x.matmul(&w).unwrap().add(&x).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_matches_two_step_matmul_oracle() {
        let mut rng = SplitRng::new(13);
        let w = rng.normal_tensor(vec![6, 6], 1.0);
        let mut adapter = LoraAdapter::init(6, 6, 2, 4.0, &mut rng).unwrap();
        adapter.up = rng.normal_tensor(vec![2, 6], 1.0);
        let x = rng.normal_tensor(vec![3, 6], 1.0);
        let got = lora_linear(&x, &w, &adapter).unwrap();
        let step1 = x.matmul(&adapter.down).unwrap();
        let step2 = step1.matmul(&adapter.up).unwrap();
        let want = x.matmul(&w).unwrap().add(&step2.scale(1.0 / 4.0)).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
