//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A `Graph` is rebuilt for every forward pass: operations append nodes and
//! return `VarId` handles, and `backward` walks the tape in reverse creation
//! order (which is a topological order by construction). Node values are
//! immutable once created; gradients live in a separate [`Gradients`] buffer
//! so a graph can be differentiated repeatedly or inspected afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon inside layer normalization's variance, fixed repo-wide.
pub const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Transpose(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    Gelu(VarId),
    SumAll(VarId),
    MeanRows(VarId),
    ConcatRows(Vec<VarId>),
    SliceRows {
        x: VarId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<VarId>),
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    NormalizeRows(VarId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when none flowed.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a tensor as a leaf; it participates in backward iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.value(a).scale(c);
        let needs = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).transpose()?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).softmax_rows()?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), needs))
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).log_softmax_rows()?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::LogSoftmaxRows(a), needs))
    }

    /// Row-wise layer norm; `gain` and `bias` are rank-1 of width `d`.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        let (g, b) = (self.value(gain), self.value(bias));
        let xv = self.value(x);
        if g.rank() != 1 || b.rank() != 1 || g.cols() != xv.cols() || b.cols() != xv.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let value = tensor::layer_norm_rows(xv, g.data(), b.data(), LAYER_NORM_EPS);
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, needs))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(tensor::gelu);
        let needs = self.needs(&[a]);
        self.push(value, Op::Gelu(a), needs)
    }

    /// Sum of every element, as a 1x1 tensor.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(&[a]);
        self.push(value, Op::SumAll(a), needs)
    }

    /// Mean over rows, as a 1-by-d tensor.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).mean_rows()?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::MeanRows(a), needs))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|id| self.value(*id)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let value = self.value(x).slice_rows(start, len)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start, len }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|id| self.value(*id)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let value = self.value(x).slice_cols(start, len)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start, len }, needs))
    }

    /// Row-wise L2 normalization (smooth at the origin, see tensor module).
    pub fn normalize_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(CoreError::shape("normalize_rows requires rank 2"));
        }
        let value = tensor::l2_normalize_rows(v);
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::NormalizeRows(a), needs))
    }

    /// Value copy with the gradient path cut.
    pub fn detach(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        v.set_requires_grad(false);
        self.constant(v)
    }

    /// Reverse-mode gradients of a scalar root with respect to every node
    /// that participates in differentiation.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(CoreError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].clone().expect("checked above");
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    // d/dA (A B) = G B^T, d/dB = A^T G
                    if self.nodes[a.0].needs_grad {
                        let gb = g.matmul(&self.value(*b).transpose()?)?;
                        accumulate(&mut grads, *a, gb)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let ga = self.value(*a).transpose()?.matmul(&g)?;
                        accumulate(&mut grads, *b, ga)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g.hadamard(self.value(*a))?)?;
                    }
                }
                Op::Scale(a, c) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.scale(*c))?;
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.transpose()?)?;
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.nodes[a.0].needs_grad {
                        let y = &self.nodes[idx].value;
                        let n = y.rows();
                        let m = y.cols();
                        let mut out = Tensor::zeros(vec![n, m]);
                        for i in 0..n {
                            let yr = y.row(i);
                            let gr = g.row(i);
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            let o = out.row_mut(i);
                            for j in 0..m {
                                o[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads, *a, out)?;
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if self.nodes[a.0].needs_grad {
                        let y = &self.nodes[idx].value;
                        let n = y.rows();
                        let m = y.cols();
                        let mut out = Tensor::zeros(vec![n, m]);
                        for i in 0..n {
                            let yr = y.row(i);
                            let gr = g.row(i);
                            let gsum: f64 = gr.iter().sum();
                            let o = out.row_mut(i);
                            for j in 0..m {
                                o[j] = gr[j] - crate::fm::exp(yr[j]) * gsum;
                            }
                        }
                        accumulate(&mut grads, *a, out)?;
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    self.layer_norm_backward(idx, *x, *gain, *bias, &g, &mut grads)?;
                }
                Op::Gelu(a) => {
                    if self.nodes[a.0].needs_grad {
                        let x = self.value(*a);
                        let mut out = x.map(tensor::gelu_prime);
                        out = out.hadamard(&g)?;
                        accumulate(&mut grads, *a, out)?;
                    }
                }
                Op::SumAll(a) => {
                    if self.nodes[a.0].needs_grad {
                        let shape = self.value(*a).shape().to_vec();
                        accumulate(&mut grads, *a, Tensor::full(shape, g.data()[0]))?;
                    }
                }
                Op::MeanRows(a) => {
                    if self.nodes[a.0].needs_grad {
                        let x = self.value(*a);
                        let n = x.rows();
                        let m = x.cols();
                        let mut out = Tensor::zeros(vec![n, m]);
                        for i in 0..n {
                            let o = out.row_mut(i);
                            for j in 0..m {
                                o[j] = g.data()[j] / n as f64;
                            }
                        }
                        accumulate(&mut grads, *a, out)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut grads, *p, g.slice_rows(offset, rows)?)?;
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    if self.nodes[x.0].needs_grad {
                        let shape = self.value(*x).shape().to_vec();
                        let mut out = Tensor::zeros(shape);
                        for i in 0..*len {
                            let src = g.row(i).to_vec();
                            out.row_mut(start + i).copy_from_slice(&src);
                        }
                        accumulate(&mut grads, *x, out)?;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut grads, *p, g.slice_cols(offset, cols)?)?;
                        }
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.nodes[x.0].needs_grad {
                        let shape = self.value(*x).shape().to_vec();
                        let mut out = Tensor::zeros(shape);
                        let n = out.rows();
                        for i in 0..n {
                            for j in 0..*len {
                                out.row_mut(i)[start + j] = g.at(i, j);
                            }
                        }
                        accumulate(&mut grads, *x, out)?;
                    }
                }
                Op::NormalizeRows(a) => {
                    if self.nodes[a.0].needs_grad {
                        let x = self.value(*a);
                        let y = &self.nodes[idx].value;
                        let n = x.rows();
                        let m = x.cols();
                        let mut out = Tensor::zeros(vec![n, m]);
                        for i in 0..n {
                            let xr = x.row(i);
                            let yr = y.row(i);
                            let gr = g.row(i);
                            let norm = crate::fm::sqrt(
                                xr.iter().map(|v| v * v).sum::<f64>() + tensor::NORMALIZE_EPS_SQ,
                            );
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            let o = out.row_mut(i);
                            for j in 0..m {
                                o[j] = (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                        accumulate(&mut grads, *a, out)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn layer_norm_backward(
        &self,
        _node: usize,
        x: VarId,
        gain: VarId,
        bias: VarId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let n = xv.rows();
        let d = xv.cols();
        let mut dx = Tensor::zeros(vec![n, d]);
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        for i in 0..n {
            let row = xv.row(i);
            let gr = g.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / crate::fm::sqrt(var + LAYER_NORM_EPS);
            // x_hat and the two row means needed by the chain rule.
            let mut dxhat = vec![0.0; d];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                dgain[j] += gr[j] * xh;
                dbias[j] += gr[j];
                dxhat[j] = gr[j] * gv.data()[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xh;
            }
            m1 /= d as f64;
            m2 /= d as f64;
            let o = dx.row_mut(i);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                o[j] = inv * (dxhat[j] - m1 - xh * m2);
            }
        }
        if self.nodes[x.0].needs_grad {
            accumulate(grads, x, dx)?;
        }
        if self.nodes[gain.0].needs_grad {
            accumulate(grads, gain, Tensor::new(vec![d], dgain)?)?;
        }
        if self.nodes[bias.0].needs_grad {
            accumulate(grads, bias, Tensor::new(vec![d], dbias)?)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, contribution: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap().with_grad());
        assert!(matches!(
            g.backward(x),
            Err(CoreError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn constant_receives_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap().with_grad());
        let c = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let prod = g.mul(x, c).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap().with_grad());
        let d = g.detach(x);
        let prod = g.mul(x, d).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        // With the second factor detached the gradient is the detached value,
        // not 2x.
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_gradients_match_manual() {
        // loss = sum(A B): dA = ones * B^T, dB = A^T * ones.
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let b = g.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap().with_grad());
        let prod = g.matmul(a, b).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn slice_concat_gradients_route_correctly() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap().with_grad());
        let top = g.slice_rows(x, 0, 1).unwrap();
        let bottom = g.slice_rows(x, 1, 2).unwrap();
        let scaled = g.scale(bottom, 3.0);
        let back = g.concat_rows(&[top, scaled]).unwrap();
        let loss = g.sum_all(back);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn graph_reuse_after_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    }

    #[test]
    fn deterministic_forward_same_seed() {
        let run = || {
            let mut rng = SplitRng::new(77);
            let mut g = Graph::new();
            let a = g.leaf(rng.normal_tensor(vec![4, 4], 1.0));
            let b = g.leaf(rng.normal_tensor(vec![4, 4], 1.0));
            let prod = g.matmul(a, b).unwrap();
            let sm = g.softmax_rows(prod).unwrap();
            g.value(sm).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
