//! Non-parametric memory consolidation and bounded memory policies.
//!
//! A segment's `N x d` activations are reduced to `K` representative rows by
//! one of three methods:
//!
//! * random — `K` distinct rows drawn uniformly without replacement, kept in
//!   ascending index order;
//! * coreset — farthest-first traversal: the first pick is the row farthest
//!   from the segment mean, each later pick maximizes its minimum squared
//!   distance to the rows already picked, ties broken toward the lowest
//!   index, output in pick order;
//! * k-means — centroids initialized exactly like the random method, then a
//!   fixed number of assign/update rounds (squared Euclidean distance,
//!   ties to the lowest centroid index, empty clusters keep their previous
//!   centroid).
//!
//! Consolidated rows accumulate per layer in a [`MemoryBank`], optionally
//! bounded by keeping only the last `n` segments or a uniform reservoir
//! sample of all past rows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsolidationMethod {
    None,
    Random,
    Coreset,
    KMeans,
}

/// How a segment's activations are consolidated before entering the bank.
#[derive(Clone, Debug)]
pub struct ConsolidationConfig {
    pub method: ConsolidationMethod,
    /// Memories kept per segment.
    pub memories_per_segment: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl ConsolidationConfig {
    pub fn new(method: ConsolidationMethod, memories_per_segment: usize, seed: u64) -> Self {
        ConsolidationConfig {
            method,
            memories_per_segment,
            kmeans_iters: 5,
            seed,
        }
    }

    pub fn validate(&self, tokens_per_segment: usize) -> Result<()> {
        if self.memories_per_segment == 0 {
            return Err(CoreError::config("memories_per_segment must be >= 1"));
        }
        if self.memories_per_segment > tokens_per_segment {
            return Err(CoreError::config(format!(
                "memories_per_segment {} exceeds segment tokens {}",
                self.memories_per_segment, tokens_per_segment
            )));
        }
        Ok(())
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(CoreError::config(format!(
            "cannot select {k} memories from {n} rows"
        )));
    }
    Ok(())
}

fn gather_rows(z: &Tensor, indices: &[usize]) -> Tensor {
    let d = z.cols();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(z.row(i));
    }
    Tensor::matrix(indices.len(), d, data).expect("gather_rows shape")
}

/// Indices chosen by the random method: uniform without replacement,
/// ascending order.
pub fn random_indices(n: usize, k: usize, rng: &mut SplitRng) -> Result<Vec<usize>> {
    check_k(n, k)?;
    Ok(rng.sample_without_replacement(n, k))
}

pub fn consolidate_random(z: &Tensor, k: usize, rng: &mut SplitRng) -> Result<Tensor> {
    Ok(gather_rows(z, &random_indices(z.rows(), k, rng)?))
}

/// Indices chosen by greedy coreset selection, in pick order.
pub fn coreset_indices(z: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = z.rows();
    check_k(n, k)?;
    let mean = z.mean_rows()?;
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; n];

    // First pick: farthest from the segment mean, lowest index on ties.
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for i in 0..n {
        let d = z.row_dist_sq(i, &mean, 0);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    picked.push(best);
    taken[best] = true;

    // min_d[i] = min squared distance from row i to any picked row.
    let mut min_d: Vec<f64> = (0..n).map(|i| z.row_dist_sq(i, z, best)).collect();
    for _ in 1..k {
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d[i] > next_d {
                next_d = min_d[i];
                next = i;
            }
        }
        picked.push(next);
        taken[next] = true;
        for i in 0..n {
            let d = z.row_dist_sq(i, z, next);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(picked)
}

pub fn consolidate_coreset(z: &Tensor, k: usize) -> Result<Tensor> {
    Ok(gather_rows(z, &coreset_indices(z, k)?))
}

/// Nearest-centroid assignment for every row, ties to the lowest centroid
/// index.
pub fn kmeans_assignments(z: &Tensor, centroids: &Tensor) -> Vec<usize> {
    let n = z.rows();
    let k = centroids.rows();
    let mut assign = vec![0usize; n];
    for (i, slot) in assign.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_d = z.row_dist_sq(i, centroids, 0);
        for c in 1..k {
            let d = z.row_dist_sq(i, centroids, c);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *slot = best;
    }
    assign
}

/// Sum of squared distances from each row to its nearest centroid.
pub fn kmeans_objective(z: &Tensor, centroids: &Tensor) -> f64 {
    let assign = kmeans_assignments(z, centroids);
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| z.row_dist_sq(i, centroids, c))
        .sum()
}

/// Centroids after every iteration, starting with the random initialization
/// (so the result has `iters + 1` entries and the last one is the output of
/// [`consolidate_kmeans`]).
pub fn consolidate_kmeans_steps(
    z: &Tensor,
    k: usize,
    iters: usize,
    rng: &mut SplitRng,
) -> Result<Vec<Tensor>> {
    let init = consolidate_random(z, k, rng)?;
    Ok(kmeans_steps_from(z, init, iters))
}

/// Lloyd iterations from explicit initial centroids; shared by the public
/// entry point and the hand-initialized tests.
pub fn kmeans_steps_from(z: &Tensor, init: Tensor, iters: usize) -> Vec<Tensor> {
    let n = z.rows();
    let d = z.cols();
    let k = init.rows();
    let mut steps = Vec::with_capacity(iters + 1);
    steps.push(init);
    for _ in 0..iters {
        let current = steps.last().expect("non-empty");
        let assign = kmeans_assignments(z, current);
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += z.at(i, j);
            }
        }
        let mut next = Vec::with_capacity(k * d);
        for c in 0..k {
            if counts[c] == 0 {
                next.extend_from_slice(current.row(c));
            } else {
                for j in 0..d {
                    next.push(sums[c * d + j] / counts[c] as f64);
                }
            }
        }
        steps.push(Tensor::matrix(k, d, next).expect("kmeans shape"));
    }
    steps
}

pub fn consolidate_kmeans(z: &Tensor, k: usize, iters: usize, rng: &mut SplitRng) -> Result<Tensor> {
    Ok(consolidate_kmeans_steps(z, k, iters, rng)?
        .pop()
        .expect("at least the init step"))
}

/// Apply the configured method to one segment's activations.
pub fn consolidate(z: &Tensor, cfg: &ConsolidationConfig, rng: &mut SplitRng) -> Result<Tensor> {
    let k = cfg.memories_per_segment;
    match cfg.method {
        ConsolidationMethod::None => Err(CoreError::config(
            "consolidation method 'none' cannot produce memories",
        )),
        ConsolidationMethod::Random => consolidate_random(z, k, rng),
        ConsolidationMethod::Coreset => consolidate_coreset(z, k),
        ConsolidationMethod::KMeans => consolidate_kmeans(z, k, cfg.kmeans_iters, rng),
    }
}

/// Row-selection weights for gradient flow-through: a `K x N` matrix `W`
/// such that `W z` reproduces the consolidated rows (one-hot rows for
/// random/coreset, `1/|cluster|` averaging rows for k-means).
pub fn selection_weights(indices: &[usize], n: usize) -> Tensor {
    let mut w = Tensor::zeros(vec![indices.len(), n]);
    for (r, &i) in indices.iter().enumerate() {
        w.row_mut(r)[i] = 1.0;
    }
    w
}

/// K-means as a `K x N` weight matrix over the segment rows, tracking the
/// same iterations (and consuming the same rng draws) as
/// [`consolidate_kmeans`]. Empty clusters carry their previous weight row
/// forward. `W z` reproduces the final centroids up to floating-point
/// reassociation.
pub fn kmeans_weights(z: &Tensor, k: usize, iters: usize, rng: &mut SplitRng) -> Result<Tensor> {
    let n = z.rows();
    let init_idx = random_indices(n, k, rng)?;
    let mut weights = selection_weights(&init_idx, n);
    let steps = kmeans_steps_from(z, gather_rows(z, &init_idx), iters);
    // Assignments against the centroids entering each iteration.
    for current in steps.iter().take(iters) {
        let assign = kmeans_assignments(z, current);
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        let mut next = Tensor::zeros(vec![k, n]);
        for c in 0..k {
            if counts[c] == 0 {
                let prev = weights.row(c).to_vec();
                next.row_mut(c).copy_from_slice(&prev);
            } else {
                for (i, &a) in assign.iter().enumerate() {
                    if a == c {
                        next.row_mut(c)[i] = 1.0 / counts[c] as f64;
                    }
                }
            }
        }
        weights = next;
    }
    Ok(weights)
}

/// Row weights realizing the configured method, for gradient flow-through.
/// Consumes the same rng draws as [`consolidate`].
pub fn consolidation_weights(
    z: &Tensor,
    cfg: &ConsolidationConfig,
    rng: &mut SplitRng,
) -> Result<Tensor> {
    let k = cfg.memories_per_segment;
    match cfg.method {
        ConsolidationMethod::None => Err(CoreError::config(
            "consolidation method 'none' cannot produce memories",
        )),
        ConsolidationMethod::Random => Ok(selection_weights(&random_indices(z.rows(), k, rng)?, z.rows())),
        ConsolidationMethod::Coreset => Ok(selection_weights(&coreset_indices(z, k)?, z.rows())),
        ConsolidationMethod::KMeans => kmeans_weights(z, k, cfg.kmeans_iters, rng),
    }
}

/// Finite-memory policies decoupling bank growth from video length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryPolicy {
    /// Keep every consolidated segment.
    Unbounded,
    /// Keep only the most recent `segments` segment memories.
    LastN { segments: usize },
    /// Keep at most `cap_tokens` rows sampled uniformly across all past
    /// segments (reservoir sampling).
    GlobalRandom { cap_tokens: usize },
}

impl MemoryPolicy {
    /// Maximum resident tokens per layer under this policy, given K rows per
    /// segment append.
    pub fn cap_tokens(&self, memories_per_segment: usize) -> Option<usize> {
        match self {
            MemoryPolicy::Unbounded => None,
            MemoryPolicy::LastN { segments } => Some(segments * memories_per_segment),
            MemoryPolicy::GlobalRandom { cap_tokens } => Some(*cap_tokens),
        }
    }
}

enum LayerStore {
    /// Ordered per-segment memories (unbounded and last-n policies).
    Segments(Vec<Tensor>),
    /// Flat reservoir of rows (global-random policy).
    Reservoir { rows: Vec<Vec<f64>>, seen: u64 },
}

/// Per-layer store of consolidated, already layer-normed activations.
///
/// Rows arrive via [`MemoryBank::append`] in segment order; the configured
/// policy is enforced after every append, so the bank never exposes more
/// than its cap.
pub struct MemoryBank {
    layers: Vec<LayerStore>,
    policy: MemoryPolicy,
    rng: SplitRng,
}

impl MemoryBank {
    pub fn new(num_layers: usize, policy: MemoryPolicy, rng: SplitRng) -> Self {
        let layers = (0..num_layers)
            .map(|_| match policy {
                MemoryPolicy::GlobalRandom { .. } => LayerStore::Reservoir {
                    rows: Vec::new(),
                    seen: 0,
                },
                _ => LayerStore::Segments(Vec::new()),
            })
            .collect();
        MemoryBank {
            layers,
            policy,
            rng,
        }
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Append one consolidated segment (rows already layer-normed) to a
    /// layer's store, then enforce the policy.
    pub fn append(&mut self, layer: usize, consolidated: Tensor) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(CoreError::config(format!(
                "layer {layer} out of {}",
                self.layers.len()
            )));
        }
        match &mut self.layers[layer] {
            LayerStore::Segments(segs) => segs.push(consolidated),
            LayerStore::Reservoir { rows, seen } => {
                let cap = match self.policy {
                    MemoryPolicy::GlobalRandom { cap_tokens } => cap_tokens,
                    _ => unreachable!("reservoir store implies global policy"),
                };
                for r in 0..consolidated.rows() {
                    *seen += 1;
                    let row = consolidated.row(r).to_vec();
                    if rows.len() < cap {
                        rows.push(row);
                    } else {
                        let j = self.rng.index(*seen as usize);
                        if j < cap {
                            rows[j] = row;
                        }
                    }
                }
            }
        }
        self.enforce_policy();
        Ok(())
    }

    /// Re-apply the policy's cap; appends call this automatically.
    pub fn enforce_policy(&mut self) {
        if let MemoryPolicy::LastN { segments } = self.policy {
            for store in &mut self.layers {
                if let LayerStore::Segments(segs) = store {
                    while segs.len() > segments {
                        segs.remove(0);
                    }
                }
            }
        }
    }

    /// All resident memory rows of a layer, in storage order, or `None` when
    /// the layer has no memories yet.
    pub fn memory(&self, layer: usize) -> Option<Tensor> {
        match &self.layers[layer] {
            LayerStore::Segments(segs) => {
                if segs.is_empty() {
                    None
                } else {
                    let refs: Vec<&Tensor> = segs.iter().collect();
                    Some(Tensor::concat_rows(&refs).expect("bank rows widths match"))
                }
            }
            LayerStore::Reservoir { rows, .. } => {
                if rows.is_empty() {
                    None
                } else {
                    Some(Tensor::from_rows(rows).expect("reservoir rows widths match"))
                }
            }
        }
    }

    pub fn resident_tokens(&self, layer: usize) -> usize {
        match &self.layers[layer] {
            LayerStore::Segments(segs) => segs.iter().map(|s| s.rows()).sum(),
            LayerStore::Reservoir { rows, .. } => rows.len(),
        }
    }

    pub fn max_resident_tokens(&self) -> usize {
        (0..self.layers.len())
            .map(|l| self.resident_tokens(l))
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn column(values: &[f64]) -> Tensor {
        Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn random_full_selection_preserves_order() {
        let z = column(&[5.0, 1.0, 9.0, 2.0]);
        let mut rng = SplitRng::new(1);
        let out = consolidate_random(&z, 4, &mut rng).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn random_single_row() {
        let z = column(&[7.0]);
        let mut rng = SplitRng::new(1);
        let out = consolidate_random(&z, 1, &mut rng).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn random_replay_determinism() {
        let mut rng_a = SplitRng::new(99);
        let mut rng_b = SplitRng::new(99);
        let z = column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let a = random_indices(8, 2, &mut rng_a).unwrap();
        let b = random_indices(8, 2, &mut rng_b).unwrap();
        assert_eq!(a, b);
        let out = consolidate_random(&z, 2, &mut SplitRng::new(99)).unwrap();
        assert_eq!(out.data(), &[a[0] as f64, a[1] as f64]);
    }

    #[test]
    fn random_k_above_n_errors() {
        let z = column(&[1.0, 2.0]);
        let mut rng = SplitRng::new(4);
        assert!(consolidate_random(&z, 3, &mut rng).is_err());
        assert!(consolidate_coreset(&z, 3).is_err());
        assert!(consolidate_kmeans(&z, 3, 5, &mut rng).is_err());
    }

    #[test]
    fn coreset_hand_case() {
        // Mean of {0, 1, 10} is 11/3; 10 is farthest, then 0 is farthest
        // from 10.
        let z = column(&[0.0, 1.0, 10.0]);
        let out = consolidate_coreset(&z, 2).unwrap();
        assert_eq!(out.data(), &[10.0, 0.0]);
        assert_eq!(coreset_indices(&z, 2).unwrap(), vec![2, 0]);
    }

    #[test]
    fn coreset_full_selection_is_permutation() {
        let mut rng = SplitRng::new(5);
        let z = rng.normal_tensor(alloc::vec![6, 3], 1.0);
        let mut idx = coreset_indices(&z, 6).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn coreset_ties_break_low_index() {
        // Rows 1 and 2 are equidistant from the first pick; the lower index
        // wins.
        let z = column(&[-5.0, 5.0, 5.0]);
        assert_eq!(coreset_indices(&z, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn kmeans_zero_iters_equals_random() {
        let z = column(&[3.0, 1.0, 4.0, 1.5, 9.0]);
        let a = consolidate_kmeans(&z, 2, 0, &mut SplitRng::new(31)).unwrap();
        let b = consolidate_random(&z, 2, &mut SplitRng::new(31)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn kmeans_hand_case_two_clusters() {
        let z = column(&[0.0, 0.0, 10.0, 10.0]);
        let init = column(&[0.0, 10.0]);
        let steps = kmeans_steps_from(&z, init, 2);
        assert_eq!(steps[1].data(), &[0.0, 10.0]);
        assert_eq!(steps[2].data(), &[0.0, 10.0]);
    }

    #[test]
    fn kmeans_empty_cluster_keeps_centroid() {
        // Both initial centroids at 0; ties assign everything to centroid 0,
        // leaving centroid 1 empty and unchanged after one round.
        let z = column(&[0.0, 0.0, 10.0, 10.0]);
        let init = column(&[0.0, 0.0]);
        let steps = kmeans_steps_from(&z, init, 1);
        assert_eq!(steps[1].data(), &[5.0, 0.0]);
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let mut rng = SplitRng::new(77);
        let z = rng.normal_tensor(alloc::vec![32, 4], 1.0);
        let steps = consolidate_kmeans_steps(&z, 4, 5, &mut rng).unwrap();
        let objectives: Vec<f64> = steps.iter().map(|c| kmeans_objective(&z, c)).collect();
        for w in objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {objectives:?}");
        }
    }

    #[test]
    fn selection_weights_reproduce_rows_exactly() {
        let mut rng = SplitRng::new(6);
        let z = rng.normal_tensor(alloc::vec![5, 3], 1.0);
        let idx = coreset_indices(&z, 3).unwrap();
        let w = selection_weights(&idx, 5);
        let via_matmul = w.matmul(&z).unwrap();
        let direct = consolidate_coreset(&z, 3).unwrap();
        assert_eq!(via_matmul.data(), direct.data());
    }

    #[test]
    fn bank_unbounded_keeps_all_in_order() {
        let rng = SplitRng::new(1);
        let mut bank = MemoryBank::new(1, MemoryPolicy::Unbounded, rng);
        for tag in 0..3 {
            bank.append(0, Tensor::full(alloc::vec![2, 1], tag as f64)).unwrap();
        }
        let mem = bank.memory(0).unwrap();
        assert_eq!(mem.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(bank.resident_tokens(0), 6);
    }

    #[test]
    fn bank_last_n_keeps_most_recent() {
        let rng = SplitRng::new(1);
        let mut bank = MemoryBank::new(1, MemoryPolicy::LastN { segments: 2 }, rng);
        for tag in 1..=4 {
            bank.append(0, Tensor::full(alloc::vec![1, 1], tag as f64)).unwrap();
        }
        assert_eq!(bank.memory(0).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn bank_reservoir_respects_cap() {
        let rng = SplitRng::new(9);
        let mut bank = MemoryBank::new(1, MemoryPolicy::GlobalRandom { cap_tokens: 8 }, rng);
        for tag in 0..10 {
            bank.append(0, Tensor::full(alloc::vec![4, 1], tag as f64)).unwrap();
            assert!(bank.resident_tokens(0) <= 8);
        }
        assert_eq!(bank.resident_tokens(0), 8);
    }

    #[test]
    fn bank_policy_caps_by_layer() {
        let rng = SplitRng::new(2);
        let mut bank = MemoryBank::new(3, MemoryPolicy::LastN { segments: 1 }, rng);
        for layer in 0..3 {
            bank.append(layer, Tensor::full(alloc::vec![4, 2], 1.0)).unwrap();
            bank.append(layer, Tensor::full(alloc::vec![4, 2], 2.0)).unwrap();
        }
        assert_eq!(bank.max_resident_tokens(), 4);
    }
}
