//! Submanifold attention over sparse spatio-temporal point sets.
//!
//! Every present-frame point is a query. Its keys and values are the points
//! inside a `(w_t, w_x, w_y)` half-extent window around it, so neighborhoods
//! have variable sizes. Past frames are thinned beforehand by a probability
//! threshold on their logits.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::sampling::PassResult;
use crate::sigmoid;

/// Points from `T` frames (`t = 0` is the present) with `D`-dimensional features.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTemporalSet {
    dim: usize,
    positions: Vec<(usize, Cell)>,
    features: Vec<f64>,
    seen: HashSet<(usize, Cell)>,
}

impl SparseTemporalSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, positions: Vec::new(), features: Vec::new(), seen: HashSet::new() }
    }

    pub fn push(&mut self, t: usize, cell: Cell, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::Argument(format!("feature has {} entries, expected {}", feature.len(), self.dim)));
        }
        if !feature.iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("non-finite temporal feature".into()));
        }
        if !self.seen.insert((t, cell)) {
            return Err(Error::Argument(format!("duplicate entry at t={t} ({}, {})", cell.ix, cell.iy)));
        }
        self.positions.push((t, cell));
        self.features.extend_from_slice(feature);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> (usize, Cell) {
        self.positions[i]
    }

    pub fn positions(&self) -> &[(usize, Cell)] {
        &self.positions
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copy with a replaced feature buffer (same layout).
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        if features.len() != self.features.len() {
            return Err(Error::Argument("feature buffer size mismatch".into()));
        }
        Ok(Self { features, ..self.clone() })
    }

    /// Indices of present-frame entries, in insertion order.
    pub fn queries(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.positions[i].0 == 0).collect()
    }

    pub fn n_past(&self) -> usize {
        self.positions.iter().filter(|(t, _)| *t > 0).count()
    }
}

/// Half-extent window `(w_t, w_x, w_y)`; `infinite` disables the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub w_t: usize,
    pub w_x: usize,
    pub w_y: usize,
    pub infinite: bool,
}

impl WindowSpec {
    pub fn new(w_t: usize, w_x: usize, w_y: usize) -> Self {
        Self { w_t, w_x, w_y, infinite: false }
    }

    pub fn infinite() -> Self {
        Self { w_t: 0, w_x: 0, w_y: 0, infinite: true }
    }

    fn contains(&self, query: (usize, Cell), key: (usize, Cell)) -> bool {
        self.infinite
            || (key.0.abs_diff(query.0) <= self.w_t
                && key.1.ix.abs_diff(query.1.ix) <= self.w_x
                && key.1.iy.abs_diff(query.1.iy) <= self.w_y)
    }
}

/// Single-head projection matrices, `D x D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    dim: usize,
    pub proj_q: Vec<f64>,
    pub proj_k: Vec<f64>,
    pub proj_v: Vec<f64>,
}

impl AttentionParams {
    pub fn new(dim: usize, proj_q: Vec<f64>, proj_k: Vec<f64>, proj_v: Vec<f64>) -> Result<Self> {
        let n = dim * dim;
        if dim == 0 || proj_q.len() != n || proj_k.len() != n || proj_v.len() != n {
            return Err(Error::Argument(format!("projections must be {dim}x{dim}")));
        }
        if ![&proj_q, &proj_k, &proj_v].iter().all(|m| m.iter().all(|x| x.is_finite())) {
            return Err(Error::Argument("non-finite projection".into()));
        }
        Ok(Self { dim, proj_q, proj_k, proj_v })
    }

    pub fn zeros(dim: usize) -> Self {
        let n = dim * dim;
        Self { dim, proj_q: vec![0.0; n], proj_k: vec![0.0; n], proj_v: vec![0.0; n] }
    }

    /// Gaussian entries with standard deviation `scale / sqrt(D)`.
    pub fn random<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Self {
        let std = scale / (dim as f64).sqrt();
        let mut draw = || (0..dim * dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let proj_q = draw();
        let proj_k = draw();
        let proj_v = draw();
        Self { dim, proj_q, proj_k, proj_v }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Probability cutoff for past-frame points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalThreshold(f64);

impl Default for TemporalThreshold {
    /// `sigmoid(-5)`.
    fn default() -> Self {
        Self(sigmoid(-5.0))
    }
}

impl TemporalThreshold {
    pub fn new(tau_temp: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau_temp) {
            return Err(Error::Argument(format!("tau_temp must lie in [0, 1], got {tau_temp}")));
        }
        Ok(Self(tau_temp))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// One frame's pass with the per-cell features that enter the temporal set.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPass {
    pub frame: usize,
    pub pass: PassResult,
    /// `len x D` row-major.
    pub features: Vec<f64>,
}

/// Keeps every present-frame point and the past points with
/// `sigmoid(logit) > tau_temp`.
pub fn temporal_filter(per_frame: &[TaggedPass], dim: usize, thr: TemporalThreshold) -> Result<SparseTemporalSet> {
    let mut set = SparseTemporalSet::new(dim);
    for frame in per_frame {
        if frame.features.len() != frame.pass.len() * dim {
            return Err(Error::Argument(format!("frame {} features do not match its pass", frame.frame)));
        }
        for (i, (cell, logit)) in frame.pass.iter().enumerate() {
            if frame.frame == 0 || sigmoid(logit) > thr.value() {
                set.push(frame.frame, cell, &frame.features[i * dim..(i + 1) * dim])?;
            }
        }
    }
    Ok(set)
}

/// Neighbor lists of every query, each in ascending entry order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub queries: Vec<usize>,
    pub lists: Vec<Vec<usize>>,
}

impl NeighborIndex {
    /// `sum |N(q)|`, the number of query/key pairs attention evaluates.
    pub fn n_pairs(&self) -> u64 {
        self.lists.iter().map(|l| l.len() as u64).sum()
    }
}

/// Spatial-hash neighbor search. Bucket sides are at least the window
/// half-extents, so candidates lie in the 3x3 surrounding buckets.
pub fn build_neighbor_index(set: &SparseTemporalSet, window: WindowSpec) -> NeighborIndex {
    let queries = set.queries();
    if window.infinite {
        let all: Vec<usize> = (0..set.len()).collect();
        return NeighborIndex { lists: vec![all; queries.len()], queries };
    }
    let bx = window.w_x.max(1);
    let by = window.w_y.max(1);
    let mut buckets: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, (_, cell)) in set.positions.iter().enumerate() {
        buckets.entry((cell.ix / bx, cell.iy / by)).or_default().push(i);
    }
    let lists = queries
        .iter()
        .map(|&q| {
            let (tq, cq) = set.positions[q];
            let (qx, qy) = (cq.ix / bx, cq.iy / by);
            let mut list = Vec::new();
            for x in qx.saturating_sub(1)..=qx + 1 {
                for y in qy.saturating_sub(1)..=qy + 1 {
                    if let Some(bucket) = buckets.get(&(x, y)) {
                        list.extend(bucket.iter().copied().filter(|&e| window.contains((tq, cq), set.positions[e])));
                    }
                }
            }
            list.sort_unstable();
            list
        })
        .collect();
    NeighborIndex { queries, lists }
}

/// O(N^2) reference for [`build_neighbor_index`].
pub fn brute_force_neighbors(set: &SparseTemporalSet, window: WindowSpec) -> NeighborIndex {
    let queries = set.queries();
    let lists = queries
        .iter()
        .map(|&q| (0..set.len()).filter(|&e| window.contains(set.positions[q], set.positions[e])).collect())
        .collect();
    NeighborIndex { queries, lists }
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub index: NeighborIndex,
    /// Softmax weights aligned with `index.lists`.
    pub weights: Vec<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    inputs: Vec<f64>,
    dim: usize,
}

/// Per-query outputs (`n_queries x D`, query order of `set.queries()`) and the
/// saved state.
pub fn submanifold_attention(
    set: &SparseTemporalSet,
    window: WindowSpec,
    params: &AttentionParams,
) -> Result<(Vec<f64>, AttentionState)> {
    let index = build_neighbor_index(set, window);
    attend(set, index, params)
}

/// Attention over an explicit neighbor index (lists may be caller-filtered).
pub fn attend(set: &SparseTemporalSet, index: NeighborIndex, params: &AttentionParams) -> Result<(Vec<f64>, AttentionState)> {
    let d = set.dim();
    if params.dim != d {
        return Err(Error::Argument(format!("attention dim {} but features have dim {d}", params.dim)));
    }
    let n = set.len();
    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    for i in 0..n {
        let f = set.feature(i);
        matvec(&params.proj_q, f, &mut q[i * d..(i + 1) * d]);
        matvec(&params.proj_k, f, &mut k[i * d..(i + 1) * d]);
        matvec(&params.proj_v, f, &mut v[i * d..(i + 1) * d]);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; index.queries.len() * d];
    let mut weights = Vec::with_capacity(index.queries.len());
    for (qi, (&query, list)) in index.queries.iter().zip(&index.lists).enumerate() {
        let qv = &q[query * d..(query + 1) * d];
        let scores: Vec<f64> = list.iter().map(|&e| scale * dot(qv, &k[e * d..(e + 1) * d])).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let o = &mut out[qi * d..(qi + 1) * d];
        for (&e, &a) in list.iter().zip(&w) {
            for (oc, vc) in o.iter_mut().zip(&v[e * d..(e + 1) * d]) {
                *oc += a * vc;
            }
        }
        weights.push(w);
    }
    Ok((out, AttentionState { index, weights, q, k, v, inputs: set.features.clone(), dim: d }))
}

/// Gradients of the attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    /// `n_entries x D`, aligned with the input set.
    pub features: Vec<f64>,
    pub proj_q: Vec<f64>,
    pub proj_k: Vec<f64>,
    pub proj_v: Vec<f64>,
}

pub fn submanifold_attention_backward(
    state: &AttentionState,
    params: &AttentionParams,
    grad_out: &[f64],
) -> Result<AttentionGrads> {
    let d = state.dim;
    if grad_out.len() != state.index.queries.len() * d {
        return Err(Error::Argument(format!(
            "gradient has {} entries, expected {} queries x {d}",
            grad_out.len(),
            state.index.queries.len()
        )));
    }
    let n = state.inputs.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for (qi, (&query, list)) in state.index.queries.iter().zip(&state.index.lists).enumerate() {
        let go = &grad_out[qi * d..(qi + 1) * d];
        let w = &state.weights[qi];
        let da: Vec<f64> = list.iter().map(|&e| dot(go, &state.v[e * d..(e + 1) * d])).collect();
        let mean: f64 = w.iter().zip(&da).map(|(a, g)| a * g).sum();
        for ((&e, &a), &dai) in list.iter().zip(w).zip(&da) {
            for c in 0..d {
                dv[e * d + c] += a * go[c];
            }
            let ds = a * (dai - mean) * scale;
            for c in 0..d {
                dq[query * d + c] += ds * state.k[e * d + c];
                dk[e * d + c] += ds * state.q[query * d + c];
            }
        }
    }
    let mut grads = AttentionGrads {
        features: vec![0.0; n * d],
        proj_q: vec![0.0; d * d],
        proj_k: vec![0.0; d * d],
        proj_v: vec![0.0; d * d],
    };
    for i in 0..n {
        let f = &state.inputs[i * d..(i + 1) * d];
        let df = &mut grads.features[i * d..(i + 1) * d];
        for (m, dm, g) in [
            (&params.proj_q, &mut grads.proj_q, &dq[i * d..(i + 1) * d]),
            (&params.proj_k, &mut grads.proj_k, &dk[i * d..(i + 1) * d]),
            (&params.proj_v, &mut grads.proj_v, &dv[i * d..(i + 1) * d]),
        ] {
            for r in 0..d {
                if g[r] == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dm[r * d + c] += g[r] * f[c];
                    df[c] += m[r * d + c] * g[r];
                }
            }
        }
    }
    Ok(grads)
}

/// Standard attention of every query over every entry, computed directly.
pub fn dense_attention(set: &SparseTemporalSet, params: &AttentionParams) -> Vec<f64> {
    let d = set.dim();
    let project = |m: &[f64], f: &[f64]| -> Vec<f64> {
        (0..d).map(|r| (0..d).map(|c| m[r * d + c] * f[c]).sum()).collect()
    };
    let keys: Vec<Vec<f64>> = (0..set.len()).map(|i| project(&params.proj_k, set.feature(i))).collect();
    let values: Vec<Vec<f64>> = (0..set.len()).map(|i| project(&params.proj_v, set.feature(i))).collect();
    let mut out = Vec::new();
    for q in set.queries() {
        let qv = project(&params.proj_q, set.feature(q));
        let logits: Vec<f64> = keys.iter().map(|k| dot(&qv, k) / (d as f64).sqrt()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..d {
            out.push(logits.iter().zip(&values).map(|(l, v)| (l - m).exp() / z * v[c]).sum());
        }
    }
    out
}
