//! Pointwise segmentation head, loss, optimizer, inference and checkpoints.
//!
//! The head maps one cell's flattened pillar features `x` (`n_z * C`) to a logit:
//! `e = Wf^T x`, `h = relu(Wh e + bh)`, `logit = wo . h + bo`. It never mixes
//! information between cells, so a cell's logit does not depend on which other
//! cells are evaluated with it.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, BevMask, CameraRig, Cell, PillarSpec};
use crate::pulling::{build_visibility_table, sparse_pull, PointBatch, PulledFeatures, VisibilityTable, VolumeSet};
use crate::sampling::{
    densify, merge_passes, sample_coarse, select_anchors, AnchorRule, CoarseStrategy, PassResult, SampleSet,
};
use crate::sigmoid;

pub const DEFAULT_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    in_dim: usize,
    dim: usize,
    /// `in_dim x dim` row-major.
    pub flatten_proj: Vec<f64>,
    /// `dim x dim` row-major.
    pub hidden: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub out: Vec<f64>,
    pub out_bias: f64,
}

impl HeadParams {
    pub fn zeros(in_dim: usize, dim: usize) -> Self {
        Self {
            in_dim,
            dim,
            flatten_proj: vec![0.0; in_dim * dim],
            hidden: vec![0.0; dim * dim],
            hidden_bias: vec![0.0; dim],
            out: vec![0.0; dim],
            out_bias: 0.0,
        }
    }

    /// He-style Gaussian initialization, zero biases.
    pub fn init<R: Rng>(in_dim: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || dim == 0 {
            return Err(Error::Argument("head dimensions must be positive".into()));
        }
        let mut p = Self::zeros(in_dim, dim);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = std * rng.sample::<f64, _>(StandardNormal));
        };
        fill(&mut p.flatten_proj, in_dim);
        fill(&mut p.hidden, dim);
        fill(&mut p.out, dim);
        Ok(p)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.in_dim * self.dim + self.dim * self.dim + 2 * self.dim + 1
    }

    /// All parameters in a fixed order: flatten, hidden, hidden bias, out, out bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.flatten_proj);
        v.extend_from_slice(&self.hidden);
        v.extend_from_slice(&self.hidden_bias);
        v.extend_from_slice(&self.out);
        v.push(self.out_bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Argument(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let (a, rest) = flat.split_at(self.flatten_proj.len());
        let (b, rest) = rest.split_at(self.hidden.len());
        let (c, rest) = rest.split_at(self.dim);
        let (d, e) = rest.split_at(self.dim);
        self.flatten_proj.copy_from_slice(a);
        self.hidden.copy_from_slice(b);
        self.hidden_bias.copy_from_slice(c);
        self.out.copy_from_slice(d);
        self.out_bias = e[0];
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let shapes_ok = self.flatten_proj.len() == self.in_dim * self.dim
            && self.hidden.len() == self.dim * self.dim
            && self.hidden_bias.len() == self.dim
            && self.out.len() == self.dim;
        if !shapes_ok || self.dim == 0 {
            return Err(Error::Argument("head parameter shapes are inconsistent".into()));
        }
        if !self.to_flat().iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("non-finite head parameter".into()));
        }
        Ok(())
    }
}

/// Concatenates the `n_z` slot vectors of every cell in ascending height.
/// Returns `n_cells x (n_z * C)` row-major.
pub fn flatten_pillar(pulled: &PulledFeatures, n_z: usize) -> Result<Vec<f64>> {
    if n_z == 0 || pulled.len() % n_z != 0 {
        return Err(Error::Argument(format!("{} slots do not split into pillars of {n_z}", pulled.len())));
    }
    // slot i * n_z + j is already height j of cell i, so rows are contiguous
    Ok(pulled.features().to_vec())
}

/// Gradient of [`flatten_pillar`]: the layouts coincide.
pub fn unflatten_grad(grad: &[f64]) -> Vec<f64> {
    grad.to_vec()
}

/// Intermediate values of a head forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    x: Vec<f64>,
    e: Vec<f64>,
    pre: Vec<f64>,
    h: Vec<f64>,
    n: usize,
}

/// `e = Wf^T x` for every row.
pub fn embed(params: &HeadParams, x: &[f64]) -> Vec<f64> {
    let (k, d) = (params.in_dim, params.dim);
    let n = x.len() / k;
    let mut e = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let out = &mut e[i * d..(i + 1) * d];
        for (j, &xj) in row.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let w = &params.flatten_proj[j * d..(j + 1) * d];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += xj * wv;
            }
        }
    }
    e
}

/// Embedding-to-logit part of the head; returns logits and `(pre, h)`.
pub fn readout(params: &HeadParams, e: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = params.dim;
    let n = e.len() / d;
    let mut pre = vec![0.0; n * d];
    let mut h = vec![0.0; n * d];
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let ei = &e[i * d..(i + 1) * d];
        for r in 0..d {
            let z = params.hidden_bias[r] + params.hidden[r * d..(r + 1) * d].iter().zip(ei).map(|(a, b)| a * b).sum::<f64>();
            pre[i * d + r] = z;
            h[i * d + r] = z.max(0.0);
        }
        logits[i] = params.out_bias + params.out.iter().zip(&h[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
    }
    (logits, pre, h)
}

pub fn head_forward(params: &HeadParams, x: &[f64]) -> Result<(Vec<f64>, HeadCache)> {
    if x.len() % params.in_dim != 0 {
        return Err(Error::Argument(format!("input length {} is not a multiple of {}", x.len(), params.in_dim)));
    }
    let n = x.len() / params.in_dim;
    let e = embed(params, x);
    let (logits, pre, h) = readout(params, &e);
    Ok((logits, HeadCache { x: x.to_vec(), e, pre, h, n }))
}

/// Gradient of the readout given upstream logit gradients. Accumulates
/// parameter gradients into `grads` and returns `d e`.
pub fn readout_backward(params: &HeadParams, e: &[f64], pre: &[f64], h: &[f64], dlogits: &[f64], grads: &mut HeadParams) -> Vec<f64> {
    let d = params.dim;
    let mut de = vec![0.0; e.len()];
    for (i, &g) in dlogits.iter().enumerate() {
        grads.out_bias += g;
        for r in 0..d {
            grads.out[r] += g * h[i * d + r];
            if pre[i * d + r] <= 0.0 {
                continue;
            }
            let dz = g * params.out[r];
            grads.hidden_bias[r] += dz;
            for c in 0..d {
                grads.hidden[r * d + c] += dz * e[i * d + c];
                de[i * d + c] += dz * params.hidden[r * d + c];
            }
        }
    }
    de
}

/// `d e -> d Wf`, returns `d x`.
pub fn embed_backward(params: &HeadParams, x: &[f64], de: &[f64], grads: &mut HeadParams) -> Vec<f64> {
    let (k, d) = (params.in_dim, params.dim);
    let n = x.len() / k;
    let mut dx = vec![0.0; n * k];
    for i in 0..n {
        let g = &de[i * d..(i + 1) * d];
        for j in 0..k {
            let xj = x[i * k + j];
            let w = &params.flatten_proj[j * d..(j + 1) * d];
            let gw = &mut grads.flatten_proj[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for c in 0..d {
                gw[c] += xj * g[c];
                acc += w[c] * g[c];
            }
            dx[i * k + j] = acc;
        }
    }
    dx
}

/// Parameter gradients (as a `HeadParams`) and input gradients.
pub fn head_backward(params: &HeadParams, cache: &HeadCache, dlogits: &[f64]) -> Result<(HeadParams, Vec<f64>)> {
    if dlogits.len() != cache.n {
        return Err(Error::Argument(format!("{} logit gradients for {} rows", dlogits.len(), cache.n)));
    }
    let mut grads = HeadParams::zeros(params.in_dim, params.dim);
    let de = readout_backward(params, &cache.e, &cache.pre, &cache.h, dlogits, &mut grads);
    let dx = embed_backward(params, &cache.x, &de, &mut grads);
    Ok((grads, dx))
}

/// Everything a pass over a cell set computed, kept for backward.
#[derive(Debug, Clone)]
pub struct CellForward {
    pub pass: PassResult,
    pub table: VisibilityTable,
    pub cache: HeadCache,
}

impl CellForward {
    pub fn interp_ops(&self) -> u64 {
        self.table.interp_ops()
    }
}

/// Pulled, flattened pillar features for `cells` of sample `batch`.
pub fn cell_inputs(
    vols: &VolumeSet,
    rig: &CameraRig,
    grid: &BevGrid,
    spec: &PillarSpec,
    cells: &[Cell],
    batch: usize,
) -> Result<(Vec<f64>, VisibilityTable)> {
    let points = PointBatch::from_cells(grid, spec, cells, batch)?;
    let table = build_visibility_table(rig, &points);
    let pulled = sparse_pull(vols, &table)?;
    Ok((flatten_pillar(&pulled, spec.n_z())?, table))
}

pub fn forward_cells_cached(
    vols: &VolumeSet,
    rig: &CameraRig,
    grid: &BevGrid,
    spec: &PillarSpec,
    cells: &SampleSet,
    params: &HeadParams,
) -> Result<CellForward> {
    params.validate()?;
    if !cells.in_range(grid) {
        return Err(Error::Range("sample set leaves the grid".into()));
    }
    if params.in_dim != spec.n_z() * vols.channels() {
        return Err(Error::Argument(format!(
            "head expects {} inputs but pillars carry {} x {}",
            params.in_dim,
            spec.n_z(),
            vols.channels()
        )));
    }
    let (x, table) = cell_inputs(vols, rig, grid, spec, cells.cells(), 0)?;
    let (logits, cache) = head_forward(params, &x)?;
    Ok(CellForward { pass: PassResult::new(cells.clone(), logits)?, table, cache })
}

/// Logits for `cells` (sample 0 of `vols`).
pub fn forward_cells(
    vols: &VolumeSet,
    rig: &CameraRig,
    grid: &BevGrid,
    spec: &PillarSpec,
    cells: &SampleSet,
    params: &HeadParams,
) -> Result<PassResult> {
    Ok(forward_cells_cached(vols, rig, grid, spec, cells, params)?.pass)
}

/// Mean binary cross-entropy over the sampled cells and its gradient with
/// respect to each logit.
pub fn bce_on_points(result: &PassResult, labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    bce_logits(result.logits(), labels)
}

pub fn bce_logits(logits: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Argument("loss over an empty point set".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Argument(format!("{} logits but {} labels", logits.len(), labels.len())));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let y = if y { 1.0 } else { 0.0 };
        // max(z, 0) - z y + log(1 + exp(-|z|))
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / n);
    }
    Ok((loss / n, grad))
}

/// Adam with the weight-decay term `w * theta` added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 3e-4;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-7;

    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn with_defaults(n_params: usize) -> Self {
        Self::new(n_params, Self::DEFAULT_LR, Self::DEFAULT_WEIGHT_DECAY)
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Full-grid probabilities with the set of cells that were actually evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBevMap {
    nx: usize,
    ny: usize,
    prob: Vec<f64>,
    sampled: Vec<bool>,
}

impl DenseBevMap {
    /// Dense completion: cells outside `pass` get probability 0.
    pub fn from_pass(grid: &BevGrid, pass: &PassResult) -> Self {
        let mut map = Self { nx: grid.nx(), ny: grid.ny(), prob: vec![0.0; grid.n_cells()], sampled: vec![false; grid.n_cells()] };
        for (cell, logit) in pass.iter() {
            let i = grid.flat_index(cell);
            map.prob[i] = sigmoid(logit);
            map.sampled[i] = true;
        }
        map
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn prob(&self, cell: Cell) -> f64 {
        self.prob[cell.iy * self.nx + cell.ix]
    }

    pub fn sampled(&self, cell: Cell) -> bool {
        self.sampled[cell.iy * self.nx + cell.ix]
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    pub fn n_sampled(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }

    pub fn binarize(&self, threshold: f64) -> BevMask {
        BevMask::from_vec(self.nx, self.ny, self.prob.iter().map(|&p| p > threshold).collect())
            .expect("shape preserved")
    }
}

/// Intersection over union of the map binarized at 0.5 (strictly above)
/// against `gt`; 1 when both are empty.
pub fn iou(pred: &DenseBevMap, gt: &BevMask) -> Result<f64> {
    if pred.nx != gt.nx() || pred.ny != gt.ny() {
        return Err(Error::Argument("prediction and ground truth shapes differ".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.prob.iter().zip(gt.data()) {
        let b = p > 0.5;
        inter += (b && g) as usize;
        union += (b || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn dense_inference(
    vols: &VolumeSet,
    rig: &CameraRig,
    grid: &BevGrid,
    spec: &PillarSpec,
    params: &HeadParams,
) -> Result<(DenseBevMap, u64)> {
    let fwd = forward_cells_cached(vols, rig, grid, spec, &SampleSet::full(grid), params)?;
    Ok((DenseBevMap::from_pass(grid, &fwd.pass), fwd.interp_ops()))
}

/// Cell and interpolation counts of a two-pass inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SparseStats {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Distinct cells evaluated by either pass.
    pub n_sampled: usize,
    pub interp_ops: u64,
}

/// Coarse pass, anchors with probability above `tau`, densified fine pass
/// over the anchor windows, merge and dense completion.
#[allow(clippy::too_many_arguments)]
pub fn sparse_inference(
    vols: &VolumeSet,
    rig: &CameraRig,
    grid: &BevGrid,
    spec: &PillarSpec,
    params: &HeadParams,
    coarse: &CoarseStrategy,
    tau: f64,
    k_fine: usize,
) -> Result<(DenseBevMap, SparseStats)> {
    two_pass_inference(grid, coarse, tau, k_fine, |cells| {
        let fwd = forward_cells_cached(vols, rig, grid, spec, cells, params)?;
        let ops = fwd.interp_ops();
        Ok((fwd.pass, ops))
    })
}

/// [`sparse_inference`] over any per-cell model; `forward` returns the pass
/// and its interpolation count.
pub fn two_pass_inference<F>(grid: &BevGrid, coarse: &CoarseStrategy, tau: f64, k_fine: usize, forward: F) -> Result<(DenseBevMap, SparseStats)>
where
    F: Fn(&SampleSet) -> Result<(PassResult, u64)>,
{
    let rule = AnchorRule::Threshold(tau);
    rule.validate()?;
    let coarse_cells = sample_coarse(coarse, grid)?;
    let (coarse_pass, coarse_ops) = forward(&coarse_cells)?;
    let anchors = select_anchors(&coarse_pass, rule);
    let fine_cells = densify(&anchors, k_fine, grid)?;
    let (fine_pass, fine_ops) = forward(&fine_cells)?;
    let merged = merge_passes(&coarse_pass, &fine_pass);
    let stats = SparseStats {
        n_coarse: coarse_cells.len(),
        n_fine: fine_cells.len(),
        n_sampled: merged.len(),
        interp_ops: coarse_ops + fine_ops,
    };
    Ok((DenseBevMap::from_pass(grid, &merged), stats))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PBEV";
const CHECKPOINT_VERSION: u32 = 1;

/// Named f64 tensor for the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    for t in tensors {
        let expected: usize = t.dims.iter().map(|&d| d as usize).product();
        if expected != t.data.len() {
            return Err(Error::Argument(format!("tensor `{}` dims do not match its data", t.name)));
        }
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.dims.len() as u32)?;
        for &d in &t.dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        for &x in &t.data {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Schema("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let truncated = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Schema("truncated checkpoint".into())
            } else {
                Error::Io(e)
            }
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Schema("tensor name is not utf-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let dims = (0..rank).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<u32>>>().map_err(truncated)?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
        out.push(Tensor { name, dims, data });
    }
    Ok(out)
}

impl HeadParams {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let (k, d) = (self.in_dim as u32, self.dim as u32);
        vec![
            Tensor { name: "head.flatten_proj".into(), dims: vec![k, d], data: self.flatten_proj.clone() },
            Tensor { name: "head.hidden".into(), dims: vec![d, d], data: self.hidden.clone() },
            Tensor { name: "head.hidden_bias".into(), dims: vec![d], data: self.hidden_bias.clone() },
            Tensor { name: "head.out".into(), dims: vec![d, 1], data: self.out.clone() },
            Tensor { name: "head.out_bias".into(), dims: vec![], data: vec![self.out_bias] },
        ]
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor `{name}`")))
        };
        let fp = find("head.flatten_proj")?;
        if fp.dims.len() != 2 {
            return Err(Error::Schema("head.flatten_proj must be rank 2".into()));
        }
        let (k, d) = (fp.dims[0] as usize, fp.dims[1] as usize);
        let p = Self {
            in_dim: k,
            dim: d,
            flatten_proj: fp.data.clone(),
            hidden: find("head.hidden")?.data.clone(),
            hidden_bias: find("head.hidden_bias")?.data.clone(),
            out: find("head.out")?.data.clone(),
            out_bias: *find("head.out_bias")?.data.first().ok_or_else(|| Error::Schema("empty out bias".into()))?,
        };
        p.validate().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(p)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path)?;
    read_tensors(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulling::FeatureVolume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volumes(rng: &mut ChaCha8Rng, rig: &CameraRig, c: usize) -> VolumeSet {
        let vols = rig
            .cameras()
            .iter()
            .map(|cam| {
                let (w, h) = (cam.feat_width(), cam.feat_height());
                let data = (0..c * w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
                FeatureVolume::new(cam.camera_id(), c, h, w, data).unwrap()
            })
            .collect();
        VolumeSet::single(vols).unwrap()
    }

    fn setup(seed: u64) -> (VolumeSet, CameraRig, BevGrid, PillarSpec, HeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = CameraRig::synthetic(20, 10);
        let grid = BevGrid::new(20.0, 20.0, 0.5).unwrap();
        let spec = PillarSpec::new(-1.0, 3.0, 4).unwrap();
        let vols = random_volumes(&mut rng, &rig, 3);
        let params = HeadParams::init(12, 8, &mut rng).unwrap();
        (vols, rig, grid, spec, params)
    }

    #[test]
    fn flatten_concatenates_heights() {
        let pulled = PulledFeatures::new(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![true, true]).unwrap();
        assert_eq!(flatten_pillar(&pulled, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(flatten_pillar(&pulled, 4).is_err());
        let blank = PulledFeatures::new(3, vec![0.0; 6], vec![false, false]).unwrap();
        assert!(flatten_pillar(&blank, 2).unwrap().iter().all(|&x| x == 0.0));
        let swapped = PulledFeatures::new(3, vec![4.0, 5.0, 6.0, 1.0, 2.0, 3.0], vec![true, true]).unwrap();
        let a = flatten_pillar(&pulled, 2).unwrap();
        let b = flatten_pillar(&swapped, 2).unwrap();
        assert_eq!(&a[..3], &b[3..]);
        assert_eq!(&a[3..], &b[..3]);
    }

    #[test]
    fn zero_head_outputs_bias() {
        let (vols, rig, grid, spec, _) = setup(1);
        let mut params = HeadParams::zeros(12, 8);
        params.out_bias = -0.75;
        let cells = SampleSet::new(vec![Cell::new(3, 4), Cell::new(20, 20), Cell::new(39, 0)]);
        let pass = forward_cells(&vols, &rig, &grid, &spec, &cells, &params).unwrap();
        assert_eq!(pass.len(), 3);
        assert!(pass.logits().iter().all(|&l| l == -0.75));
    }

    #[test]
    fn single_cell_matches_hand_chain() {
        let (vols, rig, grid, spec, params) = setup(2);
        let cell = Cell::new(27, 19);
        let pass = forward_cells(&vols, &rig, &grid, &spec, &SampleSet::new(vec![cell]), &params).unwrap();
        // recompose from the components, with the MLP written out per unit
        let (x, y) = grid.cell_to_world(cell.ix, cell.iy).unwrap();
        let mut input = Vec::new();
        for z in spec.z_values() {
            let p = nalgebra::Point3::new(x, y, z);
            let cams = crate::geometry::visible_cameras(&rig, &p);
            let mut f = vec![0.0; 3];
            for &c in &cams {
                let proj = rig.camera(c).project(&p);
                let s = crate::pulling::bilinear_sample(vols.get(0, c).unwrap(), proj.u, proj.v).unwrap();
                for ch in 0..3 {
                    f[ch] += s[ch];
                }
            }
            if !cams.is_empty() {
                f.iter_mut().for_each(|v| *v /= cams.len() as f64);
            }
            input.extend(f);
        }
        let d = 8;
        let e: Vec<f64> = (0..d).map(|c| (0..12).map(|j| params.flatten_proj[j * d + c] * input[j]).sum()).collect();
        let h: Vec<f64> = (0..d)
            .map(|r| (params.hidden_bias[r] + (0..d).map(|c| params.hidden[r * d + c] * e[c]).sum::<f64>()).max(0.0))
            .collect();
        let logit = params.out_bias + (0..d).map(|r| params.out[r] * h[r]).sum::<f64>();
        assert!((pass.logits()[0] - logit).abs() < 1e-12);
    }

    #[test]
    fn bce_known_values() {
        let cells = SampleSet::new(vec![Cell::new(0, 0), Cell::new(0, 1)]);
        let pass = PassResult::new(cells.clone(), vec![0.0, 0.0]).unwrap();
        let (loss, grad) = bce_on_points(&pass, &[true, false]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.25, 0.25]);
        let sure = PassResult::new(cells, vec![20.0, -20.0]).unwrap();
        assert!(bce_on_points(&sure, &[true, false]).unwrap().0 < 1e-6);
        assert!(bce_logits(&[], &[]).is_err());
        assert!(bce_logits(&[0.0], &[true, false]).is_err());
    }

    #[test]
    fn adam_first_step_and_trace() {
        let mut opt = Adam::new(2, 0.1, 0.0);
        let mut p = vec![1.0, -2.0];
        opt.update(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut opt = Adam::new(3, 0.01, 0.0);
        let mut p = vec![0.0; 3];
        opt.update(&mut p, &[3.0, -0.5, 1e-3]).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-6);
        }

        // f(a, b) = a^2 + 3 b^2 from (1, 1), three steps, recomputed by hand
        let mut opt = Adam::new(2, 0.1, 0.0);
        let mut p = vec![1.0, 1.0];
        let (mut m, mut v, mut q) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, 1.0]);
        for t in 1..=3 {
            let g = [2.0 * p[0], 6.0 * p[1]];
            opt.update(&mut p, &g).unwrap();
            for i in 0..2 {
                let gi = if i == 0 { 2.0 * q[0] } else { 6.0 * q[1] };
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                q[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
        }
        assert!(Adam::new(2, 0.1, 0.0).update(&mut [0.0], &[0.0]).is_err());
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut opt = Adam::new(1, 0.1, 0.5);
        let mut p = vec![2.0];
        opt.update(&mut p, &[0.0]).unwrap();
        // gradient w * theta = 1 is positive, so the parameter shrinks by lr
        assert!((p[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn iou_cases() {
        let grid = BevGrid::new(5.0, 5.0, 0.5).unwrap();
        let mut gt = BevMask::new(&grid);
        gt.set(Cell::new(1, 1), true);
        gt.set(Cell::new(2, 1), true);
        let hit = PassResult::new(SampleSet::new(vec![Cell::new(1, 1), Cell::new(2, 1)]), vec![3.0, 3.0]).unwrap();
        assert_eq!(iou(&DenseBevMap::from_pass(&grid, &hit), &gt).unwrap(), 1.0);
        let miss = PassResult::new(SampleSet::new(vec![Cell::new(5, 5)]), vec![3.0]).unwrap();
        assert_eq!(iou(&DenseBevMap::from_pass(&grid, &miss), &gt).unwrap(), 0.0);
        let empty = PassResult::new(SampleSet::new(vec![]), vec![]).unwrap();
        assert_eq!(iou(&DenseBevMap::from_pass(&grid, &empty), &BevMask::new(&grid)).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cells = grid.all_cells();
        let logits: Vec<f64> = cells.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut gt = BevMask::new(&grid);
        for &c in &cells {
            gt.set(c, rng.random_bool(0.4));
        }
        let map = DenseBevMap::from_pass(&grid, &PassResult::new(SampleSet::new(cells.clone()), logits.clone()).unwrap());
        let inter = cells.iter().zip(&logits).filter(|(c, l)| **l > 0.0 && gt.get(**c)).count();
        let union = cells.iter().zip(&logits).filter(|(c, l)| **l > 0.0 || gt.get(**c)).count();
        assert!((iou(&map, &gt).unwrap() - inter as f64 / union as f64).abs() < 1e-15);
    }

    #[test]
    fn sparse_inference_laws() {
        let (vols, rig, grid, spec, params) = setup(5);
        let (dense, _) = dense_inference(&vols, &rig, &grid, &spec, &params).unwrap();
        let (full, stats) = sparse_inference(&vols, &rig, &grid, &spec, &params, &CoarseStrategy::regular(1.0), 0.7, 3).unwrap();
        assert_eq!(full, dense);
        assert_eq!(stats.n_coarse, grid.n_cells());
        let (covered, _) = sparse_inference(&vols, &rig, &grid, &spec, &params, &CoarseStrategy::regular(4.0), 0.0, 9).unwrap();
        assert_eq!(covered, dense);
        let (strict, stats) = sparse_inference(&vols, &rig, &grid, &spec, &params, &CoarseStrategy::regular(4.0), 0.99, 9).unwrap();
        assert!(stats.n_fine < grid.n_cells() / 4);
        for c in grid.all_cells() {
            if strict.sampled(c) {
                assert_eq!(strict.prob(c), dense.prob(c));
            } else {
                assert_eq!(strict.prob(c), 0.0);
            }
        }
    }

    #[test]
    fn head_gradient_matches_differences() {
        let (vols, rig, grid, spec, params) = setup(6);
        let cells = SampleSet::new(vec![Cell::new(10, 30), Cell::new(30, 12), Cell::new(5, 5), Cell::new(33, 33)]);
        let labels = [true, false, true, false];
        let fwd = forward_cells_cached(&vols, &rig, &grid, &spec, &cells, &params).unwrap();
        let (_, dl) = bce_on_points(&fwd.pass, &labels).unwrap();
        let (grads, _) = head_backward(&params, &fwd.cache, &dl).unwrap();
        let g = grads.to_flat();
        let base = params.to_flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut x = base.clone();
            x[i] += h;
            p.set_flat(&x).unwrap();
            let up = bce_on_points(&forward_cells(&vols, &rig, &grid, &spec, &cells, &p).unwrap(), &labels).unwrap().0;
            x[i] -= 2.0 * h;
            p.set_flat(&x).unwrap();
            let down = bce_on_points(&forward_cells(&vols, &rig, &grid, &spec, &cells, &p).unwrap(), &labels).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(g[i].abs()).max(1e-3), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, _, _, _, params) = setup(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pbev");
        save_checkpoint(&path, &params.to_tensors()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PBEV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = HeadParams::from_tensors(&load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(back, params);
        assert!(matches!(read_tensors(&bytes[..bytes.len() - 3]), Err(Error::Schema(_))));
        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(Error::Schema(_))));
    }
}
