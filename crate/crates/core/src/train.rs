//! Training and evaluation on rendered synthetic scenes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, TemporalThreshold, WindowSpec};
use crate::error::{Error, Result};
use crate::geometry::{BevMask, Cell, SceneGeometry};
use crate::net::{
    bce_logits, dense_inference, forward_cells_cached, head_backward, iou, two_pass_inference, Adam, DenseBevMap,
    HeadParams, SparseStats, Tensor, DEFAULT_DIM,
};
use crate::pulling::VolumeSet;
use crate::sampling::{
    cap_budget, densify, lidar_to_mask, sample_coarse, select_anchors, AnchorRule, CoarseStrategy, PassResult, SampleSet,
};
use crate::temporal::{temporal_backward, temporal_forward, TemporalParams};
use crate::world::{rasterize_gt, render_features, simulate_lidar, EgoPose, RenderConfig, SceneSpec};

/// One scene rendered for training or evaluation. The present frame is the
/// scene's last frame; `frames[t]` is `t` frames before it.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub frames: Vec<VolumeSet>,
    pub poses: Vec<EgoPose>,
    pub gt: BevMask,
    pub lidar_mask: BevMask,
}

impl SceneSample {
    pub fn present(&self) -> &VolumeSet {
        &self.frames[0]
    }
}

/// Renders the present frame and up to `history` past frames.
pub fn render_sample(spec: &SceneSpec, geometry: &SceneGeometry, cfg: &RenderConfig, history: usize) -> Result<SceneSample> {
    let last = spec.n_frames() - 1;
    let n = (history + 1).min(spec.n_frames());
    let mut frames = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for t in 0..n {
        let frame = last - t;
        let vols = render_features(spec, &geometry.rig, frame, cfg.channels, cfg.noise_sigma, spec.seed)?;
        frames.push(VolumeSet::single(vols)?);
        poses.push(spec.ego_poses[frame]);
    }
    let lidar = simulate_lidar(spec, last, cfg.n_beams, spec.seed)?;
    Ok(SceneSample {
        frames,
        poses,
        gt: rasterize_gt(spec, &geometry.grid, last)?,
        lidar_mask: lidar_to_mask(&lidar, &geometry.grid),
    })
}

pub fn render_samples(specs: &[SceneSpec], geometry: &SceneGeometry, cfg: &RenderConfig, history: usize) -> Result<Vec<SceneSample>> {
    specs.iter().map(|s| render_sample(s, geometry, cfg, history)).collect()
}

/// Static head with optional temporal fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub head: HeadParams,
    pub temporal: Option<TemporalParams>,
}

impl Model {
    /// Logits of `cells` and the interpolations spent on them.
    pub fn forward(&self, geometry: &SceneGeometry, sample: &SceneSample, cells: &SampleSet) -> Result<(PassResult, u64)> {
        match &self.temporal {
            None => {
                let fwd =
                    forward_cells_cached(sample.present(), &geometry.rig, &geometry.grid, &geometry.pillar, cells, &self.head)?;
                let ops = fwd.interp_ops();
                Ok((fwd.pass, ops))
            }
            Some(t) => {
                let fwd = temporal_forward(
                    &self.head,
                    t,
                    &sample.frames,
                    &sample.poses,
                    &geometry.rig,
                    &geometry.grid,
                    &geometry.pillar,
                    cells,
                )?;
                let ops = fwd.interp_ops();
                Ok((PassResult::new(cells.clone(), fwd.logits)?, ops))
            }
        }
    }

    pub fn dense(&self, geometry: &SceneGeometry, sample: &SceneSample) -> Result<DenseBevMap> {
        match self.temporal {
            None => Ok(dense_inference(sample.present(), &geometry.rig, &geometry.grid, &geometry.pillar, &self.head)?.0),
            Some(_) => {
                let (pass, _) = self.forward(geometry, sample, &SampleSet::full(&geometry.grid))?;
                Ok(DenseBevMap::from_pass(&geometry.grid, &pass))
            }
        }
    }

    pub fn sparse(
        &self,
        geometry: &SceneGeometry,
        sample: &SceneSample,
        coarse: &CoarseStrategy,
        tau: f64,
        k_fine: usize,
    ) -> Result<(DenseBevMap, SparseStats)> {
        two_pass_inference(&geometry.grid, coarse, tau, k_fine, |cells| self.forward(geometry, sample, cells))
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.head.to_flat();
        if let Some(t) = &self.temporal {
            v.extend_from_slice(&t.attn.proj_q);
            v.extend_from_slice(&t.attn.proj_k);
            v.extend_from_slice(&t.attn.proj_v);
        }
        v
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.head.n_params();
        self.head.set_flat(&flat[..n])?;
        if let Some(t) = &mut self.temporal {
            let dd = t.attn.dim() * t.attn.dim();
            t.attn.proj_q.copy_from_slice(&flat[n..n + dd]);
            t.attn.proj_k.copy_from_slice(&flat[n + dd..n + 2 * dd]);
            t.attn.proj_v.copy_from_slice(&flat[n + 2 * dd..n + 3 * dd]);
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = self.head.to_tensors();
        if let Some(t) = &self.temporal {
            let d = t.attn.dim() as u32;
            for (name, data) in [("attn.q", &t.attn.proj_q), ("attn.k", &t.attn.proj_k), ("attn.v", &t.attn.proj_v)] {
                out.push(Tensor { name: name.into(), dims: vec![d, d], data: data.clone() });
            }
            let w = t.window;
            out.push(Tensor {
                name: "attn.window".into(),
                dims: vec![4],
                data: vec![w.w_t as f64, w.w_x as f64, w.w_y as f64, if w.infinite { 1.0 } else { 0.0 }],
            });
            out.push(Tensor { name: "attn.tau_temp".into(), dims: vec![], data: vec![t.tau.value()] });
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let head = HeadParams::from_tensors(tensors)?;
        let get = |name: &str| tensors.iter().find(|t| t.name == name);
        let temporal = match (get("attn.q"), get("attn.k"), get("attn.v")) {
            (Some(q), Some(k), Some(v)) => {
                let attn = AttentionParams::new(head.dim(), q.data.clone(), k.data.clone(), v.data.clone())
                    .map_err(|e| Error::Schema(e.to_string()))?;
                let w = get("attn.window").ok_or_else(|| Error::Schema("checkpoint lacks attn.window".into()))?;
                if w.data.len() != 4 {
                    return Err(Error::Schema("attn.window must hold 4 values".into()));
                }
                let window = if w.data[3] != 0.0 {
                    WindowSpec::infinite()
                } else {
                    WindowSpec::new(w.data[0] as usize, w.data[1] as usize, w.data[2] as usize)
                };
                let tau = get("attn.tau_temp").and_then(|t| t.data.first().copied()).ok_or_else(|| Error::Schema("checkpoint lacks attn.tau_temp".into()))?;
                let tau = TemporalThreshold::new(tau).map_err(|e| Error::Schema(e.to_string()))?;
                Some(TemporalParams { attn, window, tau })
            }
            (None, None, None) => None,
            _ => return Err(Error::Schema("incomplete attention tensors".into())),
        };
        Ok(Self { head, temporal })
    }
}

/// Temporal fusion settings for training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalConfig {
    pub window: WindowSpec,
    pub tau: TemporalThreshold,
    /// Past frames fed to the model.
    pub history: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n_anchor: usize,
    pub k_fine: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dim: usize,
    pub seed: u64,
    pub temporal: Option<TemporalConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 1,
            n_coarse: 2500,
            n_fine: 2500,
            n_anchor: 100,
            k_fine: 9,
            lr: 1e-2,
            weight_decay: Adam::DEFAULT_WEIGHT_DECAY,
            dim: DEFAULT_DIM,
            seed: 42,
            temporal: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Argument("steps and batch must be positive".into()));
        }
        if self.n_coarse == 0 {
            return Err(Error::Argument("n_coarse must be positive".into()));
        }
        if self.k_fine % 2 == 0 {
            return Err(Error::Argument(format!("k_fine must be odd, got {}", self.k_fine)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Argument("learning rate must be positive and weight decay non-negative".into()));
        }
        if self.dim == 0 {
            return Err(Error::Argument("dim must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// IoU of the binarized sampled logits against their labels.
    pub iou: f64,
    pub n_points: usize,
    pub interp_ops: u64,
}

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn init_model(cfg: &TrainConfig, in_dim: usize) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
    let head = HeadParams::init(in_dim, cfg.dim, &mut rng)?;
    let temporal = cfg.temporal.map(|t| TemporalParams {
        // small start so the fused model begins close to the static head
        attn: AttentionParams::random(cfg.dim, 0.1, &mut rng),
        window: t.window,
        tau: t.tau,
    });
    Ok(Model { head, temporal })
}

/// Cells one training scene is evaluated on: a random coarse set plus the
/// capped fine windows around its top-scoring cells (fine cells already in the
/// coarse set are not repeated).
fn training_cells(model: &Model, geometry: &SceneGeometry, sample: &SceneSample, cfg: &TrainConfig, seed: u64) -> Result<(SampleSet, u64)> {
    let coarse = sample_coarse(&CoarseStrategy::random(cfg.n_coarse, mix(seed, 2, 0)), &geometry.grid)?;
    if cfg.n_fine == 0 {
        return Ok((coarse, 0));
    }
    let (pass, ops) = model.forward(geometry, sample, &coarse)?;
    let anchors = select_anchors(&pass, AnchorRule::TopK(cfg.n_anchor));
    let fine = cap_budget(&densify(&anchors, cfg.k_fine, &geometry.grid)?, cfg.n_fine, mix(seed, 3, 0));
    let seen: HashSet<Cell> = coarse.cells().iter().copied().collect();
    let mut cells = coarse.into_cells();
    cells.extend(fine.cells().iter().copied().filter(|c| !seen.contains(c)));
    Ok((SampleSet::dedup(cells), ops))
}

fn sampled_iou(logits: &[f64], labels: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&l, &y) in logits.iter().zip(labels) {
        inter += (l > 0.0 && y) as usize;
        union += (l > 0.0 || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Loss and flat parameter gradient of one scene.
fn scene_gradient(model: &Model, geometry: &SceneGeometry, sample: &SceneSample, cells: &SampleSet) -> Result<(f64, Vec<f64>, f64, u64)> {
    let labels: Vec<bool> = cells.cells().iter().map(|&c| sample.gt.get(c)).collect();
    match &model.temporal {
        None => {
            let fwd = forward_cells_cached(sample.present(), &geometry.rig, &geometry.grid, &geometry.pillar, cells, &model.head)?;
            let (loss, dl) = bce_logits(fwd.pass.logits(), &labels)?;
            let (grads, _) = head_backward(&model.head, &fwd.cache, &dl)?;
            Ok((loss, grads.to_flat(), sampled_iou(fwd.pass.logits(), &labels), fwd.interp_ops()))
        }
        Some(t) => {
            let fwd = temporal_forward(&model.head, t, &sample.frames, &sample.poses, &geometry.rig, &geometry.grid, &geometry.pillar, cells)?;
            let (loss, dl) = bce_logits(&fwd.logits, &labels)?;
            let g = temporal_backward(&model.head, t, &fwd, &dl)?;
            let mut flat = g.head.to_flat();
            flat.extend_from_slice(&g.attn.proj_q);
            flat.extend_from_slice(&g.attn.proj_k);
            flat.extend_from_slice(&g.attn.proj_v);
            Ok((loss, flat, sampled_iou(&fwd.logits, &labels), fwd.interp_ops()))
        }
    }
}

/// Runs `cfg.steps` Adam steps over `samples`, visiting scenes in a seeded
/// order that is reshuffled every epoch. Gradients of a batch are averaged in
/// scene order.
pub fn train(samples: &[SceneSample], geometry: &SceneGeometry, cfg: &TrainConfig) -> Result<(Model, Vec<StepMetrics>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("no training scenes".into()));
    }
    let in_dim = geometry.pillar.n_z() * samples[0].present().channels();
    let mut model = init_model(cfg, in_dim)?;
    let mut params = model.flat();
    let mut opt = Adam::new(params.len(), cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; params.len()];
        let mut row = StepMetrics { step, loss: 0.0, iou: 0.0, n_points: 0, interp_ops: 0 };
        for b in 0..cfg.batch {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 4, epoch)));
                epoch += 1;
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let seed = mix(cfg.seed, 5 + step as u64, b as u64);
            let (cells, coarse_ops) = training_cells(&model, geometry, sample, cfg, seed)?;
            let (loss, g, iou, ops) = scene_gradient(&model, geometry, sample, &cells)?;
            for (a, x) in grad.iter_mut().zip(&g) {
                *a += x / cfg.batch as f64;
            }
            row.loss += loss / cfg.batch as f64;
            row.iou += iou / cfg.batch as f64;
            row.n_points += cells.len();
            row.interp_ops += ops + coarse_ops;
        }
        opt.update(&mut params, &grad)?;
        model.set_flat(&params)?;
        log.push(row);
    }
    Ok((model, log))
}

/// Mean dense-pass IoU over `samples`.
pub fn eval_dense(model: &Model, geometry: &SceneGeometry, samples: &[SceneSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += iou(&model.dense(geometry, s)?, &s.gt)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Averages of a two-pass evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SparseEval {
    pub iou: f64,
    pub n_coarse: f64,
    pub n_fine: f64,
    pub n_sampled: f64,
    pub interp_ops: f64,
}

/// Mean two-pass IoU and counts; `coarse` builds the coarse strategy of each
/// scene from its index and sample.
pub fn eval_sparse<F>(model: &Model, geometry: &SceneGeometry, samples: &[SceneSample], tau: f64, k_fine: usize, coarse: F) -> Result<SparseEval>
where
    F: Fn(usize, &SceneSample) -> Result<CoarseStrategy>,
{
    let mut acc = SparseEval::default();
    for (i, s) in samples.iter().enumerate() {
        let (map, stats) = model.sparse(geometry, s, &coarse(i, s)?, tau, k_fine)?;
        acc.iou += iou(&map, &s.gt)?;
        acc.n_coarse += stats.n_coarse as f64;
        acc.n_fine += stats.n_fine as f64;
        acc.n_sampled += stats.n_sampled as f64;
        acc.interp_ops += stats.interp_ops as f64;
    }
    let n = samples.len().max(1) as f64;
    Ok(SparseEval {
        iou: acc.iou / n,
        n_coarse: acc.n_coarse / n,
        n_fine: acc.n_fine / n,
        n_sampled: acc.n_sampled / n,
        interp_ops: acc.interp_ops / n,
    })
}
