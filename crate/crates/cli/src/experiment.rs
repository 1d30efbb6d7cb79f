//! The synthetic benchmark: rendering, model acquisition and evaluation.

use std::path::Path;

use pointbev::geometry::SceneGeometry;
use pointbev::net::{iou, load_checkpoint, save_checkpoint, DenseBevMap};
use pointbev::sampling::{CoarseSpec, SampleSet};
use pointbev::train::{mix, render_sample, train, Model, SceneSample, SparseEval, StepMetrics, TrainConfig};
use pointbev::world::{benchmark_scenes, RenderConfig, BENCHMARK_FRAMES};
use rayon::prelude::*;

use crate::config::{ModelArgs, TrainArgs};
use crate::error::{CliError, CliResult};

pub fn load_geometry(path: Option<&Path>, feat_w: usize, feat_h: usize) -> CliResult<SceneGeometry> {
    match path {
        None => Ok(SceneGeometry::synthetic(feat_w, feat_h)),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            SceneGeometry::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Rendered train and eval scenes of the benchmark set.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub geometry: SceneGeometry,
    pub render: RenderConfig,
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

impl Benchmark {
    /// Renders every scene with `history` past frames, one scene per task.
    pub fn render(geometry: SceneGeometry, history: usize) -> CliResult<Self> {
        let render = RenderConfig::default();
        let (train_specs, eval_specs) = benchmark_scenes();
        let draw = |specs: &[pointbev::world::SceneSpec]| -> CliResult<Vec<SceneSample>> {
            let out: pointbev::Result<Vec<_>> =
                specs.par_iter().map(|s| render_sample(s, &geometry, &render, history)).collect();
            Ok(out?)
        };
        let train = draw(&train_specs)?;
        let eval = draw(&eval_specs)?;
        Ok(Self { geometry, render, train, eval })
    }

    pub fn eval_subset(&self, limit: Option<usize>) -> &[SceneSample] {
        &self.eval[..limit.unwrap_or(self.eval.len()).min(self.eval.len())]
    }

    pub fn train_model(&self, cfg: &TrainConfig) -> CliResult<(Model, Vec<StepMetrics>)> {
        Ok(train(&self.train, &self.geometry, cfg)?)
    }
}

/// Loads the checkpoint named in `args` (or trains a default model) and
/// renders the benchmark with enough history for it and for `min_history`.
pub fn prepare(geometry: SceneGeometry, args: &ModelArgs, seed: u64, min_history: usize) -> CliResult<(Model, Benchmark)> {
    let Some(path) = &args.checkpoint else {
        let bench = Benchmark::render(geometry, min_history)?;
        let model = bench.train_model(&TrainArgs::default().to_train_config(seed)?)?.0;
        return Ok((model, bench));
    };
    let tensors = load_checkpoint(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let model = Model::from_tensors(&tensors)?;
    let expected = geometry.pillar.n_z() * RenderConfig::default().channels;
    if model.head.in_dim() != expected {
        return Err(CliError::Config(format!(
            "checkpoint expects {} inputs per cell, geometry provides {expected}",
            model.head.in_dim()
        )));
    }
    let history = if model.temporal.is_some() { BENCHMARK_FRAMES - 1 } else { 0 };
    Ok((model, Benchmark::render(geometry, history.max(min_history))?))
}

pub fn save_model(model: &Model, path: &Path) -> CliResult<()> {
    save_checkpoint(path, &model.to_tensors()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Mean dense-pass IoU and interpolations per scene.
pub fn dense_eval(model: &Model, geometry: &SceneGeometry, samples: &[SceneSample]) -> CliResult<(f64, f64)> {
    let cells = SampleSet::full(&geometry.grid);
    let scores: Vec<pointbev::Result<(f64, u64)>> = samples
        .par_iter()
        .map(|s| {
            let (pass, ops) = model.forward(geometry, s, &cells)?;
            Ok((iou(&DenseBevMap::from_pass(&geometry.grid, &pass), &s.gt)?, ops))
        })
        .collect();
    let (mut total, mut ops) = (0.0, 0.0);
    for s in scores {
        let (i, o) = s?;
        total += i;
        ops += o as f64;
    }
    let n = samples.len().max(1) as f64;
    Ok((total / n, ops / n))
}

/// Seed of the coarse pattern of eval scene `i`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    mix(seed, 100, i as u64)
}

/// Mean two-pass IoU and counts. Scene `i` resolves `coarse` with
/// [`scene_seed`] and its own LiDAR mask.
pub fn sparse_eval(
    model: &Model,
    geometry: &SceneGeometry,
    samples: &[SceneSample],
    coarse: &CoarseSpec,
    seed: u64,
    tau: f64,
    k_fine: usize,
) -> CliResult<SparseEval> {
    let per_scene: Vec<pointbev::Result<SparseEval>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let strategy = coarse.resolve(scene_seed(seed, i), Some(&s.lidar_mask))?;
            let (map, stats) = model.sparse(geometry, s, &strategy, tau, k_fine)?;
            Ok(SparseEval {
                iou: iou(&map, &s.gt)?,
                n_coarse: stats.n_coarse as f64,
                n_fine: stats.n_fine as f64,
                n_sampled: stats.n_sampled as f64,
                interp_ops: stats.interp_ops as f64,
            })
        })
        .collect();
    let mut acc = SparseEval::default();
    for r in per_scene {
        let r = r?;
        acc.iou += r.iou;
        acc.n_coarse += r.n_coarse;
        acc.n_fine += r.n_fine;
        acc.n_sampled += r.n_sampled;
        acc.interp_ops += r.interp_ops;
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
