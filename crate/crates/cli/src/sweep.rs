//! Sparse-inference sweeps over the fine-window size, the anchor threshold,
//! the coarse subsample factor and the temporal threshold.

use pointbev::attention::{AttentionParams, TemporalThreshold, WindowSpec};
use pointbev::geometry::SceneGeometry;
use pointbev::net::{iou, DenseBevMap};
use pointbev::sampling::{CoarseSpec, PassResult, SampleSet};
use pointbev::temporal::{temporal_forward, TemporalParams};
use pointbev::train::{Model, SceneSample};
use pointbev::{sigmoid, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::CliResult;
use crate::experiment::sparse_eval;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub param: f64,
    /// Fine-window size used with `param`.
    pub k_fine: usize,
    pub n_coarse: f64,
    pub n_fine: f64,
    pub n_sampled: f64,
    pub interp_ops: f64,
    pub iou: f64,
}

impl SweepRow {
    pub const HEADER: [&'static str; 7] = ["param", "k_fine", "n_coarse", "n_fine", "n_sampled", "interp_ops", "iou"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.param.to_string(),
            self.k_fine.to_string(),
            self.n_coarse.to_string(),
            self.n_fine.to_string(),
            self.n_sampled.to_string(),
            self.interp_ops.to_string(),
            self.iou.to_string(),
        ]
    }
}

/// Everything a two-pass sweep holds fixed.
pub struct SweepContext<'a> {
    pub model: &'a Model,
    pub geometry: &'a SceneGeometry,
    pub samples: &'a [SceneSample],
    pub seed: u64,
}

impl SweepContext<'_> {
    fn row(&self, param: f64, coarse: &CoarseSpec, tau: f64, k_fine: usize) -> CliResult<SweepRow> {
        let r = sparse_eval(self.model, self.geometry, self.samples, coarse, self.seed, tau, k_fine)?;
        Ok(SweepRow {
            param,
            k_fine,
            n_coarse: r.n_coarse,
            n_fine: r.n_fine,
            n_sampled: r.n_sampled,
            interp_ops: r.interp_ops,
            iou: r.iou,
        })
    }

    pub fn kfine(&self, coarse: &CoarseSpec, tau: f64, ks: &[usize]) -> CliResult<Vec<SweepRow>> {
        ks.iter().map(|&k| self.row(k as f64, coarse, tau, k)).collect()
    }

    pub fn tau(&self, coarse: &CoarseSpec, taus: &[f64], k_fine: usize) -> CliResult<Vec<SweepRow>> {
        taus.iter().map(|&t| self.row(t, coarse, t, k_fine)).collect()
    }

    /// Regular patterns keeping one cell in `S_k`, each with its paired window.
    pub fn subsample(&self, pairs: &[(u32, usize)], tau: f64) -> CliResult<Vec<SweepRow>> {
        pairs
            .iter()
            .map(|&(s, k)| self.row(s as f64, &CoarseSpec::Regular { spacing: (s as f64).sqrt() }, tau, k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalRow {
    pub tau_temp: f64,
    pub logit: f64,
    pub n_cells: f64,
    pub n_past_candidates: f64,
    pub n_past_kept: f64,
    pub n_pairs: f64,
    pub interp_ops: f64,
    pub iou: f64,
}

impl TemporalRow {
    pub const HEADER: [&'static str; 8] =
        ["param", "logit", "n_cells", "n_past_candidates", "n_past_kept", "n_pairs", "interp_ops", "iou"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.tau_temp.to_string(),
            self.logit.to_string(),
            self.n_cells.to_string(),
            self.n_past_candidates.to_string(),
            self.n_past_kept.to_string(),
            self.n_pairs.to_string(),
            self.interp_ops.to_string(),
            self.iou.to_string(),
        ]
    }
}

/// Temporal settings of `model`, or a lightly initialized attention with
/// `window` when the model was trained without fusion.
pub fn temporal_params(model: &Model, window: WindowSpec, seed: u64) -> TemporalParams {
    model.temporal.clone().unwrap_or_else(|| TemporalParams {
        attn: AttentionParams::random(model.head.dim(), 0.1, &mut ChaCha8Rng::seed_from_u64(seed)),
        window,
        tau: TemporalThreshold::default(),
    })
}

/// Dense temporal pass over every cell for each `tau_temp = sigmoid(logit)`.
pub fn temporal_tau(
    model: &Model,
    params: &TemporalParams,
    geometry: &SceneGeometry,
    samples: &[SceneSample],
    logits: &[f64],
) -> CliResult<Vec<TemporalRow>> {
    let cells = SampleSet::full(&geometry.grid);
    let mut rows = Vec::with_capacity(logits.len());
    for &logit in logits {
        let tau = sigmoid(logit);
        let p = TemporalParams { tau: TemporalThreshold::new(tau)?, ..params.clone() };
        let per_scene: Vec<Result<TemporalRow>> = samples
            .par_iter()
            .map(|s| {
                let fwd = temporal_forward(
                    &model.head,
                    &p,
                    &s.frames,
                    &s.poses,
                    &geometry.rig,
                    &geometry.grid,
                    &geometry.pillar,
                    &cells,
                )?;
                let n_pairs = fwd.n_pairs() as f64;
                let interp_ops = fwd.interp_ops() as f64;
                let n_past_kept = fwd.n_past_kept() as f64;
                let n_past_candidates = fwd.n_past_candidates as f64;
                let pass = PassResult::new(cells.clone(), fwd.logits)?;
                Ok(TemporalRow {
                    tau_temp: tau,
                    logit,
                    n_cells: cells.len() as f64,
                    n_past_candidates,
                    n_past_kept,
                    n_pairs,
                    interp_ops,
                    iou: iou(&DenseBevMap::from_pass(&geometry.grid, &pass), &s.gt)?,
                })
            })
            .collect();
        let mut acc = TemporalRow { tau_temp: tau, logit, n_cells: 0.0, n_past_candidates: 0.0, n_past_kept: 0.0, n_pairs: 0.0, interp_ops: 0.0, iou: 0.0 };
        for r in per_scene {
            let r = r?;
            acc.n_cells += r.n_cells;
            acc.n_past_candidates += r.n_past_candidates;
            acc.n_past_kept += r.n_past_kept;
            acc.n_pairs += r.n_pairs;
            acc.interp_ops += r.interp_ops;
            acc.iou += r.iou;
        }
        let n = samples.len().max(1) as f64;
        for v in [&mut acc.n_cells, &mut acc.n_past_candidates, &mut acc.n_past_kept, &mut acc.n_pairs, &mut acc.interp_ops, &mut acc.iou] {
            *v /= n;
        }
        rows.push(acc);
    }
    Ok(rows)
}
