//! Temporal fusion for the pointwise head.
//!
//! The cells of the present frame are re-expressed in each past ego frame and
//! pulled from that frame's cameras. Past points whose static-head probability
//! clears `tau_temp` join the present points in a sparse spatio-temporal set;
//! every present embedding then attends over its window and the attention
//! output is added back before the readout.

use std::ops::Range;

use nalgebra::Point3;

use crate::attention::{
    submanifold_attention, submanifold_attention_backward, AttentionGrads, AttentionParams, AttentionState,
    SparseTemporalSet, TemporalThreshold, WindowSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraRig, PillarSpec};
use crate::net::{embed, embed_backward, readout, readout_backward, HeadParams};
use crate::pulling::{build_visibility_table, sparse_pull, PointBatch, VisibilityTable, VolumeSet};
use crate::sampling::SampleSet;
use crate::sigmoid;
use crate::world::EgoPose;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalParams {
    pub attn: AttentionParams,
    pub window: WindowSpec,
    pub tau: TemporalThreshold,
}

/// Pillars over `cells` of the present frame, expressed in another ego frame.
pub fn pillars_in_frame(
    grid: &BevGrid,
    spec: &PillarSpec,
    cells: &SampleSet,
    present: &EgoPose,
    other: &EgoPose,
) -> Result<PointBatch> {
    let mut batch = PointBatch::from_cells(grid, spec, cells.cells(), 0)?;
    for p in batch.points.iter_mut() {
        let q = other.world_to_ego(present.ego_to_world([p.x, p.y]));
        *p = Point3::new(q[0], q[1], p.z);
    }
    Ok(batch)
}

/// Forward state of a temporal pass.
#[derive(Debug, Clone)]
pub struct TemporalForward {
    pub logits: Vec<f64>,
    /// Pulled inputs and visibility of every frame, present first.
    pub inputs: Vec<Vec<f64>>,
    pub tables: Vec<VisibilityTable>,
    /// Embeddings of every frame before fusion.
    pub embeddings: Vec<Vec<f64>>,
    /// Set entry -> (frame, cell row); present entries come first.
    pub entries: Vec<(usize, usize)>,
    pub attention: AttentionState,
    fused: Vec<f64>,
    pre: Vec<f64>,
    h: Vec<f64>,
    /// Past points considered before filtering.
    pub n_past_candidates: usize,
}

impl TemporalForward {
    pub fn n_past_kept(&self) -> usize {
        self.entries.len() - self.logits.len()
    }

    pub fn n_pairs(&self) -> u64 {
        self.attention.index.n_pairs()
    }

    pub fn interp_ops(&self) -> u64 {
        self.tables.iter().map(|t| t.interp_ops()).sum()
    }
}

fn rows(i: usize, d: usize) -> Range<usize> {
    i * d..(i + 1) * d
}

/// `frames[t]` and `poses[t]` describe temporal index `t` (0 is the present).
#[allow(clippy::too_many_arguments)]
pub fn temporal_forward(
    head: &HeadParams,
    temporal: &TemporalParams,
    frames: &[VolumeSet],
    poses: &[EgoPose],
    rig: &CameraRig,
    grid: &BevGrid,
    spec: &PillarSpec,
    cells: &SampleSet,
) -> Result<TemporalForward> {
    if frames.is_empty() || frames.len() != poses.len() {
        return Err(Error::Argument(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    if temporal.attn.dim() != head.dim() {
        return Err(Error::Argument("attention and head dimensions differ".into()));
    }
    if !cells.in_range(grid) {
        return Err(Error::Range("sample set leaves the grid".into()));
    }
    let d = head.dim();
    let n = cells.len();
    let mut inputs = Vec::with_capacity(frames.len());
    let mut tables = Vec::with_capacity(frames.len());
    let mut embeddings = Vec::with_capacity(frames.len());
    for (vols, pose) in frames.iter().zip(poses) {
        let batch = pillars_in_frame(grid, spec, cells, &poses[0], pose)?;
        let table = build_visibility_table(rig, &batch);
        let pulled = sparse_pull(vols, &table)?;
        let x = pulled.features().to_vec();
        if x.len() != n * head.in_dim() {
            return Err(Error::Argument("pillar features do not match the head input size".into()));
        }
        embeddings.push(embed(head, &x));
        inputs.push(x);
        tables.push(table);
    }

    let mut set = SparseTemporalSet::new(d);
    let mut entries = Vec::new();
    for (i, cell) in cells.cells().iter().enumerate() {
        set.push(0, *cell, &embeddings[0][rows(i, d)])?;
        entries.push((0, i));
    }
    let mut n_past_candidates = 0;
    for t in 1..frames.len() {
        let (static_logits, _, _) = readout(head, &embeddings[t]);
        n_past_candidates += n;
        for (i, cell) in cells.cells().iter().enumerate() {
            if sigmoid(static_logits[i]) > temporal.tau.value() {
                set.push(t, *cell, &embeddings[t][rows(i, d)])?;
                entries.push((t, i));
            }
        }
    }

    let (attended, attention) = submanifold_attention(&set, temporal.window, &temporal.attn)?;
    let fused: Vec<f64> = embeddings[0].iter().zip(&attended).map(|(a, b)| a + b).collect();
    let (logits, pre, h) = readout(head, &fused);
    Ok(TemporalForward { logits, inputs, tables, embeddings, entries, attention, fused, pre, h, n_past_candidates })
}

/// Gradients of a temporal pass.
#[derive(Debug, Clone)]
pub struct TemporalGrads {
    pub head: HeadParams,
    pub attn: AttentionGrads,
    /// Gradient of the pulled inputs of every frame.
    pub inputs: Vec<Vec<f64>>,
}

pub fn temporal_backward(
    head: &HeadParams,
    temporal: &TemporalParams,
    fwd: &TemporalForward,
    dlogits: &[f64],
) -> Result<TemporalGrads> {
    if dlogits.len() != fwd.logits.len() {
        return Err(Error::Argument(format!("{} logit gradients for {} cells", dlogits.len(), fwd.logits.len())));
    }
    let d = head.dim();
    let mut grads = HeadParams::zeros(head.in_dim(), d);
    let d_fused = readout_backward(head, &fwd.fused, &fwd.pre, &fwd.h, dlogits, &mut grads);
    // the residual passes d_fused to the present embeddings and the attention output
    let attn = submanifold_attention_backward(&fwd.attention, &temporal.attn, &d_fused)?;
    let mut d_embed: Vec<Vec<f64>> = fwd.embeddings.iter().map(|e| vec![0.0; e.len()]).collect();
    d_embed[0].copy_from_slice(&d_fused);
    for (k, &(t, i)) in fwd.entries.iter().enumerate() {
        for c in 0..d {
            d_embed[t][i * d + c] += attn.features[k * d + c];
        }
    }
    let inputs = fwd
        .inputs
        .iter()
        .zip(&d_embed)
        .map(|(x, de)| embed_backward(head, x, de, &mut grads))
        .collect();
    Ok(TemporalGrads { head: grads, attn, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Cell;
    use crate::net::{bce_logits, head_forward};
    use crate::pulling::FeatureVolume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        frames: Vec<VolumeSet>,
        poses: Vec<EgoPose>,
        rig: CameraRig,
        grid: BevGrid,
        spec: PillarSpec,
        head: HeadParams,
        temporal: TemporalParams,
        cells: SampleSet,
    }

    fn fixture(seed: u64, tau: f64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = CameraRig::synthetic(16, 8);
        let grid = BevGrid::new(12.0, 12.0, 0.5).unwrap();
        let spec = PillarSpec::new(-1.0, 3.0, 3).unwrap();
        let frames = (0..3)
            .map(|_| {
                let vols = rig
                    .cameras()
                    .iter()
                    .map(|c| {
                        let data = (0..2 * 16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
                        FeatureVolume::new(c.camera_id(), 2, 8, 16, data).unwrap()
                    })
                    .collect();
                VolumeSet::single(vols).unwrap()
            })
            .collect();
        let poses = vec![
            EgoPose { x: 2.0, y: 0.0, yaw: 0.1 },
            EgoPose { x: 1.0, y: 0.2, yaw: 0.05 },
            EgoPose::IDENTITY,
        ];
        let head = HeadParams::init(6, 4, &mut rng).unwrap();
        let temporal = TemporalParams {
            attn: AttentionParams::random(4, 1.0, &mut rng),
            window: WindowSpec::new(2, 1, 2),
            tau: TemporalThreshold::new(tau).unwrap(),
        };
        let cells = SampleSet::new(vec![
            Cell::new(3, 4),
            Cell::new(4, 4),
            Cell::new(4, 6),
            Cell::new(12, 12),
            Cell::new(13, 11),
            Cell::new(20, 2),
        ]);
        Fixture { frames, poses, rig, grid, spec, head, temporal, cells }
    }

    fn loss(f: &Fixture, head: &HeadParams, temporal: &TemporalParams, frames: &[VolumeSet], labels: &[bool]) -> f64 {
        let fwd = temporal_forward(head, temporal, frames, &f.poses, &f.rig, &f.grid, &f.spec, &f.cells).unwrap();
        bce_logits(&fwd.logits, labels).unwrap().0
    }

    #[test]
    fn pillars_follow_ego_motion() {
        let grid = BevGrid::new(10.0, 10.0, 0.5).unwrap();
        let spec = PillarSpec::new(0.0, 1.0, 2).unwrap();
        let cells = SampleSet::new(vec![Cell::new(10, 10)]);
        let present = EgoPose { x: 3.0, y: 0.0, yaw: 0.0 };
        let batch = pillars_in_frame(&grid, &spec, &cells, &present, &EgoPose::IDENTITY).unwrap();
        assert!((batch.points[0].x - 3.25).abs() < 1e-12 && (batch.points[0].y - 0.25).abs() < 1e-12);
        assert_eq!(batch.points[1].z, 1.0);
    }

    #[test]
    fn zero_attention_reduces_to_static_head() {
        let mut f = fixture(1, 0.0);
        f.temporal.attn = AttentionParams::zeros(4);
        let fwd = temporal_forward(&f.head, &f.temporal, &f.frames, &f.poses, &f.rig, &f.grid, &f.spec, &f.cells).unwrap();
        let (stat, _) = head_forward(&f.head, &fwd.inputs[0]).unwrap();
        assert_eq!(fwd.logits, stat);
        assert_eq!(fwd.n_past_kept(), 12);
        assert_eq!(fwd.n_past_candidates, 12);
    }

    #[test]
    fn strict_threshold_drops_past() {
        let f = fixture(2, 1.0);
        let fwd = temporal_forward(&f.head, &f.temporal, &f.frames, &f.poses, &f.rig, &f.grid, &f.spec, &f.cells).unwrap();
        assert_eq!(fwd.n_past_kept(), 0);
        assert!(fwd.attention.index.lists.iter().all(|l| l.iter().all(|&e| e < f.cells.len())));
    }

    #[test]
    fn gradients_match_differences() {
        let f = fixture(3, 0.0);
        let labels = [true, false, true, true, false, false];
        let fwd = temporal_forward(&f.head, &f.temporal, &f.frames, &f.poses, &f.rig, &f.grid, &f.spec, &f.cells).unwrap();
        let (_, dl) = bce_logits(&fwd.logits, &labels).unwrap();
        let g = temporal_backward(&f.head, &f.temporal, &fwd, &dl).unwrap();
        let h = 1e-5;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3);

        let base = f.head.to_flat();
        let analytic = g.head.to_flat();
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut p = f.head.clone();
                let mut x = base.clone();
                x[i] += delta;
                p.set_flat(&x).unwrap();
                loss(&f, &p, &f.temporal, &f.frames, &labels)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(close(fd, analytic[i]), "head {i}: {fd} vs {}", analytic[i]);
        }
        for (which, an) in [(0, &g.attn.proj_q), (1, &g.attn.proj_k), (2, &g.attn.proj_v)] {
            for i in 0..16 {
                let eval = |delta: f64| {
                    let mut t = f.temporal.clone();
                    [&mut t.attn.proj_q, &mut t.attn.proj_k, &mut t.attn.proj_v][which][i] += delta;
                    loss(&f, &f.head, &t, &f.frames, &labels)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(close(fd, an[i]), "attn {which}/{i}: {fd} vs {}", an[i]);
            }
        }
        // pulled inputs of a past frame, through the volumes of that frame
        let dvol = crate::pulling::sparse_pull_backward(&fwd.tables[1], &g.inputs[1], &f.frames[1]).unwrap();
        let mut checked = 0;
        for (cam, k, an) in dvol.volumes().iter().enumerate().flat_map(|(c, v)| v.data().iter().enumerate().map(move |(k, &a)| (c, k, a))) {
            let eval = |delta: f64| {
                let mut frames = f.frames.clone();
                frames[1].volumes_mut()[cam].data_mut()[k] += delta;
                loss(&f, &f.head, &f.temporal, &frames, &labels)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(close(fd, an), "camera {cam} entry {k}: {fd} vs {an}");
            checked += (an != 0.0) as usize;
        }
        assert!(checked > 0);
    }
}
