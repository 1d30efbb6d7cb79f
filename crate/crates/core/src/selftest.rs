//! Oracle-equivalence and gradient-check suites on randomized instances.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_attention, submanifold_attention, submanifold_attention_backward, AttentionParams, SparseTemporalSet,
    WindowSpec,
};
use crate::error::Result;
use crate::geometry::{BevGrid, CameraModel, CameraRig, Cell, PillarSpec};
use crate::gradcheck::{check, GradReport, STEP, TOLERANCE};
use crate::net::{bce_logits, forward_cells, forward_cells_cached, head_backward, HeadParams};
use crate::pulling::{
    build_visibility_table, naive_pull_oracle, sparse_pull, sparse_pull_backward, FeatureVolume, PointBatch, VolumeSet,
};
use crate::sampling::SampleSet;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error observed (relative).
    pub max_error: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{:<5} {:<24} instances={:<4} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance
        )
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Camera with random position, yaw, small pitch/roll and intrinsics.
fn random_camera(rng: &mut ChaCha8Rng, id: usize) -> CameraModel {
    let w = rng.random_range(6..24);
    let h = rng.random_range(4..16);
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let base = CameraModel::looking_at_yaw(
        id,
        yaw,
        Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..2.5)),
        rng.random_range(0.6..1.8),
        w,
        h,
    )
    .expect("valid camera");
    let tilt = Rotation3::from_euler_angles(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
    let rotation = tilt.matrix() * base.rotation();
    let center = base.center();
    let k = base.intrinsics();
    let k = Matrix3::new(k[(0, 0)], rng.random_range(-0.5..0.5), k[(0, 2)], 0.0, k[(1, 1)] * rng.random_range(0.8..1.2), k[(1, 2)], 0.0, 0.0, 1.0);
    CameraModel::new(id, k, rotation, -(rotation * center), w, h).expect("valid camera")
}

fn random_volumes(rng: &mut ChaCha8Rng, rig: &CameraRig, channels: usize, batches: usize) -> VolumeSet {
    let samples = (0..batches)
        .map(|_| {
            rig.cameras()
                .iter()
                .map(|cam| {
                    let n = channels * cam.feat_width() * cam.feat_height();
                    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                    FeatureVolume::new(cam.camera_id(), channels, cam.feat_height(), cam.feat_width(), data).unwrap()
                })
                .collect()
        })
        .collect();
    VolumeSet::new(samples).expect("consistent volumes")
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, batches: usize) -> PointBatch {
    let mut batch = PointBatch::default();
    for i in 0..n {
        batch.points.push(Point3::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), rng.random_range(-1.0..3.0)));
        batch.batch_index.push(rng.random_range(0..batches));
        batch.cell_index.push((i, 0, 0));
    }
    batch
}

/// Sparse pulling against the dense masked oracle on random rigs, volumes and points.
pub fn pulling_oracle(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..instances {
        let n_cam = rng.random_range(1..7);
        let rig = CameraRig::new((0..n_cam).map(|i| random_camera(&mut rng, i)).collect()).expect("dense ids");
        let batches = rng.random_range(1..4);
        let channels = rng.random_range(1..6);
        let vols = random_volumes(&mut rng, &rig, channels, batches);
        let n_points = rng.random_range(0..400);
        let points = random_points(&mut rng, n_points, batches);
        let table = build_visibility_table(&rig, &points);
        let (Ok(sparse), Ok((naive, ops))) = (sparse_pull(&vols, &table), naive_pull_oracle(&vols, &rig, &points)) else {
            ok = false;
            continue;
        };
        ok &= sparse.mask() == naive.mask() && ops == (n_points * n_cam) as u64;
        for (a, b) in sparse.features().iter().zip(naive.features()) {
            worst = worst.max(rel_diff(*a, *b));
        }
    }
    SuiteReport { name: "pulling-oracle", passed: ok && worst <= 1e-12, max_error: worst, tolerance: 1e-12, instances }
}

fn random_temporal_set(rng: &mut ChaCha8Rng, n: usize, frames: usize, span: usize, dim: usize) -> SparseTemporalSet {
    let mut set = SparseTemporalSet::new(dim);
    let mut guard = 0;
    while set.len() < n && guard < 100 * n {
        guard += 1;
        // keep at least one query
        let t = if set.is_empty() { 0 } else { rng.random_range(0..frames) };
        let cell = Cell::new(rng.random_range(0..span), rng.random_range(0..span));
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let _ = set.push(t, cell, &f);
    }
    set
}

/// Infinite-window submanifold attention against dense attention.
pub fn attention_oracle(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..instances {
        let dim = rng.random_range(1..7);
        let n = rng.random_range(1..120);
        let frames = rng.random_range(1..5);
        let set = random_temporal_set(&mut rng, n, frames, 30, dim);
        let params = AttentionParams::random(dim, rng.random_range(0.5..2.0), &mut rng);
        let Ok((out, _)) = submanifold_attention(&set, WindowSpec::infinite(), &params) else {
            ok = false;
            continue;
        };
        let dense = dense_attention(&set, &params);
        ok &= out.len() == dense.len();
        for (a, b) in out.iter().zip(&dense) {
            worst = worst.max(rel_diff(*a, *b));
        }
    }
    SuiteReport { name: "attention-oracle", passed: ok && worst <= 1e-12, max_error: worst, tolerance: 1e-12, instances }
}

fn grad_report(name: &'static str, reports: Vec<GradReport>) -> SuiteReport {
    let instances = reports.len();
    let merged = reports.into_iter().reduce(GradReport::merge);
    let (max_error, nonzero) = merged.map(|r| (r.max_error, r.nonzero)).unwrap_or((f64::INFINITY, 0));
    SuiteReport { name, passed: nonzero > 0 && max_error < TOLERANCE, max_error, tolerance: TOLERANCE, instances }
}

/// `sparse_pull_backward` against differences of `sum(w * pulled)`.
pub fn grad_pulling(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for _ in 0..instances {
        let rig = CameraRig::new((0..3).map(|i| random_camera(&mut rng, i)).collect()).expect("dense ids");
        let vols = random_volumes(&mut rng, &rig, 2, 2);
        let points = random_points(&mut rng, 60, 2);
        let table = build_visibility_table(&rig, &points);
        let weights: Vec<f64> = (0..points.len() * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = sparse_pull_backward(&table, &weights, &vols).expect("shapes agree");
        let flat: Vec<f64> = vols.volumes().iter().flat_map(|v| v.data().iter().copied()).collect();
        let analytic: Vec<f64> = grads.volumes().iter().flat_map(|v| v.data().iter().copied()).collect();
        let loss = |x: &[f64]| {
            let mut v = vols.clone();
            let mut off = 0;
            for vol in v.volumes_mut() {
                let n = vol.data().len();
                vol.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let pulled = sparse_pull(&v, &table).expect("valid table");
            pulled.features().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        reports.push(check(loss, &flat, &analytic, STEP));
    }
    grad_report("grad-sparse-pull", reports)
}

/// Attention backward on 12 points, `D = 4`, window `(1, 2, 2)`, with respect
/// to the features and all three projections.
pub fn grad_attention(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let window = WindowSpec::new(1, 2, 2);
    let d = 4;
    for _ in 0..instances {
        let set = random_temporal_set(&mut rng, 12, 3, 5, d);
        let params = AttentionParams::random(d, 1.0, &mut rng);
        let (out, state) = submanifold_attention(&set, window, &params).expect("valid set");
        let w: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = submanifold_attention_backward(&state, &params, &w).expect("shapes agree");
        let objective = |set: &SparseTemporalSet, p: &AttentionParams| {
            let (o, _) = submanifold_attention(set, window, p).expect("valid set");
            o.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut x = set.features().to_vec();
        let mut analytic = g.features.clone();
        for m in [&params.proj_q, &params.proj_k, &params.proj_v] {
            x.extend_from_slice(m);
        }
        for m in [&g.proj_q, &g.proj_k, &g.proj_v] {
            analytic.extend_from_slice(m);
        }
        let nf = set.features().len();
        let loss = |x: &[f64]| {
            let s = set.with_features(x[..nf].to_vec()).expect("same layout");
            let dd = d * d;
            let p = AttentionParams::new(
                d,
                x[nf..nf + dd].to_vec(),
                x[nf + dd..nf + 2 * dd].to_vec(),
                x[nf + 2 * dd..nf + 3 * dd].to_vec(),
            )
            .expect("valid projections");
            objective(&s, &p)
        };
        reports.push(check(loss, &x, &analytic, STEP));
    }
    grad_report("grad-attention", reports)
}

/// BCE gradient on random logits and labels.
pub fn grad_bce(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for _ in 0..instances {
        let n = rng.random_range(1..50);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (_, g) = bce_logits(&logits, &labels).expect("non-empty");
        reports.push(check(|x| bce_logits(x, &labels).expect("non-empty").0, &logits, &g, STEP));
    }
    grad_report("grad-bce", reports)
}

/// Smallest hidden pre-activation magnitude over the pass, to keep the check
/// away from rectifier kinks.
fn min_preactivation(params: &HeadParams, x: &[f64]) -> f64 {
    let e = crate::net::embed(params, x);
    let (_, pre, _) = crate::net::readout(params, &e);
    pre.iter().map(|p| p.abs()).fold(f64::INFINITY, f64::min)
}

/// Full 3-cell pipeline (pillars, visibility, pulling, head, BCE) with
/// respect to every head parameter and every feature-volume entry.
pub fn grad_end_to_end(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = CameraRig::synthetic(16, 8);
    let grid = BevGrid::new(16.0, 16.0, 0.5).unwrap();
    let spec = PillarSpec::new(-1.0, 3.0, 3).unwrap();
    let channels = 2;
    let mut reports = Vec::new();
    let mut done = 0;
    while done < instances {
        let vols = random_volumes(&mut rng, &rig, channels, 1);
        let params = HeadParams::init(spec.n_z() * channels, 6, &mut rng).expect("positive dims");
        let cells = SampleSet::dedup((0..3).map(|_| Cell::new(rng.random_range(0..32), rng.random_range(0..32))).collect());
        let labels: Vec<bool> = (0..cells.len()).map(|_| rng.random_bool(0.5)).collect();
        let fwd = forward_cells_cached(&vols, &rig, &grid, &spec, &cells, &params).expect("valid pass");
        let (x, _) = crate::net::cell_inputs(&vols, &rig, &grid, &spec, cells.cells(), 0).expect("valid cells");
        if min_preactivation(&params, &x) < 1e-2 || fwd.table.interp_ops() == 0 {
            continue;
        }
        done += 1;
        let (_, dl) = bce_logits(fwd.pass.logits(), &labels).expect("non-empty");
        let (head_grads, dx) = head_backward(&params, &fwd.cache, &dl).expect("shapes agree");
        let vol_grads = sparse_pull_backward(&fwd.table, &crate::net::unflatten_grad(&dx), &vols).expect("shapes agree");

        let n_head = params.n_params();
        let mut point = params.to_flat();
        let mut analytic = head_grads.to_flat();
        for (v, g) in vols.volumes().iter().zip(vol_grads.volumes()) {
            point.extend_from_slice(v.data());
            analytic.extend_from_slice(g.data());
        }
        let loss = |x: &[f64]| {
            let mut p = params.clone();
            p.set_flat(&x[..n_head]).expect("size fixed");
            let mut v = vols.clone();
            let mut off = n_head;
            for vol in v.volumes_mut() {
                let n = vol.data().len();
                vol.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let pass = forward_cells(&v, &rig, &grid, &spec, &cells, &p).expect("valid pass");
            bce_logits(pass.logits(), &labels).expect("non-empty").0
        };
        reports.push(check(loss, &point, &analytic, STEP));
    }
    grad_report("grad-end-to-end", reports)
}

pub fn oracle_suites(seed: u64) -> Vec<SuiteReport> {
    vec![pulling_oracle(100, seed), attention_oracle(100, seed.wrapping_add(1))]
}

pub fn gradient_suites(seed: u64) -> Vec<SuiteReport> {
    vec![
        grad_pulling(5, seed),
        grad_attention(5, seed.wrapping_add(1)),
        grad_bce(20, seed.wrapping_add(2)),
        grad_end_to_end(3, seed.wrapping_add(3)),
    ]
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = oracle_suites(seed);
    out.extend(gradient_suites(seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_counts() {
        for r in [pulling_oracle(10, 1), attention_oracle(10, 2), grad_pulling(1, 3), grad_attention(2, 4), grad_bce(3, 5), grad_end_to_end(1, 6)] {
            assert!(r.passed, "{}", r.line());
        }
    }
}
