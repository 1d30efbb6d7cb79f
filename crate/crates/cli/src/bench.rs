//! Kernel benchmarks: sparse vs naive pulling, windowed vs dense attention pairs.

use std::time::Instant;

use pointbev::attention::{submanifold_attention, temporal_filter, SparseTemporalSet, TaggedPass, TemporalThreshold, WindowSpec};
use pointbev::geometry::{BevGrid, CameraRig, PillarSpec, SceneGeometry};
use pointbev::net::{embed, readout, HeadParams};
use pointbev::pulling::{
    build_visibility_table, naive_peak_bytes, naive_pull_oracle, sparse_peak_bytes, sparse_pull, FeatureVolume, PointBatch,
    VolumeSet,
};
use pointbev::sampling::{PassResult, SampleSet};
use pointbev::temporal::pillars_in_frame;
use pointbev::train::SceneSample;
use pointbev::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Problem size of one pulling benchmark row pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PullingShape {
    pub name: &'static str,
    /// Grid extent in metres (square, 0.5 m cells).
    pub extent: f64,
    pub n_z: usize,
    pub channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl PullingShape {
    /// 200 x 200 x 8 points, 6 cameras, 28 x 60 volumes.
    pub fn canonical(channels: usize) -> Self {
        Self { name: "canonical", extent: 100.0, n_z: 8, channels, feat_h: 28, feat_w: 60 }
    }

    pub fn desk_shapes() -> Vec<Self> {
        vec![
            Self { name: "desk-medium", extent: 50.0, n_z: 4, channels: 32, feat_h: 14, feat_w: 30 },
            Self { name: "desk-small", extent: 25.0, n_z: 4, channels: 16, feat_h: 7, feat_w: 15 },
        ]
    }

    pub fn n_points(&self) -> usize {
        let side = (self.extent / 0.5).round() as usize;
        side * side * self.n_z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PullingRow {
    pub shape: &'static str,
    pub method: &'static str,
    pub n_points: usize,
    pub n_cam: usize,
    pub channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub interp_ops: u64,
    /// Smallest and largest per-camera fraction of points in view.
    pub visible_min: f64,
    pub visible_max: f64,
    pub peak_bytes: u64,
    /// Largest absolute difference against the other method.
    pub max_abs_diff: f64,
    pub wall_ns: u128,
}

impl PullingRow {
    pub const HEADER: [&'static str; 13] = [
        "shape",
        "method",
        "n_points",
        "n_cam",
        "channels",
        "feat_h",
        "feat_w",
        "interp_ops",
        "visible_min",
        "visible_max",
        "peak_bytes",
        "max_abs_diff",
        "wall_ns",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.shape.to_string(),
            self.method.to_string(),
            self.n_points.to_string(),
            self.n_cam.to_string(),
            self.channels.to_string(),
            self.feat_h.to_string(),
            self.feat_w.to_string(),
            self.interp_ops.to_string(),
            self.visible_min.to_string(),
            self.visible_max.to_string(),
            self.peak_bytes.to_string(),
            self.max_abs_diff.to_string(),
            self.wall_ns.to_string(),
        ]
    }
}

/// Points per naive-oracle call; its padded buffers grow as `n * n_cam * C`.
const NAIVE_CHUNK: usize = 16_384;

pub fn random_volumes(rig: &CameraRig, channels: usize, seed: u64) -> Result<VolumeSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vols = rig
        .cameras()
        .iter()
        .map(|cam| {
            let n = channels * cam.feat_height() * cam.feat_width();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureVolume::new(cam.camera_id(), channels, cam.feat_height(), cam.feat_width(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    VolumeSet::single(vols)
}

/// Sparse and naive rows for one shape; `limit` caps the number of points.
pub fn bench_pulling_shape(shape: &PullingShape, limit: Option<usize>, seed: u64) -> Result<[PullingRow; 2]> {
    let grid = BevGrid::new(shape.extent, shape.extent, 0.5)?;
    let spec = PillarSpec::new(-1.0, 3.0, shape.n_z)?;
    let rig = CameraRig::synthetic(shape.feat_w, shape.feat_h);
    let vols = random_volumes(&rig, shape.channels, seed)?;
    let mut points = PointBatch::from_cells(&grid, &spec, &grid.all_cells(), 0)?;
    if let Some(n) = limit {
        points.points.truncate(n);
        points.batch_index.truncate(n);
        points.cell_index.truncate(n);
    }
    let n = points.len();

    let start = Instant::now();
    let table = build_visibility_table(&rig, &points);
    let sparse = sparse_pull(&vols, &table)?;
    let sparse_ns = start.elapsed().as_nanos();

    let start = Instant::now();
    let mut naive_ops = 0u64;
    let mut max_abs_diff = 0.0f64;
    for lo in (0..n).step_by(NAIVE_CHUNK) {
        let hi = (lo + NAIVE_CHUNK).min(n);
        let chunk = PointBatch {
            points: points.points[lo..hi].to_vec(),
            batch_index: points.batch_index[lo..hi].to_vec(),
            cell_index: points.cell_index[lo..hi].to_vec(),
        };
        let (naive, ops) = naive_pull_oracle(&vols, &rig, &chunk)?;
        naive_ops += ops;
        let c = shape.channels;
        for (a, b) in naive.features().iter().zip(&sparse.features()[lo * c..hi * c]) {
            max_abs_diff = max_abs_diff.max((a - b).abs());
        }
    }
    let naive_ns = start.elapsed().as_nanos();

    let fractions: Vec<f64> = table.per_camera().iter().map(|c| c.len() as f64 / n.max(1) as f64).collect();
    let visible_min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let visible_max = fractions.iter().copied().fold(0.0, f64::max);
    let row = |method, interp_ops, peak_bytes, wall_ns| PullingRow {
        shape: shape.name,
        method,
        n_points: n,
        n_cam: rig.n_cam(),
        channels: shape.channels,
        feat_h: shape.feat_h,
        feat_w: shape.feat_w,
        interp_ops,
        visible_min,
        visible_max,
        peak_bytes,
        max_abs_diff,
        wall_ns,
    };
    Ok([
        row("sparse", table.interp_ops(), sparse_peak_bytes(&table, shape.channels), sparse_ns),
        row("naive", naive_ops, naive_peak_bytes(n, rig.n_cam(), shape.channels), naive_ns),
    ])
}

/// All shapes; `Some(0)` yields no rows.
pub fn bench_pulling(channels: usize, limit: Option<usize>, seed: u64) -> Result<Vec<PullingRow>> {
    if limit == Some(0) {
        return Ok(Vec::new());
    }
    let mut shapes = vec![PullingShape::canonical(channels)];
    shapes.extend(PullingShape::desk_shapes());
    let mut rows = Vec::new();
    for shape in &shapes {
        rows.extend(bench_pulling_shape(shape, limit, seed)?);
    }
    Ok(rows)
}

/// Present and filtered past points of one scene over every grid cell, with
/// the number of past candidates considered.
pub fn temporal_instance(
    head: &HeadParams,
    geometry: &SceneGeometry,
    sample: &SceneSample,
    tau: TemporalThreshold,
) -> Result<(SparseTemporalSet, usize)> {
    let cells = SampleSet::full(&geometry.grid);
    let mut passes = Vec::with_capacity(sample.frames.len());
    for (t, (vols, pose)) in sample.frames.iter().zip(&sample.poses).enumerate() {
        let batch = pillars_in_frame(&geometry.grid, &geometry.pillar, &cells, &sample.poses[0], pose)?;
        let table = build_visibility_table(&geometry.rig, &batch);
        let x = sparse_pull(vols, &table)?.features().to_vec();
        let e = embed(head, &x);
        let (logits, _, _) = readout(head, &e);
        passes.push(TaggedPass { frame: t, pass: PassResult::new(cells.clone(), logits)?, features: e });
    }
    let candidates = cells.len() * (passes.len() - 1);
    Ok((temporal_filter(&passes, head.dim(), tau)?, candidates))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub window: String,
    pub n_queries: usize,
    pub n_entries: usize,
    pub n_past_candidates: usize,
    pub sparse_pairs: u64,
    /// Queries times every entry of the filtered set.
    pub dense_pairs: u64,
    pub wall_ns: u128,
}

impl AttentionRow {
    pub const HEADER: [&'static str; 8] =
        ["window", "n_queries", "n_entries", "n_past_candidates", "sparse_pairs", "dense_pairs", "pair_ratio", "wall_ns"];

    pub fn pair_ratio(&self) -> f64 {
        self.sparse_pairs as f64 / self.dense_pairs.max(1) as f64
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.window.clone(),
            self.n_queries.to_string(),
            self.n_entries.to_string(),
            self.n_past_candidates.to_string(),
            self.sparse_pairs.to_string(),
            self.dense_pairs.to_string(),
            self.pair_ratio().to_string(),
            self.wall_ns.to_string(),
        ]
    }
}

pub const BENCH_WINDOWS: [(usize, usize, usize); 5] = [(0, 0, 0), (1, 1, 1), (8, 2, 2), (8, 4, 4), (8, 8, 8)];

pub fn bench_attention(
    set: &SparseTemporalSet,
    n_past_candidates: usize,
    params: &pointbev::attention::AttentionParams,
    windows: &[(usize, usize, usize)],
) -> Result<Vec<AttentionRow>> {
    let n_queries = set.queries().len();
    windows
        .iter()
        .map(|&(t, x, y)| {
            let start = Instant::now();
            let (_, state) = submanifold_attention(set, WindowSpec::new(t, x, y), params)?;
            let wall_ns = start.elapsed().as_nanos();
            Ok(AttentionRow {
                window: format!("{t}x{x}x{y}"),
                n_queries,
                n_entries: set.len(),
                n_past_candidates,
                sparse_pairs: state.index.n_pairs(),
                dense_pairs: (n_queries * set.len()) as u64,
                wall_ns,
            })
        })
        .collect()
}
