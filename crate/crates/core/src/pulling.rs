//! Sparse feature pulling.
//!
//! Each pillar point is projected only into the cameras that see it. A batch
//! reference table stores, per camera, the variable-length list of visible
//! point slots with their pixel coordinates; features are bilinearly sampled
//! for those entries only and averaged over the seeing cameras.
//!
//! [`naive_pull_oracle`] computes the same result the wasteful way (every point
//! in every camera, clamped sampling, then a visibility mask) and serves as the
//! reference for the sparse path.

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::{project_point, BevGrid, CameraRig, Cell, PillarSpec};

/// One camera's `C x H x W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    camera_id: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(camera_id: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Argument("feature volume dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Argument(format!(
                "feature volume data has {} entries, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("feature volume has non-finite entries".into()));
        }
        Ok(Self { camera_id, channels, height, width, data })
    }

    pub fn zeros(camera_id: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { camera_id, channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn camera_id(&self) -> usize {
        self.camera_id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, v: usize, u: usize) -> usize {
        (c * self.height + v) * self.width + u
    }

    pub fn get(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[self.offset(c, v, u)]
    }

    pub fn set(&mut self, c: usize, v: usize, u: usize, value: f64) {
        let o = self.offset(c, v, u);
        self.data[o] = value;
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Feature volumes for a batch of samples, `n_cam` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSet {
    n_cam: usize,
    channels: usize,
    volumes: Vec<FeatureVolume>,
}

impl VolumeSet {
    /// `samples[b][i]` must be camera `i`'s volume of sample `b`.
    pub fn new(samples: Vec<Vec<FeatureVolume>>) -> Result<Self> {
        let n_cam = samples.first().map_or(0, Vec::len);
        let channels = samples.first().and_then(|s| s.first()).map_or(0, |v| v.channels);
        let mut volumes = Vec::with_capacity(samples.len() * n_cam);
        for sample in samples {
            if sample.len() != n_cam {
                return Err(Error::Argument("every sample needs one volume per camera".into()));
            }
            for (i, vol) in sample.into_iter().enumerate() {
                if vol.camera_id != i {
                    return Err(Error::Argument(format!("volume for camera {} stored at slot {i}", vol.camera_id)));
                }
                if vol.channels != channels {
                    return Err(Error::Argument("all volumes must share the channel count".into()));
                }
                volumes.push(vol);
            }
        }
        Ok(Self { n_cam, channels, volumes })
    }

    pub fn single(volumes: Vec<FeatureVolume>) -> Result<Self> {
        Self::new(vec![volumes])
    }

    pub fn n_cam(&self) -> usize {
        self.n_cam
    }

    pub fn n_batch(&self) -> usize {
        if self.n_cam == 0 {
            0
        } else {
            self.volumes.len() / self.n_cam
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, batch: usize, cam: usize) -> Option<&FeatureVolume> {
        if cam >= self.n_cam {
            return None;
        }
        self.volumes.get(batch * self.n_cam + cam)
    }

    pub fn get_mut(&mut self, batch: usize, cam: usize) -> Option<&mut FeatureVolume> {
        if cam >= self.n_cam {
            return None;
        }
        self.volumes.get_mut(batch * self.n_cam + cam)
    }

    pub fn volumes(&self) -> &[FeatureVolume] {
        &self.volumes
    }

    pub fn volumes_mut(&mut self) -> &mut [FeatureVolume] {
        &mut self.volumes
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            n_cam: self.n_cam,
            channels: self.channels,
            volumes: self
                .volumes
                .iter()
                .map(|v| FeatureVolume::zeros(v.camera_id, v.channels, v.height, v.width))
                .collect(),
        }
    }

    /// `alpha * self + beta * other`, elementwise.
    pub fn linear_combination(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.volumes.len() != other.volumes.len() {
            return Err(Error::Argument("volume sets differ in size".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.volumes.iter_mut().zip(&other.volumes) {
            if a.data.len() != b.data.len() {
                return Err(Error::Argument("volume shapes differ".into()));
            }
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = alpha * *x + beta * y;
            }
        }
        Ok(out)
    }

    pub fn total_entries(&self) -> usize {
        self.volumes.iter().map(|v| v.data.len()).sum()
    }
}

/// Flat list of 3D points to pull features for.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointBatch {
    pub points: Vec<Point3<f64>>,
    pub batch_index: Vec<usize>,
    /// `(ix, iy, iz)` provenance of every point.
    pub cell_index: Vec<(usize, usize, usize)>,
}

impl PointBatch {
    pub fn new(
        points: Vec<Point3<f64>>,
        batch_index: Vec<usize>,
        cell_index: Vec<(usize, usize, usize)>,
    ) -> Result<Self> {
        if points.len() != batch_index.len() || points.len() != cell_index.len() {
            return Err(Error::Argument("point batch sequences differ in length".into()));
        }
        Ok(Self { points, batch_index, cell_index })
    }

    /// Pillars over `cells` for one sample: slot `i * n_z + j` is height `j`
    /// of cell `i`.
    pub fn from_cells(grid: &BevGrid, spec: &PillarSpec, cells: &[Cell], batch: usize) -> Result<Self> {
        let zs = spec.z_values();
        let mut out = Self::default();
        out.points.reserve(cells.len() * zs.len());
        for cell in cells {
            let (x, y) = grid.cell_to_world(cell.ix, cell.iy)?;
            for (iz, z) in zs.iter().enumerate() {
                out.points.push(Point3::new(x, y, *z));
                out.batch_index.push(batch);
                out.cell_index.push((cell.ix, cell.iy, iz));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            batch_index: perm.iter().map(|&i| self.batch_index[i]).collect(),
            cell_index: perm.iter().map(|&i| self.cell_index[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityEntry {
    pub slot: usize,
    pub batch: usize,
    pub u: f64,
    pub v: f64,
}

/// Batch reference table: per camera, the visible point slots and their pixels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisibilityTable {
    per_camera: Vec<Vec<VisibilityEntry>>,
    seen_count: Vec<usize>,
}

impl VisibilityTable {
    pub fn per_camera(&self) -> &[Vec<VisibilityEntry>] {
        &self.per_camera
    }

    pub fn seen_count(&self) -> &[usize] {
        &self.seen_count
    }

    pub fn n_points(&self) -> usize {
        self.seen_count.len()
    }

    pub fn n_cam(&self) -> usize {
        self.per_camera.len()
    }

    /// Number of bilinear interpolations the sparse path performs.
    pub fn interp_ops(&self) -> u64 {
        self.per_camera.iter().map(|e| e.len() as u64).sum()
    }
}

/// Per-point pulled features, `n_points x C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PulledFeatures {
    channels: usize,
    features: Vec<f64>,
    mask: Vec<bool>,
}

impl PulledFeatures {
    pub fn new(channels: usize, features: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if features.len() != channels * mask.len() {
            return Err(Error::Argument("pulled feature buffer does not match mask length".into()));
        }
        Ok(Self { channels, features, mask })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// The four bilinear corners of `(u, v)` as `(u_idx, v_idx, weight)`.
/// Requires `0 <= u <= w-1`, `0 <= v <= h-1`; corners past the border get
/// weight zero and are clamped onto the border pixel.
#[inline]
fn corners(u: f64, v: f64, width: usize, height: usize) -> [(usize, usize, f64); 4] {
    let u0 = (u.floor() as usize).min(width - 1);
    let v0 = (v.floor() as usize).min(height - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    [
        (u0, v0, (1.0 - fu) * (1.0 - fv)),
        (u1, v0, fu * (1.0 - fv)),
        (u0, v1, (1.0 - fu) * fv),
        (u1, v1, fu * fv),
    ]
}

#[inline]
fn accumulate_sample(vol: &FeatureVolume, u: f64, v: f64, out: &mut [f64]) {
    let plane = vol.plane();
    for (cu, cv, w) in corners(u, v, vol.width, vol.height) {
        let base = cv * vol.width + cu;
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * vol.data[c * plane + base];
        }
    }
}

fn in_bounds(vol: &FeatureVolume, u: f64, v: f64) -> bool {
    (0.0..=(vol.width - 1) as f64).contains(&u) && (0.0..=(vol.height - 1) as f64).contains(&v)
}

/// Bilinear interpolation of every channel at continuous pixel `(u, v)`.
pub fn bilinear_sample(vol: &FeatureVolume, u: f64, v: f64) -> Result<Vec<f64>> {
    if !in_bounds(vol, u, v) {
        return Err(Error::Precondition(format!(
            "sample ({u}, {v}) outside [0, {}] x [0, {}]",
            vol.width - 1,
            vol.height - 1
        )));
    }
    let mut out = vec![0.0; vol.channels];
    accumulate_sample(vol, u, v, &mut out);
    Ok(out)
}

pub fn build_visibility_table(rig: &CameraRig, batch: &PointBatch) -> VisibilityTable {
    let mut per_camera = vec![Vec::new(); rig.n_cam()];
    let mut seen_count = vec![0usize; batch.len()];
    for (slot, p) in batch.points.iter().enumerate() {
        for (cam_id, cam) in rig.cameras().iter().enumerate() {
            let proj = project_point(cam, p);
            if proj.visible {
                per_camera[cam_id].push(VisibilityEntry { slot, batch: batch.batch_index[slot], u: proj.u, v: proj.v });
                seen_count[slot] += 1;
            }
        }
    }
    VisibilityTable { per_camera, seen_count }
}

fn check_volumes(vols: &VolumeSet, table: &VisibilityTable) -> Result<()> {
    if vols.n_cam() != table.n_cam() && table.interp_ops() > 0 {
        return Err(Error::Argument(format!(
            "table spans {} cameras but {} volumes per sample were given",
            table.n_cam(),
            vols.n_cam()
        )));
    }
    for (cam, entries) in table.per_camera.iter().enumerate() {
        for e in entries {
            let vol = vols.get(e.batch, cam).ok_or_else(|| {
                Error::Argument(format!("no volume for sample {} camera {cam}", e.batch))
            })?;
            if !in_bounds(vol, e.u, e.v) {
                return Err(Error::Argument(format!(
                    "table entry ({}, {}) exceeds camera {cam} volume {}x{}",
                    e.u, e.v, vol.width, vol.height
                )));
            }
        }
    }
    Ok(())
}

/// Averages bilinear samples over the cameras listed in `table`.
pub fn sparse_pull(vols: &VolumeSet, table: &VisibilityTable) -> Result<PulledFeatures> {
    check_volumes(vols, table)?;
    let c = vols.channels();
    let n = table.n_points();
    let mut features = vec![0.0; n * c];
    for (cam, entries) in table.per_camera.iter().enumerate() {
        for e in entries {
            let vol = vols.get(e.batch, cam).expect("checked above");
            accumulate_sample(vol, e.u, e.v, &mut features[e.slot * c..(e.slot + 1) * c]);
        }
    }
    let mut mask = vec![false; n];
    for (i, &count) in table.seen_count.iter().enumerate() {
        if count > 0 {
            mask[i] = true;
            let inv = 1.0 / count as f64;
            features[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok(PulledFeatures { channels: c, features, mask })
}

/// Reference pulling: every point in every camera with clamped coordinates,
/// invisible contributions masked out afterwards. Returns the features and the
/// number of interpolations performed (`n_points * n_cam`).
pub fn naive_pull_oracle(vols: &VolumeSet, rig: &CameraRig, batch: &PointBatch) -> Result<(PulledFeatures, u64)> {
    let n = batch.len();
    let n_cam = rig.n_cam();
    let c = vols.channels();
    // dense n_cam x n x C buffer of pulled features, as a padded gather would produce
    let mut dense = vec![0.0; n_cam * n * c];
    let mut visible = vec![false; n_cam * n];
    let mut ops = 0u64;
    for (cam_id, cam) in rig.cameras().iter().enumerate() {
        for (slot, p) in batch.points.iter().enumerate() {
            let vol = vols.get(batch.batch_index[slot], cam_id).ok_or_else(|| {
                Error::Argument(format!("no volume for sample {} camera {cam_id}", batch.batch_index[slot]))
            })?;
            let proj = project_point(cam, p);
            let clamp = |x: f64, hi: usize| if x.is_finite() { x.clamp(0.0, (hi - 1) as f64) } else { 0.0 };
            let u = clamp(proj.u, vol.width);
            let v = clamp(proj.v, vol.height);
            let base = (cam_id * n + slot) * c;
            accumulate_sample(vol, u, v, &mut dense[base..base + c]);
            visible[cam_id * n + slot] = proj.visible;
            ops += 1;
        }
    }
    let mut features = vec![0.0; n * c];
    let mut mask = vec![false; n];
    for slot in 0..n {
        let mut count = 0usize;
        for cam_id in 0..n_cam {
            let m = if visible[cam_id * n + slot] { 1.0 } else { 0.0 };
            count += visible[cam_id * n + slot] as usize;
            let base = (cam_id * n + slot) * c;
            for ch in 0..c {
                features[slot * c + ch] += m * dense[base + ch];
            }
        }
        if count > 0 {
            mask[slot] = true;
            let inv = 1.0 / count as f64;
            features[slot * c..(slot + 1) * c].iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok((PulledFeatures { channels: c, features, mask }, ops))
}

/// Gradient of `sparse_pull` with respect to every volume entry, given the
/// upstream gradient `grad_out` (`n_points x C` row-major). `shape` supplies
/// the volume layout of the result.
pub fn sparse_pull_backward(table: &VisibilityTable, grad_out: &[f64], shape: &VolumeSet) -> Result<VolumeSet> {
    let c = shape.channels();
    if grad_out.len() != table.n_points() * c {
        return Err(Error::Argument(format!(
            "gradient has {} entries, expected {} points x {c} channels",
            grad_out.len(),
            table.n_points()
        )));
    }
    check_volumes(shape, table)?;
    let mut grads = shape.zeros_like();
    for (cam, entries) in table.per_camera.iter().enumerate() {
        for e in entries {
            let scale = 1.0 / table.seen_count[e.slot] as f64;
            let g = &grad_out[e.slot * c..(e.slot + 1) * c];
            let vol = grads.get_mut(e.batch, cam).expect("checked above");
            let plane = vol.plane();
            for (cu, cv, w) in corners(e.u, e.v, vol.width, vol.height) {
                // skip exact-zero corners so border samples never touch clamped pixels
                if w == 0.0 {
                    continue;
                }
                let base = cv * vol.width + cu;
                for (ch, gc) in g.iter().enumerate() {
                    vol.data[ch * plane + base] += scale * w * gc;
                }
            }
        }
    }
    Ok(grads)
}

/// Working-set estimate of the sparse path in bytes: table entries, gathered
/// samples and the output.
pub fn sparse_peak_bytes(table: &VisibilityTable, channels: usize) -> u64 {
    let entries = table.interp_ops();
    let entry = std::mem::size_of::<VisibilityEntry>() as u64;
    let n = table.n_points() as u64;
    entries * entry + entries * channels as u64 * 8 + n * (channels as u64 * 8 + 8)
}

/// Working-set estimate of the naive path: dense per-camera coordinates,
/// samples and mask, plus the output.
pub fn naive_peak_bytes(n_points: usize, n_cam: usize, channels: usize) -> u64 {
    let n = n_points as u64;
    let pairs = n * n_cam as u64;
    pairs * (16 + channels as u64 * 8 + 1) + n * channels as u64 * 8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, cam: usize, c: usize, h: usize, w: usize) -> FeatureVolume {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVolume::new(cam, c, h, w, data).unwrap()
    }

    #[test]
    fn reproduces_nodes_and_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vol = random_volume(&mut rng, 0, 3, 5, 7);
        for v in 0..5 {
            for u in 0..7 {
                let s = bilinear_sample(&vol, u as f64, v as f64).unwrap();
                for c in 0..3 {
                    assert_eq!(s[c], vol.get(c, v, u));
                }
            }
        }
        let s = bilinear_sample(&vol, 2.5, 3.0).unwrap();
        for c in 0..3 {
            let want = 0.5 * (vol.get(c, 3, 2) + vol.get(c, 3, 3));
            assert!((s[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn border_coordinates_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vol = random_volume(&mut rng, 0, 2, 4, 6);
        let s = bilinear_sample(&vol, 5.0, 3.0).unwrap();
        assert_eq!(s, vec![vol.get(0, 3, 5), vol.get(1, 3, 5)]);
        assert!(matches!(bilinear_sample(&vol, 5.0001, 1.0), Err(Error::Precondition(_))));
        assert!(matches!(bilinear_sample(&vol, 1.0, -1e-9), Err(Error::Precondition(_))));
        let thin = FeatureVolume::new(0, 1, 1, 1, vec![4.0]).unwrap();
        assert_eq!(bilinear_sample(&thin, 0.0, 0.0).unwrap(), vec![4.0]);
    }

    #[test]
    fn matches_corner_weight_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (4, 9, 13);
        let vol = random_volume(&mut rng, 0, c, h, w);
        for _ in 0..10_000 {
            let u: f64 = rng.random_range(0.0..=(w - 1) as f64);
            let v: f64 = rng.random_range(0.0..=(h - 1) as f64);
            let s = bilinear_sample(&vol, u, v).unwrap();
            // weight of pixel (i, j) is max(0, 1-|u-i|) * max(0, 1-|v-j|)
            for ch in 0..c {
                let mut want = 0.0;
                for j in 0..h {
                    for i in 0..w {
                        let wt = (1.0 - (u - i as f64).abs()).max(0.0) * (1.0 - (v - j as f64).abs()).max(0.0);
                        want += wt * vol.get(ch, j, i);
                    }
                }
                assert!((s[ch] - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", s[ch]);
            }
        }
    }

    fn two_camera_rig() -> CameraRig {
        // two cameras at the origin facing +x, one rotated 30 degrees
        let a = CameraModel::looking_at_yaw(0, 0.0, Vector3::zeros(), 1.2, 11, 11).unwrap();
        let b = CameraModel::looking_at_yaw(1, 0.5, Vector3::zeros(), 1.2, 11, 11).unwrap();
        CameraRig::new(vec![a, b]).unwrap()
    }

    #[test]
    fn behind_every_camera_gives_empty_table() {
        let rig = CameraRig::synthetic(60, 28);
        let pts = vec![Point3::new(0.0, 0.0, 1.5); 5];
        let batch = PointBatch::new(pts, vec![0; 5], vec![(0, 0, 0); 5]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        assert!(table.per_camera().iter().all(Vec::is_empty));
        assert!(table.seen_count().iter().all(|&c| c == 0));
    }

    #[test]
    fn overlap_point_seen_twice() {
        let rig = two_camera_rig();
        let p = Point3::new(5.0, 1.2, 0.0);
        let batch = PointBatch::new(vec![p], vec![0], vec![(0, 0, 0)]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        assert_eq!(table.seen_count(), &[2]);
        assert_eq!(table.per_camera()[0].len(), 1);
        assert_eq!(table.per_camera()[1].len(), 1);
        let total: usize = table.seen_count().iter().sum();
        assert_eq!(total as u64, table.interp_ops());
    }

    #[test]
    fn constant_fields_average() {
        let rig = two_camera_rig();
        let p = Point3::new(5.0, 1.2, 0.0);
        let q = Point3::new(5.0, -1.5, 0.0);
        let batch = PointBatch::new(vec![p, q], vec![0, 0], vec![(0, 0, 0), (1, 0, 0)]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        assert_eq!(table.seen_count(), &[2, 1]);
        let a = FeatureVolume::new(0, 2, 11, 11, vec![3.0; 242]).unwrap();
        let b = FeatureVolume::new(1, 2, 11, 11, vec![5.0; 242]).unwrap();
        let vols = VolumeSet::single(vec![a, b]).unwrap();
        let out = sparse_pull(&vols, &table).unwrap();
        assert_eq!(out.feature(0), &[4.0, 4.0]);
        assert_eq!(out.feature(1), &[3.0, 3.0]);
        assert_eq!(out.mask(), &[true, true]);
    }

    #[test]
    fn unseen_points_are_zero_and_masked() {
        let rig = two_camera_rig();
        let batch = PointBatch::new(vec![Point3::new(-5.0, 0.0, 0.0)], vec![0], vec![(0, 0, 0)]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vols = VolumeSet::single(vec![random_volume(&mut rng, 0, 3, 11, 11), random_volume(&mut rng, 1, 3, 11, 11)])
            .unwrap();
        let out = sparse_pull(&vols, &table).unwrap();
        assert_eq!(out.feature(0), &[0.0, 0.0, 0.0]);
        assert_eq!(out.mask(), &[false]);
    }

    #[test]
    fn missing_camera_volume_is_rejected() {
        let rig = two_camera_rig();
        let batch = PointBatch::new(vec![Point3::new(5.0, 1.2, 0.0)], vec![0], vec![(0, 0, 0)]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        let vols = VolumeSet::single(vec![FeatureVolume::zeros(0, 1, 11, 11)]).unwrap();
        assert!(matches!(sparse_pull(&vols, &table), Err(Error::Argument(_))));
    }

    #[test]
    fn empty_batch() {
        let rig = CameraRig::synthetic(8, 4);
        let vols = VolumeSet::single((0..6).map(|i| FeatureVolume::zeros(i, 2, 4, 8)).collect()).unwrap();
        let batch = PointBatch::default();
        let table = build_visibility_table(&rig, &batch);
        let out = sparse_pull(&vols, &table).unwrap();
        let (naive, ops) = naive_pull_oracle(&vols, &rig, &batch).unwrap();
        assert!(out.is_empty() && naive.is_empty());
        assert_eq!((ops, table.interp_ops()), (0, 0));
    }

    #[test]
    fn delta_scatter() {
        let k = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0);
        let cam = CameraModel::new(0, k, Matrix3::identity(), Vector3::zeros(), 5, 5).unwrap();
        let rig = CameraRig::new(vec![cam]).unwrap();
        // projects to (3, 1)
        let batch = PointBatch::new(vec![Point3::new(1.0, -1.0, 1.0)], vec![0], vec![(0, 0, 0)]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        let e = table.per_camera()[0][0];
        assert_eq!((e.u, e.v), (3.0, 1.0));
        let shape = VolumeSet::single(vec![FeatureVolume::zeros(0, 1, 5, 5)]).unwrap();
        let g = sparse_pull_backward(&table, &[1.0], &shape).unwrap();
        let data = g.get(0, 0).unwrap().data();
        assert_eq!(data.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(g.get(0, 0).unwrap().get(0, 1, 3), 1.0);
    }

    #[test]
    fn backward_rejects_wrong_gradient_length() {
        let rig = two_camera_rig();
        let batch = PointBatch::new(vec![Point3::new(5.0, 1.2, 0.0)], vec![0], vec![(0, 0, 0)]).unwrap();
        let table = build_visibility_table(&rig, &batch);
        let shape =
            VolumeSet::single(vec![FeatureVolume::zeros(0, 2, 11, 11), FeatureVolume::zeros(1, 2, 11, 11)]).unwrap();
        assert!(sparse_pull_backward(&table, &[1.0], &shape).is_err());
    }
}
