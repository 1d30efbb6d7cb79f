//! BeV lattice, pillar discretization, pinhole cameras, and per-point visibility.
//!
//! Coordinates: the ego vehicle sits at the grid center, `x` forward, `y` left,
//! `z` up. Cameras use the usual optical frame (`x` right, `y` down, `z`
//! forward). Projected coordinates are continuous feature-map pixels with pixel
//! centers at integer positions.

use std::path::Path;

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of one BeV cell. Ordering is lexicographic on `(ix, iy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
}

impl Cell {
    pub const fn new(ix: usize, iy: usize) -> Self {
        Self { ix, iy }
    }
}

/// The 2D BeV lattice centered on the ego vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    x_extent: f64,
    y_extent: f64,
    resolution: f64,
    nx: usize,
    ny: usize,
}

impl Default for BevGrid {
    /// 100 m x 100 m at 0.5 m, i.e. 200 x 200 cells.
    fn default() -> Self {
        Self::new(100.0, 100.0, 0.5).expect("default grid is valid")
    }
}

impl BevGrid {
    pub fn new(x_extent: f64, y_extent: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && x_extent > 0.0 && y_extent > 0.0)
            || !(resolution.is_finite() && x_extent.is_finite() && y_extent.is_finite())
        {
            return Err(Error::Argument(format!(
                "grid extents and resolution must be positive, got {x_extent} x {y_extent} @ {resolution}"
            )));
        }
        let nx = (x_extent / resolution).round() as usize;
        let ny = (y_extent / resolution).round() as usize;
        if nx == 0 || ny == 0 {
            return Err(Error::Argument("grid must have at least one cell per axis".into()));
        }
        Ok(Self { x_extent, y_extent, resolution, nx, ny })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn x_extent(&self) -> f64 {
        self.x_extent
    }

    pub fn y_extent(&self) -> f64 {
        self.y_extent
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Row-major offset `iy * nx + ix`, the layout of every `ny x nx` map.
    pub fn flat_index(&self, cell: Cell) -> usize {
        cell.iy * self.nx + cell.ix
    }

    pub fn cell_from_flat(&self, idx: usize) -> Cell {
        Cell::new(idx % self.nx, idx / self.nx)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.ix < self.nx && cell.iy < self.ny
    }

    fn x_origin(&self) -> f64 {
        -0.5 * self.nx as f64 * self.resolution
    }

    fn y_origin(&self) -> f64 {
        -0.5 * self.ny as f64 * self.resolution
    }

    /// Center of a cell in ego-frame meters.
    pub fn cell_to_world(&self, ix: usize, iy: usize) -> Result<(f64, f64)> {
        if ix >= self.nx || iy >= self.ny {
            return Err(Error::Range(format!(
                "cell ({ix}, {iy}) outside {}x{} grid",
                self.nx, self.ny
            )));
        }
        Ok((
            self.x_origin() + (ix as f64 + 0.5) * self.resolution,
            self.y_origin() + (iy as f64 + 0.5) * self.resolution,
        ))
    }

    /// Cell containing a world position, `None` outside the grid.
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<Cell> {
        let fx = ((x - self.x_origin()) / self.resolution).floor();
        let fy = ((y - self.y_origin()) / self.resolution).floor();
        if !(fx >= 0.0 && fy >= 0.0) || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(Cell::new(fx as usize, fy as usize))
    }

    /// Every cell in lexicographic `(ix, iy)` order.
    pub fn all_cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.n_cells());
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                out.push(Cell::new(ix, iy));
            }
        }
        out
    }
}

/// Boolean `ny x nx` map over a grid, row-major (`iy * nx + ix`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BevMask {
    nx: usize,
    ny: usize,
    data: Vec<bool>,
}

impl BevMask {
    pub fn new(grid: &BevGrid) -> Self {
        Self { nx: grid.nx, ny: grid.ny, data: vec![false; grid.n_cells()] }
    }

    pub fn from_vec(nx: usize, ny: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(Error::Argument(format!("mask has {} cells, expected {nx}x{ny}", data.len())));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn get(&self, cell: Cell) -> bool {
        self.data[cell.iy * self.nx + cell.ix]
    }

    pub fn set(&mut self, cell: Cell, value: bool) {
        self.data[cell.iy * self.nx + cell.ix] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn matches(&self, grid: &BevGrid) -> bool {
        self.nx == grid.nx && self.ny == grid.ny
    }

    /// Set cells in lexicographic `(ix, iy)` order.
    pub fn true_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                if self.data[iy * self.nx + ix] {
                    out.push(Cell::new(ix, iy));
                }
            }
        }
        out
    }
}

/// Vertical discretization of a pillar.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSpec {
    z_min: f64,
    z_max: f64,
    n_z: usize,
}

impl Default for PillarSpec {
    fn default() -> Self {
        Self::new(-1.0, 3.0, 8).expect("default pillar is valid")
    }
}

impl PillarSpec {
    pub fn new(z_min: f64, z_max: f64, n_z: usize) -> Result<Self> {
        if !(z_min < z_max) || n_z == 0 {
            return Err(Error::Argument(format!(
                "pillar needs z_min < z_max and n_z >= 1, got [{z_min}, {z_max}] x {n_z}"
            )));
        }
        Ok(Self { z_min, z_max, n_z })
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    /// Sample heights in ascending order.
    pub fn z_values(&self) -> Vec<f64> {
        if self.n_z == 1 {
            return vec![0.5 * (self.z_min + self.z_max)];
        }
        let step = (self.z_max - self.z_min) / (self.n_z - 1) as f64;
        (0..self.n_z).map(|j| self.z_min + j as f64 * step).collect()
    }
}

/// The `n_z` pillar points above one cell, ascending in `z`.
pub fn build_pillar(grid: &BevGrid, spec: &PillarSpec, ix: usize, iy: usize) -> Result<Vec<Point3<f64>>> {
    let (x, y) = grid.cell_to_world(ix, iy)?;
    Ok(spec.z_values().into_iter().map(|z| Point3::new(x, y, z)).collect())
}

/// Result of projecting one point into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Pinhole camera with intrinsics expressed in feature-map pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    camera_id: usize,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    feat_width: usize,
    feat_height: usize,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl CameraModel {
    pub fn new(
        camera_id: usize,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        feat_width: usize,
        feat_height: usize,
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Argument(format!("camera {camera_id}: intrinsics must be upper-triangular")));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::Argument(format!("camera {camera_id}: focal entries must be positive")));
        }
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(dev < ORTHONORMAL_TOL) {
            return Err(Error::Argument(format!(
                "camera {camera_id}: rotation is not orthonormal (deviation {dev:e})"
            )));
        }
        if feat_width == 0 || feat_height == 0 {
            return Err(Error::Argument(format!("camera {camera_id}: empty feature map")));
        }
        if !translation.iter().all(|t| t.is_finite()) || !intrinsics.iter().all(|t| t.is_finite()) {
            return Err(Error::Argument(format!("camera {camera_id}: non-finite calibration")));
        }
        Ok(Self { camera_id, intrinsics, rotation, translation, feat_width, feat_height })
    }

    /// Builds a camera from image-resolution intrinsics, rescaling the first two
    /// rows of `K` by `feat / img` per axis.
    #[allow(clippy::too_many_arguments)]
    pub fn from_image_intrinsics(
        camera_id: usize,
        image_intrinsics: Matrix3<f64>,
        img_width: usize,
        img_height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        feat_width: usize,
        feat_height: usize,
    ) -> Result<Self> {
        if img_width == 0 || img_height == 0 {
            return Err(Error::Argument("image size must be positive".into()));
        }
        let sx = feat_width as f64 / img_width as f64;
        let sy = feat_height as f64 / img_height as f64;
        let mut k = image_intrinsics;
        for c in 0..3 {
            k[(0, c)] *= sx;
            k[(1, c)] *= sy;
        }
        Self::new(camera_id, k, rotation, translation, feat_width, feat_height)
    }

    /// Camera mounted at `position` looking horizontally along `yaw` (radians,
    /// counter-clockwise from ego `x`), with the given horizontal field of view.
    pub fn looking_at_yaw(
        camera_id: usize,
        yaw: f64,
        position: Vector3<f64>,
        hfov: f64,
        feat_width: usize,
        feat_height: usize,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows are the camera axes (right, down, forward) in ego coordinates
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let translation = -(rotation * position);
        let cx = 0.5 * (feat_width as f64 - 1.0);
        let cy = 0.5 * (feat_height as f64 - 1.0);
        let f = 0.5 * feat_width as f64 / (0.5 * hfov).tan();
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        Self::new(camera_id, k, rotation, translation, feat_width, feat_height)
    }

    pub fn camera_id(&self) -> usize {
        self.camera_id
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn feat_width(&self) -> usize {
        self.feat_width
    }

    pub fn feat_height(&self) -> usize {
        self.feat_height
    }

    /// Optical center in ego coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit ray direction (ego frame) through feature pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k_inv = self.intrinsics.try_inverse().expect("upper-triangular K with positive diagonal");
        let dir_cam = k_inv * Vector3::new(u, v, 1.0);
        (self.rotation.transpose() * dir_cam).normalize()
    }

    pub fn project(&self, p: &Point3<f64>) -> Projection {
        project_point(self, p)
    }
}

/// Projects an ego-frame point into a camera's feature map.
pub fn project_point(cam: &CameraModel, p: &Point3<f64>) -> Projection {
    let pc = cam.rotation * p.coords + cam.translation;
    if !(pc.z > 0.0) {
        return Projection { u: f64::NAN, v: f64::NAN, depth: pc.z, visible: false };
    }
    let h = cam.intrinsics * pc;
    let u = h.x / h.z;
    let v = h.y / h.z;
    let visible = (0.0..=(cam.feat_width - 1) as f64).contains(&u)
        && (0.0..=(cam.feat_height - 1) as f64).contains(&v);
    Projection { u, v, depth: pc.z, visible }
}

/// A set of cameras with dense ids `0..n_cam`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<CameraModel>,
}

/// Horizontal field of view of the synthetic rig cameras.
pub const SYNTHETIC_HFOV_DEG: f64 = 70.0;
/// Mounting height of the synthetic rig.
pub const SYNTHETIC_CAMERA_HEIGHT: f64 = 1.5;
/// Yaws of the six synthetic cameras in degrees.
pub const SYNTHETIC_YAWS_DEG: [f64; 6] = [0.0, 60.0, -60.0, 120.0, -120.0, 180.0];

impl CameraRig {
    pub fn new(mut cameras: Vec<CameraModel>) -> Result<Self> {
        cameras.sort_by_key(|c| c.camera_id);
        for (i, cam) in cameras.iter().enumerate() {
            if cam.camera_id != i {
                return Err(Error::Argument(format!(
                    "camera ids must be unique and dense 0..{}, found id {}",
                    cameras.len(),
                    cam.camera_id
                )));
            }
        }
        Ok(Self { cameras })
    }

    /// Six-camera ring at 60 degree yaw steps, 70 degree horizontal FoV,
    /// mounted 1.5 m high with zero pitch. Camera 0 faces forward.
    pub fn synthetic(feat_width: usize, feat_height: usize) -> Self {
        let position = Vector3::new(0.0, 0.0, SYNTHETIC_CAMERA_HEIGHT);
        let hfov = SYNTHETIC_HFOV_DEG.to_radians();
        let cameras = SYNTHETIC_YAWS_DEG
            .iter()
            .enumerate()
            .map(|(i, yaw)| {
                CameraModel::looking_at_yaw(i, yaw.to_radians(), position, hfov, feat_width, feat_height)
                    .expect("synthetic camera is valid")
            })
            .collect();
        Self::new(cameras).expect("synthetic rig ids are dense")
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn camera(&self, id: usize) -> &CameraModel {
        &self.cameras[id]
    }

    pub fn n_cam(&self) -> usize {
        self.cameras.len()
    }
}

/// Cameras that see `p`, ascending by id.
pub fn visible_cameras(rig: &CameraRig, p: &Point3<f64>) -> Vec<usize> {
    rig.cameras
        .iter()
        .filter(|cam| project_point(cam, p).visible)
        .map(|cam| cam.camera_id)
        .collect()
}

/// Planar rigid transform in homogeneous 3x3 form, acting on `(x, y)` and
/// leaving `z` untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevAugmentation(Matrix3<f64>);

impl BevAugmentation {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m[(2, 0)] != 0.0 || m[(2, 1)] != 0.0 || m[(2, 2)] != 1.0 {
            return Err(Error::Argument("augmentation must be affine (last row 0 0 1)".into()));
        }
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if !(det.abs() > 1e-12) || !m.iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("augmentation matrix is not invertible".into()));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Rotation by `yaw` followed by translation `(tx, ty)`.
    pub fn from_pose(tx: f64, ty: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self(Matrix3::new(c, -s, tx, s, c, ty, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.try_inverse().expect("checked invertible at construction"))
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply2(&self, p: &Point2<f64>) -> Point2<f64> {
        let m = &self.0;
        Point2::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)],
        )
    }

    pub fn apply3(&self, p: &Point3<f64>) -> Point3<f64> {
        let q = self.apply2(&Point2::new(p.x, p.y));
        Point3::new(q.x, q.y, p.z)
    }
}

pub fn apply_bev_augmentation(aug: &BevAugmentation, points: &[Point3<f64>]) -> Vec<Point3<f64>> {
    points.iter().map(|p| aug.apply3(p)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct GridConfig {
    x_extent: f64,
    y_extent: f64,
    resolution: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct PillarConfig {
    z_min: f64,
    z_max: f64,
    n_z: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CameraConfig {
    id: usize,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    feat_w: usize,
    feat_h: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct GeometryConfig {
    grid: GridConfig,
    pillar: PillarConfig,
    cameras: Vec<CameraConfig>,
}

/// Grid, pillar and rig loaded together from one JSON document.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub grid: BevGrid,
    pub pillar: PillarSpec,
    pub rig: CameraRig,
}

impl SceneGeometry {
    pub fn synthetic(feat_width: usize, feat_height: usize) -> Self {
        Self {
            grid: BevGrid::default(),
            pillar: PillarSpec::default(),
            rig: CameraRig::synthetic(feat_width, feat_height),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GeometryConfig = serde_json::from_str(text)?;
        let grid = BevGrid::new(cfg.grid.x_extent, cfg.grid.y_extent, cfg.grid.resolution)?;
        let pillar = PillarSpec::new(cfg.pillar.z_min, cfg.pillar.z_max, cfg.pillar.n_z)?;
        let cameras = cfg
            .cameras
            .iter()
            .map(|c| {
                CameraModel::new(
                    c.id,
                    Matrix3::from_row_slice(&c.k),
                    Matrix3::from_row_slice(&c.r),
                    Vector3::from_column_slice(&c.t),
                    c.feat_w,
                    c.feat_h,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, pillar, rig: CameraRig::new(cameras)? })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[r * 3 + c] = m[(r, c)];
                }
            }
            out
        };
        let cfg = GeometryConfig {
            grid: GridConfig {
                x_extent: self.grid.x_extent,
                y_extent: self.grid.y_extent,
                resolution: self.grid.resolution,
            },
            pillar: PillarConfig { z_min: self.pillar.z_min, z_max: self.pillar.z_max, n_z: self.pillar.n_z },
            cameras: self
                .rig
                .cameras
                .iter()
                .map(|c| CameraConfig {
                    id: c.camera_id,
                    k: row_major(&c.intrinsics),
                    r: row_major(&c.rotation),
                    t: [c.translation.x, c.translation.y, c.translation.z],
                    feat_w: c.feat_width,
                    feat_h: c.feat_height,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&cfg).expect("geometry serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Rotation3, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid_is_200_square() {
        let g = BevGrid::default();
        assert_eq!((g.nx(), g.ny()), (200, 200));
    }

    #[test]
    fn cell_centers() {
        let g = BevGrid::default();
        assert_eq!(g.cell_to_world(100, 100).unwrap(), (0.25, 0.25));
        assert_eq!(g.cell_to_world(0, 0).unwrap(), (-49.75, -49.75));
        assert!(matches!(g.cell_to_world(200, 0), Err(Error::Range(_))));
        assert!(matches!(g.cell_to_world(0, 200), Err(Error::Range(_))));
    }

    #[test]
    fn round_trip_every_cell() {
        let g = BevGrid::default();
        for c in g.all_cells() {
            let (x, y) = g.cell_to_world(c.ix, c.iy).unwrap();
            assert_eq!(g.world_to_cell(x, y), Some(c));
        }
        let (x, y) = g.cell_to_world(37, 121).unwrap();
        assert_eq!((x, y), (-31.25, 10.75));
        assert_eq!(g.world_to_cell(50.0, 0.0), None);
        assert_eq!(g.world_to_cell(-50.0001, 0.0), None);
    }

    #[test]
    fn pillar_heights() {
        let spec = PillarSpec::default();
        let z = spec.z_values();
        assert_eq!(z.len(), 8);
        for (j, zj) in z.iter().enumerate() {
            assert!((zj - (-1.0 + j as f64 * 4.0 / 7.0)).abs() < 1e-15);
        }
        let single = PillarSpec::new(-1.0, 3.0, 1).unwrap();
        assert_eq!(single.z_values(), vec![1.0]);
        assert!(PillarSpec::new(1.0, 1.0, 3).is_err());
        assert!(PillarSpec::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn pillar_points_share_cell_center() {
        let g = BevGrid::default();
        let spec = PillarSpec::default();
        let pts = build_pillar(&g, &spec, 12, 190).unwrap();
        let (x, y) = g.cell_to_world(12, 190).unwrap();
        assert!(pts.iter().all(|p| p.x == x && p.y == y));
        let total: usize = g
            .all_cells()
            .iter()
            .map(|c| build_pillar(&g, &spec, c.ix, c.iy).unwrap().len())
            .sum();
        assert_eq!(total, 320_000);
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let rig = CameraRig::synthetic(60, 28);
        let cam = rig.camera(0);
        let p = Point3::new(7.0, 0.0, SYNTHETIC_CAMERA_HEIGHT);
        let proj = project_point(cam, &p);
        assert!((proj.u - 29.5).abs() < 1e-12 && (proj.v - 13.5).abs() < 1e-12);
        assert!((proj.depth - 7.0).abs() < 1e-12);
        assert!(proj.visible);
        let behind = project_point(cam, &Point3::new(-3.0, 0.0, 1.5));
        assert!(!behind.visible && behind.depth < 0.0);
    }

    #[test]
    fn border_pixels_are_visible() {
        let k = Matrix3::new(10.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 1.0);
        let cam = CameraModel::new(0, k, Matrix3::identity(), Vector3::zeros(), 11, 11).unwrap();
        assert!(project_point(&cam, &Point3::new(0.0, 0.0, 1.0)).visible);
        assert!(project_point(&cam, &Point3::new(1.0, 1.0, 1.0)).visible);
        assert!(!project_point(&cam, &Point3::new(1.0001, 1.0, 1.0)).visible);
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let rot = Rotation3::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let k = Matrix3::new(
                rng.random_range(20.0..80.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(10.0..30.0),
                0.0,
                rng.random_range(20.0..80.0),
                rng.random_range(5.0..15.0),
                0.0,
                0.0,
                1.0,
            );
            let cam = CameraModel::new(0, k, *rot.matrix(), t, 40, 20).unwrap();
            // P = [K | 0] * [[R, t], [0, 1]]
            let mut ext = Matrix4::identity();
            ext.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
            ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            let mut k4 = nalgebra::Matrix3x4::zeros();
            k4.fixed_view_mut::<3, 3>(0, 0).copy_from(&k);
            let pmat = k4 * ext;
            for _ in 0..10 {
                let p = Point3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                let h = pmat * Vector4::new(p.x, p.y, p.z, 1.0);
                let proj = project_point(&cam, &p);
                if h.z > 0.0 {
                    let (u, v) = (h.x / h.z, h.y / h.z);
                    assert!((proj.u - u).abs() <= 1e-9 * u.abs().max(1.0));
                    assert!((proj.v - v).abs() <= 1e-9 * v.abs().max(1.0));
                    assert_eq!(proj.visible, (0.0..=39.0).contains(&u) && (0.0..=19.0).contains(&v));
                } else {
                    assert!(!proj.visible);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_cameras() {
        let k = Matrix3::new(10.0, 0.0, 5.0, 0.0, 10.0, 5.0, 0.0, 0.0, 1.0);
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(0, k, skewed, Vector3::zeros(), 10, 10).is_err());
        let lower = Matrix3::new(10.0, 0.0, 5.0, 1.0, 10.0, 5.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(0, lower, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
        let cam = CameraModel::new(3, k, Matrix3::identity(), Vector3::zeros(), 10, 10).unwrap();
        assert!(CameraRig::new(vec![cam]).is_err());
    }

    #[test]
    fn image_intrinsics_are_rescaled() {
        let k = Matrix3::new(400.0, 0.0, 240.0, 0.0, 400.0, 112.0, 0.0, 0.0, 1.0);
        let cam =
            CameraModel::from_image_intrinsics(0, k, 480, 224, Matrix3::identity(), Vector3::zeros(), 60, 28).unwrap();
        let kf = cam.intrinsics();
        assert_eq!((kf[(0, 0)], kf[(0, 2)], kf[(1, 1)], kf[(1, 2)], kf[(2, 2)]), (50.0, 30.0, 50.0, 14.0, 1.0));
    }

    #[test]
    fn forward_point_seen_by_forward_camera() {
        let rig = CameraRig::synthetic(60, 28);
        let ahead = visible_cameras(&rig, &Point3::new(2.0, 0.0, 1.4));
        assert!(ahead.contains(&0), "{ahead:?}");
        assert!(visible_cameras(&rig, &Point3::new(0.0, 0.0, 0.0)).is_empty());
        assert!(visible_cameras(&rig, &Point3::new(0.0, 0.0, SYNTHETIC_CAMERA_HEIGHT)).is_empty());
    }

    #[test]
    fn visible_cameras_is_brute_force_set() {
        let rig = CameraRig::synthetic(60, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-1.0..3.0));
            let brute: Vec<usize> = (0..rig.n_cam()).filter(|&i| rig.camera(i).project(&p).visible).collect();
            assert_eq!(visible_cameras(&rig, &p), brute);
        }
    }

    #[test]
    fn augmentation_basics() {
        let pts = vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-4.0, 0.5, -1.0)];
        assert_eq!(apply_bev_augmentation(&BevAugmentation::identity(), &pts), pts);
        let shift = BevAugmentation::from_pose(1.0, 0.0, 0.0);
        let moved = apply_bev_augmentation(&shift, &pts);
        for (a, b) in pts.iter().zip(&moved) {
            assert_eq!((b.x, b.y, b.z), (a.x + 1.0, a.y, a.z));
        }
        let singular = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(BevAugmentation::new(singular), Err(Error::Argument(_))));
    }

    #[test]
    fn rotation_is_isometry_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let aug = BevAugmentation::from_pose(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-3.2..3.2),
            );
            let pts: Vec<Point3<f64>> = (0..20)
                .map(|_| Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-1.0..3.0)))
                .collect();
            let moved = apply_bev_augmentation(&aug, &pts);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let d0 = (pts[i] - pts[j]).norm();
                    let d1 = (moved[i] - moved[j]).norm();
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
            let back = apply_bev_augmentation(&aug.inverse(), &moved);
            for (a, b) in pts.iter().zip(&back) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn geometry_json_round_trip() {
        let geo = SceneGeometry::synthetic(60, 28);
        let text = geo.to_json();
        let back = SceneGeometry::from_json(&text).unwrap();
        assert_eq!(back.grid, geo.grid);
        assert_eq!(back.pillar, geo.pillar);
        assert_eq!(back.rig.n_cam(), 6);
        assert!(SceneGeometry::from_json(r#"{"grid":{"x_extent":1}}"#).is_err());
    }
}
