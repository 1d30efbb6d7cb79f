//! Deterministic synthetic scenes.
//!
//! A scene is a set of yawed boxes standing on the ground plane (`z = 0`) plus
//! one planar ego pose per frame. Boxes may translate linearly between frames.
//! From a scene we derive ground-truth BeV masks, analytic camera feature
//! volumes (ray-hit indicator and hit distance, plus noise channels) and
//! single-ring LiDAR sweeps.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, BevMask, CameraRig, Cell};
use crate::pulling::FeatureVolume;

pub const SCENE_SCHEMA: &str = "pbev-scene/1";
/// Height of the LiDAR above the ground.
pub const LIDAR_HEIGHT: f64 = 1.0;
/// Maximum LiDAR and camera-distance range, meters.
pub const MAX_RANGE: f64 = 75.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    /// World-frame footprint center at frame 0.
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    pub yaw: f64,
    pub height: f64,
    /// World-frame displacement per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
}

/// World-from-ego planar pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub const IDENTITY: EgoPose = EgoPose { x: 0.0, y: 0.0, yaw: 0.0 };

    /// World point expressed in this ego frame.
    pub fn world_to_ego(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn ego_to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub boxes: Vec<SceneBox>,
    pub ego_poses: Vec<EgoPose>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    schema: String,
    boxes: Vec<SceneBox>,
    ego_poses: Vec<EgoPose>,
    seed: u64,
}

impl SceneSpec {
    pub fn new(boxes: Vec<SceneBox>, ego_poses: Vec<EgoPose>, seed: u64) -> Result<Self> {
        let spec = Self { boxes, ego_poses, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Static single-frame scene with the ego at the world origin.
    pub fn single_frame(boxes: Vec<SceneBox>, seed: u64) -> Result<Self> {
        Self::new(boxes, vec![EgoPose::IDENTITY], seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ego_poses.is_empty() {
            return Err(Error::Argument("scene needs at least one frame".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let finite = b.center.iter().chain(&b.half_extents).chain(&b.velocity).all(|x| x.is_finite())
                && b.yaw.is_finite()
                && b.height.is_finite();
            if !finite {
                return Err(Error::Argument(format!("box {i} has non-finite fields")));
            }
            if b.half_extents[0] <= 0.0 || b.half_extents[1] <= 0.0 || b.height <= 0.0 {
                return Err(Error::Argument(format!("box {i} must have positive extents and height")));
            }
        }
        if !self.ego_poses.iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite()) {
            return Err(Error::Argument("non-finite ego pose".into()));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.ego_poses.len()
    }

    /// Boxes in the ego frame of `frame`.
    pub fn boxes_at(&self, frame: usize) -> Result<Vec<SceneBox>> {
        let pose = self
            .ego_poses
            .get(frame)
            .ok_or_else(|| Error::Range(format!("frame {frame} outside 0..{}", self.n_frames())))?;
        let t = frame as f64;
        Ok(self
            .boxes
            .iter()
            .map(|b| {
                let world = [b.center[0] + t * b.velocity[0], b.center[1] + t * b.velocity[1]];
                SceneBox { center: pose.world_to_ego(world), yaw: b.yaw - pose.yaw, ..*b }
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        let doc = SceneDoc {
            schema: SCENE_SCHEMA.to_string(),
            boxes: self.boxes.clone(),
            ego_poses: self.ego_poses.clone(),
            seed: self.seed,
        };
        serde_json::to_string_pretty(&doc).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    fn from_value(value: serde_json::Value) -> Result<Self> {
        let doc: SceneDoc = serde_json::from_value(value)?;
        if doc.schema != SCENE_SCHEMA {
            return Err(Error::Schema(format!("unsupported scene schema `{}`", doc.schema)));
        }
        Self::new(doc.boxes, doc.ego_poses, doc.seed).map_err(|e| Error::Schema(e.to_string()))
    }
}

pub fn save_scene(spec: &SceneSpec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, spec.to_json())?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneSpec> {
    SceneSpec::from_json(&std::fs::read_to_string(path)?)
}

/// Many scenes as one JSON array.
pub fn scenes_to_json(scenes: &[SceneSpec]) -> String {
    let docs: Vec<serde_json::Value> =
        scenes.iter().map(|s| serde_json::from_str(&s.to_json()).expect("scene json")).collect();
    serde_json::to_string_pretty(&docs).expect("scene list serializes")
}

pub fn scenes_from_json(text: &str) -> Result<Vec<SceneSpec>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text)?;
    values.into_iter().map(SceneSpec::from_value).collect()
}

fn inside_footprint(b: &SceneBox, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.half_extents[0] && ly.abs() <= b.half_extents[1]
}

/// Cells whose center lies inside a box footprint at `frame`.
pub fn rasterize_gt(spec: &SceneSpec, grid: &BevGrid, frame: usize) -> Result<BevMask> {
    let mut mask = BevMask::new(grid);
    let res = grid.resolution();
    let (ox, oy) = (-0.5 * grid.x_extent(), -0.5 * grid.y_extent());
    // candidate index range along one axis for a footprint of radius r
    let span = |center: f64, origin: f64, r: f64, n: usize| {
        let lo = ((center - r - origin) / res).floor().max(0.0) as usize;
        let hi = ((center + r - origin) / res).floor().min(n as f64 - 1.0);
        (lo, hi)
    };
    for b in spec.boxes_at(frame)? {
        let r = b.half_extents[0].hypot(b.half_extents[1]);
        let (x0, x1) = span(b.center[0], ox, r, grid.nx());
        let (y0, y1) = span(b.center[1], oy, r, grid.ny());
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for ix in x0..=x1 as usize {
            for iy in y0..=y1 as usize {
                let (x, y) = grid.cell_to_world(ix, iy)?;
                if inside_footprint(&b, x, y) {
                    mask.set(Cell::new(ix, iy), true);
                }
            }
        }
    }
    Ok(mask)
}

/// Entry distance of a ray into a box volume (footprint x `[0, height]`),
/// by the slab method in the box frame. `dir` need not be normalized; the
/// result is in units of `dir`. A ray starting inside returns 0.
pub fn ray_box_intersection(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &SceneBox) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let (ox, oy) = (origin.x - b.center[0], origin.y - b.center[1]);
    let o = [c * ox + s * oy, -s * ox + c * oy, origin.z];
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let lo = [-b.half_extents[0], -b.half_extents[1], 0.0];
    let hi = [b.half_extents[0], b.half_extents[1], b.height];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo[a] - o[a]) / d[a];
        let t2 = (hi[a] - o[a]) / d[a];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    if t_near > t_far || t_far < 0.0 {
        return None;
    }
    Some(t_near.max(0.0))
}

/// Nearest hit distance over all boxes.
pub fn first_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, boxes: &[SceneBox]) -> Option<f64> {
    boxes.iter().filter_map(|b| ray_box_intersection(origin, dir, b)).min_by(f64::total_cmp)
}

/// Per-camera feature volumes at `frame`. Channel 0 is the ray-hit indicator,
/// channel 1 the hit distance over [`MAX_RANGE`] (0 without a hit), and any
/// further channels are Gaussian noise with std `noise_sigma`.
pub fn render_features(
    spec: &SceneSpec,
    rig: &CameraRig,
    frame: usize,
    channels: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<FeatureVolume>> {
    if channels < 2 {
        return Err(Error::Argument(format!("rendering needs at least 2 channels, got {channels}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Argument(format!("invalid noise sigma {noise_sigma}")));
    }
    let boxes = spec.boxes_at(frame)?;
    let mut out = Vec::with_capacity(rig.n_cam());
    for cam in rig.cameras() {
        let (w, h) = (cam.feat_width(), cam.feat_height());
        let mut vol = FeatureVolume::zeros(cam.camera_id(), channels, h, w);
        let origin = cam.center();
        for v in 0..h {
            for u in 0..w {
                let dir = cam.pixel_ray(u as f64, v as f64);
                if let Some(t) = first_hit(&origin, &dir, &boxes) {
                    vol.set(0, v, u, 1.0);
                    vol.set(1, v, u, (t / MAX_RANGE).min(1.0));
                }
            }
        }
        if channels > 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((frame * rig.n_cam() + cam.camera_id()) as u64);
            let noise = &mut vol.data_mut()[2 * h * w..];
            for x in noise.iter_mut() {
                *x = noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out.push(vol);
    }
    Ok(out)
}

/// Azimuth offset of a sweep; independent of the beam count so a sweep with
/// twice the beams contains every azimuth of the smaller one.
fn lidar_offset(seed: u64, frame: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 40 | frame as u64);
    rng.random_range(0.0..1.0)
}

/// Horizontal single-ring sweep from [`LIDAR_HEIGHT`]. Beam `i` has azimuth
/// `phase + 2 pi i / n_beams`, where the seeded phase does not depend on the
/// beam count. Returns the nearest box-surface hit of each beam within range.
pub fn simulate_lidar(spec: &SceneSpec, frame: usize, n_beams: usize, seed: u64) -> Result<Vec<Point3<f64>>> {
    let boxes = spec.boxes_at(frame)?;
    if boxes.is_empty() || n_beams == 0 {
        return Ok(Vec::new());
    }
    let phase = lidar_offset(seed, frame) * std::f64::consts::TAU;
    let origin = Vector3::new(0.0, 0.0, LIDAR_HEIGHT);
    let mut out = Vec::new();
    for i in 0..n_beams {
        let az = phase + std::f64::consts::TAU * i as f64 / n_beams as f64;
        let dir = Vector3::new(az.cos(), az.sin(), 0.0);
        if let Some(t) = first_hit(&origin, &dir, &boxes) {
            if t <= MAX_RANGE {
                let p = origin + t * dir;
                out.push(Point3::from(p));
            }
        }
    }
    Ok(out)
}

/// Ground truth, features and LiDAR for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub volumes: Vec<FeatureVolume>,
    pub gt_mask: BevMask,
    pub lidar: Vec<Point3<f64>>,
}

/// Parameters that turn a scene into rendered frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub channels: usize,
    pub noise_sigma: f64,
    pub n_beams: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { channels: 4, noise_sigma: 0.5, n_beams: 1440 }
    }
}

pub fn render_frame(spec: &SceneSpec, grid: &BevGrid, rig: &CameraRig, frame: usize, cfg: &RenderConfig) -> Result<RenderedFrame> {
    Ok(RenderedFrame {
        volumes: render_features(spec, rig, frame, cfg.channels, cfg.noise_sigma, spec.seed)?,
        gt_mask: rasterize_gt(spec, grid, frame)?,
        lidar: simulate_lidar(spec, frame, cfg.n_beams, spec.seed)?,
    })
}

pub const BENCHMARK_SEED: u64 = 42;
pub const BENCHMARK_TRAIN: usize = 64;
pub const BENCHMARK_EVAL: usize = 16;
/// Frames per benchmark scene.
pub const BENCHMARK_FRAMES: usize = 4;

/// One random scene of car-sized boxes that do not overlap each other or the ego.
pub fn random_scene<R: Rng>(rng: &mut R, n_boxes: usize, n_frames: usize, max_radius: f64) -> SceneSpec {
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n_boxes);
    let min_radius = 4.0;
    let mut attempts = 0;
    while boxes.len() < n_boxes && attempts < 10_000 {
        attempts += 1;
        let r = rng.random_range(min_radius..max_radius);
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let b = SceneBox {
            center: [r * az.cos(), r * az.sin()],
            half_extents: [rng.random_range(1.8..2.4), rng.random_range(0.8..1.1)],
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            height: rng.random_range(1.4..2.0),
            velocity: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        };
        let radius = |b: &SceneBox| b.half_extents[0].hypot(b.half_extents[1]);
        let clear = boxes.iter().all(|o| {
            let d = (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]);
            // leave room for relative motion over the sequence
            d > radius(o) + radius(&b) + 0.5 + 1.5 * n_frames as f64
        });
        if clear {
            boxes.push(b);
        }
    }
    // ego drives forward along its heading
    let ego_poses = (0..n_frames).map(|t| EgoPose { x: 1.0 * t as f64, y: 0.0, yaw: 0.0 }).collect();
    SceneSpec { boxes, ego_poses, seed: rng.random() }
}

/// The fixed benchmark set: 64 training and 16 evaluation scenes with 2 to 8
/// boxes each, derived from master seed 42.
pub fn benchmark_scenes() -> (Vec<SceneSpec>, Vec<SceneSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(BENCHMARK_SEED);
    let mut all: Vec<SceneSpec> = (0..BENCHMARK_TRAIN + BENCHMARK_EVAL)
        .map(|_| {
            let n = rng.random_range(2..=8);
            random_scene(&mut rng, n, BENCHMARK_FRAMES, 30.0)
        })
        .collect();
    let eval = all.split_off(BENCHMARK_TRAIN);
    (all, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PillarSpec;
    use crate::pulling::{build_visibility_table, sparse_pull, PointBatch, VolumeSet};

    fn car(x: f64, y: f64, yaw: f64) -> SceneBox {
        SceneBox { center: [x, y], half_extents: [2.0, 1.0], yaw, height: 1.6, velocity: [0.0, 0.0] }
    }

    #[test]
    fn empty_scene() {
        let spec = SceneSpec::single_frame(vec![], 1).unwrap();
        let grid = BevGrid::default();
        assert_eq!(rasterize_gt(&spec, &grid, 0).unwrap().count(), 0);
        let rig = CameraRig::synthetic(30, 14);
        for vol in render_features(&spec, &rig, 0, 3, 1.0, 5).unwrap() {
            assert!(vol.data()[..2 * 14 * 30].iter().all(|&x| x == 0.0));
        }
        assert!(simulate_lidar(&spec, 0, 720, 3).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs() {
        assert!(SceneSpec::new(vec![], vec![], 0).is_err());
        let mut b = car(5.0, 0.0, 0.0);
        b.half_extents[1] = 0.0;
        assert!(SceneSpec::single_frame(vec![b], 0).is_err());
    }

    #[test]
    fn two_meter_box_is_four_by_four() {
        let b = SceneBox { center: [0.0, 0.0], half_extents: [1.0, 1.0], yaw: 0.0, height: 1.0, velocity: [0.0; 2] };
        let grid = BevGrid::default();
        let mask = rasterize_gt(&SceneSpec::single_frame(vec![b], 0).unwrap(), &grid, 0).unwrap();
        let cells = mask.true_cells();
        assert_eq!(cells.len(), 16);
        for c in cells {
            assert!((98..102).contains(&c.ix) && (98..102).contains(&c.iy));
        }
        let turned = SceneBox { yaw: std::f64::consts::FRAC_PI_2, ..b };
        let mask2 = rasterize_gt(&SceneSpec::single_frame(vec![turned], 0).unwrap(), &grid, 0).unwrap();
        assert_eq!(mask, mask2);
    }

    #[test]
    fn raster_matches_full_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = BevGrid::new(40.0, 30.0, 0.5).unwrap();
        for _ in 0..20 {
            let spec = random_scene(&mut rng, 5, 2, 25.0);
            for frame in 0..2 {
                let mask = rasterize_gt(&spec, &grid, frame).unwrap();
                let boxes = spec.boxes_at(frame).unwrap();
                for c in grid.all_cells() {
                    let (x, y) = grid.cell_to_world(c.ix, c.iy).unwrap();
                    assert_eq!(mask.get(c), boxes.iter().any(|b| inside_footprint(b, x, y)));
                }
            }
        }
    }

    #[test]
    fn ego_motion_moves_boxes() {
        let spec = SceneSpec::new(
            vec![car(10.0, 0.0, 0.0)],
            vec![EgoPose::IDENTITY, EgoPose { x: 2.0, y: 0.0, yaw: std::f64::consts::FRAC_PI_2 }],
            0,
        )
        .unwrap();
        let b = spec.boxes_at(1).unwrap()[0];
        assert!((b.center[0] - 0.0).abs() < 1e-12 && (b.center[1] + 8.0).abs() < 1e-12);
        assert!(spec.boxes_at(2).is_err());
        let pose = spec.ego_poses[1];
        let back = pose.ego_to_world(pose.world_to_ego([3.0, -7.0]));
        assert!((back[0] - 3.0).abs() < 1e-12 && (back[1] + 7.0).abs() < 1e-12);
    }

    /// Face-plane intersection: nearest positive crossing of each of the six
    /// faces whose hit point lies on the face.
    fn face_oracle(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &SceneBox) -> Option<f64> {
        let (s, c) = b.yaw.sin_cos();
        let ax = Vector3::new(c, s, 0.0);
        let ay = Vector3::new(-s, c, 0.0);
        let az = Vector3::new(0.0, 0.0, 1.0);
        let center = Vector3::new(b.center[0], b.center[1], 0.5 * b.height);
        let half = [b.half_extents[0], b.half_extents[1], 0.5 * b.height];
        let axes = [ax, ay, az];
        let mut best: Option<f64> = None;
        for k in 0..3 {
            for sign in [-1.0, 1.0] {
                let n = axes[k];
                let plane = center + sign * half[k] * n;
                let denom = dir.dot(&n);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let t = (plane - origin).dot(&n) / denom;
                if t < 0.0 {
                    continue;
                }
                let p = origin + t * dir - center;
                let on_face = (0..3).filter(|&j| j != k).all(|j| p.dot(&axes[j]).abs() <= half[j] + 1e-9);
                if on_face && best.is_none_or(|bt| t < bt) {
                    best = Some(t);
                }
            }
        }
        best
    }

    #[test]
    fn slab_matches_face_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        for _ in 0..1000 {
            let b = SceneBox {
                center: [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
                half_extents: [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
                yaw: rng.random_range(-3.0..3.0),
                height: rng.random_range(0.5..3.0),
                velocity: [0.0; 2],
            };
            // origins outside every box: 15 m away at camera-ish heights
            let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let origin = Vector3::new(15.0 * az.cos() + b.center[0], 15.0 * az.sin() + b.center[1], rng.random_range(0.2..2.5));
            let target = Vector3::new(
                b.center[0] + rng.random_range(-4.0..4.0),
                b.center[1] + rng.random_range(-4.0..4.0),
                rng.random_range(-1.0..4.0),
            );
            let dir = (target - origin).normalize();
            let slab = ray_box_intersection(&origin, &dir, &b);
            let oracle = face_oracle(&origin, &dir, &b);
            match (slab, oracle) {
                (Some(a), Some(o)) => {
                    hits += 1;
                    assert!((a - o).abs() < 1e-9, "slab {a} vs faces {o}");
                }
                (None, None) => {}
                other => panic!("slab and face oracle disagree: {other:?}"),
            }
        }
        assert!(hits > 200 && hits < 1000);
    }

    #[test]
    fn wall_fills_forward_camera() {
        let wall = SceneBox { center: [6.0, 0.0], half_extents: [4.0, 50.0], yaw: 0.0, height: 100.0, velocity: [0.0; 2] };
        let spec = SceneSpec::single_frame(vec![wall], 0).unwrap();
        let rig = CameraRig::synthetic(60, 28);
        let vols = render_features(&spec, &rig, 0, 2, 0.0, 0).unwrap();
        assert!(vols[0].data()[..28 * 60].iter().all(|&x| x == 1.0));
        // the rear camera faces away from the wall
        assert!(vols[5].data()[..28 * 60].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_scene(&mut rng, 4, 2, 20.0);
        let rig = CameraRig::synthetic(30, 14);
        let a = render_features(&spec, &rig, 1, 4, 0.3, 9).unwrap();
        let b = render_features(&spec, &rig, 1, 4, 0.3, 9).unwrap();
        assert_eq!(a, b);
        let c = render_features(&spec, &rig, 1, 4, 0.3, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lidar_returns_lie_on_surface() {
        let b = car(12.0, 3.0, 0.4);
        let spec = SceneSpec::single_frame(vec![b], 0).unwrap();
        let pts = simulate_lidar(&spec, 0, 3600, 7).unwrap();
        assert!(!pts.is_empty());
        let (s, c) = b.yaw.sin_cos();
        for p in pts {
            let (dx, dy) = (p.x - b.center[0], p.y - b.center[1]);
            let lx = (c * dx + s * dy).abs();
            let ly = (-s * dx + c * dy).abs();
            let on_side = ((lx - b.half_extents[0]).abs() < 1e-9 && ly <= b.half_extents[1] + 1e-9)
                || ((ly - b.half_extents[1]).abs() < 1e-9 && lx <= b.half_extents[0] + 1e-9);
            assert!(on_side, "return ({}, {}) is off the box surface", p.x, p.y);
            assert!((p.z - LIDAR_HEIGHT).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_beams_is_superset() {
        let spec = SceneSpec::single_frame(vec![car(12.0, 3.0, 0.4), car(-8.0, -9.0, 1.0)], 0).unwrap();
        let key = |p: &Point3<f64>| ((p.x * 1e6).round() as i64, (p.y * 1e6).round() as i64);
        let small: Vec<_> = simulate_lidar(&spec, 0, 720, 3).unwrap().iter().map(key).collect();
        let big: std::collections::HashSet<_> = simulate_lidar(&spec, 0, 1440, 3).unwrap().iter().map(key).collect();
        assert!(small.iter().all(|k| big.contains(k)));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let spec = random_scene(&mut rng, 6, 3, 30.0);
            let back = SceneSpec::from_json(&spec.to_json()).unwrap();
            assert_eq!(spec, back);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let spec = random_scene(&mut rng, 3, 1, 30.0);
        save_scene(&spec, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), spec);
    }

    #[test]
    fn schema_errors() {
        let ok = SceneSpec::single_frame(vec![car(5.0, 5.0, 0.0)], 1).unwrap().to_json();
        let missing = ok.replace("\"seed\": 1", "\"seeed\": 1");
        assert!(matches!(SceneSpec::from_json(&missing), Err(Error::Schema(_))));
        let wrong = ok.replace(SCENE_SCHEMA, "pbev-scene/9");
        assert!(matches!(SceneSpec::from_json(&wrong), Err(Error::Schema(_))));
        let bad_box = ok.replace("\"height\": 1.6", "\"height\": -1.0");
        assert!(matches!(SceneSpec::from_json(&bad_box), Err(Error::Schema(_))));
    }

    #[test]
    fn benchmark_shape() {
        let (train, eval) = benchmark_scenes();
        assert_eq!((train.len(), eval.len()), (64, 16));
        for s in train.iter().chain(&eval) {
            assert!((2..=8).contains(&s.boxes.len()));
            assert_eq!(s.n_frames(), BENCHMARK_FRAMES);
        }
        assert_eq!(benchmark_scenes().0, train);
    }

    #[test]
    fn hit_channel_is_informative() {
        let (train, _) = benchmark_scenes();
        let grid = BevGrid::default();
        let pillar = PillarSpec::default();
        let rig = CameraRig::synthetic(60, 28);
        for spec in train.iter().take(4) {
            let vols = VolumeSet::single(render_features(spec, &rig, 0, 2, 0.0, spec.seed).unwrap()).unwrap();
            let gt = rasterize_gt(spec, &grid, 0).unwrap();
            let cells: Vec<Cell> = grid.all_cells();
            let batch = PointBatch::from_cells(&grid, &pillar, &cells, 0).unwrap();
            let pulled = sparse_pull(&vols, &build_visibility_table(&rig, &batch)).unwrap();
            let (mut on, mut off) = ((0.0, 0usize), (0.0, 0usize));
            for (i, c) in cells.iter().enumerate() {
                let mean: f64 = (0..pillar.n_z()).map(|j| pulled.feature(i * pillar.n_z() + j)[0]).sum::<f64>();
                let acc = if gt.get(*c) { &mut on } else { &mut off };
                acc.0 += mean;
                acc.1 += 1;
            }
            assert!(on.0 / on.1 as f64 > off.0 / off.1 as f64 + 0.1);
        }
    }
}
