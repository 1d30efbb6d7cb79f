//! Scene fixtures, the shipped benchmark set and LiDAR coverage.

use pointbev::geometry::{BevGrid, BevMask, Cell};
use pointbev::sampling::lidar_to_mask;
use nalgebra::Vector3;
use pointbev::world::{
    benchmark_scenes, first_hit, load_scene, rasterize_gt, scenes_from_json, simulate_lidar, EgoPose, SceneSpec,
    BENCHMARK_EVAL, BENCHMARK_TRAIN, LIDAR_HEIGHT,
};

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn two_box_fixture_parses_to_known_scene() {
    let spec = load_scene(fixture("two_boxes.json")).unwrap();
    assert_eq!(spec.seed, 7);
    assert_eq!(spec.ego_poses, vec![EgoPose::IDENTITY]);
    assert_eq!(spec.boxes.len(), 2);
    assert_eq!(spec.boxes[0].center, [10.0, 0.0]);
    assert_eq!(spec.boxes[0].velocity, [0.0, 0.0]);
    assert_eq!(spec.boxes[1].half_extents, [2.0, 1.0]);
    assert_eq!(spec.boxes[1].velocity, [0.5, 0.0]);

    // 2 m x 2 m box -> 4 x 4 cells; 4 m x 2 m box turned upright -> 4 x 8 cells
    let gt = rasterize_gt(&spec, &BevGrid::default(), 0).unwrap();
    assert_eq!(gt.count(), 16 + 32);
    let grid = BevGrid::default();
    let c = grid.world_to_cell(10.0 + 0.25, 0.25).unwrap();
    assert!(gt.get(c));
    let outside = grid.world_to_cell(-5.0 + 1.25, 5.0).unwrap();
    assert!(!gt.get(outside));
    let inside = grid.world_to_cell(-5.0 + 0.75, 5.0 + 1.75).unwrap();
    assert!(gt.get(inside));

    assert_eq!(SceneSpec::from_json(&spec.to_json()).unwrap(), spec);
}

#[test]
fn shipped_benchmark_matches_generator() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let train = scenes_from_json(&std::fs::read_to_string(dir.join("benchmark_train.json")).unwrap()).unwrap();
    let eval = scenes_from_json(&std::fs::read_to_string(dir.join("benchmark_eval.json")).unwrap()).unwrap();
    assert_eq!((train.len(), eval.len()), (BENCHMARK_TRAIN, BENCHMARK_EVAL));
    let (gen_train, gen_eval) = benchmark_scenes();
    assert_eq!(train, gen_train);
    assert_eq!(eval, gen_eval);
    for s in train.iter().chain(&eval) {
        assert!((2..=8).contains(&s.boxes.len()));
    }
}

/// Occupied cells with at least one free 4-neighbor.
fn boundary(gt: &BevMask) -> Vec<Cell> {
    gt.true_cells()
        .into_iter()
        .filter(|c| {
            let neighbors = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
            neighbors.iter().any(|(dx, dy)| {
                let (x, y) = (c.ix as i64 + dx, c.iy as i64 + dy);
                x < 0 || y < 0 || x >= gt.nx() as i64 || y >= gt.ny() as i64 || !gt.get(Cell::new(x as usize, y as usize))
            })
        })
        .collect()
}

/// Boundary cells in the sensor's line of sight: the ray towards the cell
/// center meets the first box surface inside that same cell. Faces turned away
/// from the sensor or hidden behind other boxes never return a beam.
fn visible_boundary(spec: &SceneSpec, grid: &BevGrid, frame: usize) -> Vec<Cell> {
    let boxes = spec.boxes_at(frame).unwrap();
    let origin = Vector3::new(0.0, 0.0, LIDAR_HEIGHT);
    boundary(&rasterize_gt(spec, grid, frame).unwrap())
        .into_iter()
        .filter(|c| {
            let (x, y) = grid.cell_to_world(c.ix, c.iy).unwrap();
            let dir = Vector3::new(x, y, 0.0).normalize();
            first_hit(&origin, &dir, &boxes).is_some_and(|t| {
                let p = origin + t * dir;
                grid.world_to_cell(p.x, p.y) == Some(*c)
            })
        })
        .collect()
}

#[test]
fn lidar_covers_visible_boundary() {
    let grid = BevGrid::default();
    let (train, eval) = benchmark_scenes();
    for n_beams in [720, 1440] {
        let (mut covered, mut total, mut all_boundary) = (0usize, 0usize, 0usize);
        for spec in train.iter().chain(&eval) {
            let frame = spec.n_frames() - 1;
            let mask = lidar_to_mask(&simulate_lidar(spec, frame, n_beams, spec.seed).unwrap(), &grid);
            all_boundary += boundary(&rasterize_gt(spec, &grid, frame).unwrap()).len();
            for c in visible_boundary(spec, &grid, frame) {
                total += 1;
                covered += mask.get(c) as usize;
            }
        }
        let coverage = covered as f64 / total as f64;
        println!("n_beams={n_beams}: {covered}/{total} visible boundary cells covered ({coverage:.3}); {all_boundary} boundary cells in all");
        assert!(coverage >= 0.8, "coverage {coverage} at {n_beams} beams");
    }
}
