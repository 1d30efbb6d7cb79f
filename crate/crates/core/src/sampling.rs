//! Point selection: coarse patterns, anchors, densification, budget capping
//! and pass merging.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::Point3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, BevMask, Cell};
use crate::sigmoid;

/// A set of BeV cells to evaluate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSet {
    cells: Vec<Cell>,
    unique: bool,
}

impl SampleSet {
    /// Wraps `cells`, recording whether they are free of duplicates.
    pub fn new(cells: Vec<Cell>) -> Self {
        let mut sorted = cells.clone();
        sorted.sort_unstable();
        let unique = sorted.windows(2).all(|w| w[0] != w[1]);
        Self { cells, unique }
    }

    /// Sorts and removes duplicates.
    pub fn dedup(mut cells: Vec<Cell>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        Self { cells, unique: true }
    }

    pub fn full(grid: &BevGrid) -> Self {
        Self { cells: grid.all_cells(), unique: true }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<Cell> {
        self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_unique(&self) -> bool {
        self.unique
    }

    pub fn in_range(&self, grid: &BevGrid) -> bool {
        self.cells.iter().all(|c| grid.contains(*c))
    }

    pub fn to_mask(&self, grid: &BevGrid) -> BevMask {
        let mut mask = BevMask::new(grid);
        for c in &self.cells {
            mask.set(*c, true);
        }
        mask
    }
}

/// How the coarse pass picks its cells.
#[derive(Debug, Clone, PartialEq)]
pub enum CoarseVariant {
    RandomUniform { n: usize },
    /// Cells `(floor(a * spacing), floor(b * spacing))`. Integer spacings give
    /// the plain `a * k` lattice; fractional ones are used to hit a cell-count
    /// reduction factor exactly.
    RegularGrid { spacing: f64 },
    GaussianEgo { sigma: f64, n: usize },
    MaskPrior { mask: BevMask, n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseStrategy {
    pub variant: CoarseVariant,
    pub seed: u64,
}

impl CoarseStrategy {
    pub fn random(n: usize, seed: u64) -> Self {
        Self { variant: CoarseVariant::RandomUniform { n }, seed }
    }

    pub fn regular(spacing: f64) -> Self {
        Self { variant: CoarseVariant::RegularGrid { spacing }, seed: 0 }
    }

    /// Regular pattern keeping roughly one cell in `factor` (spacing `sqrt(factor)`).
    pub fn subsampled(factor: u32) -> Self {
        Self::regular((factor as f64).sqrt())
    }

    pub fn gaussian(sigma: f64, n: usize, seed: u64) -> Self {
        Self { variant: CoarseVariant::GaussianEgo { sigma, n }, seed }
    }

    pub fn mask(mask: BevMask, n: usize, seed: u64) -> Self {
        Self { variant: CoarseVariant::MaskPrior { mask, n }, seed }
    }

    pub fn validate(&self, grid: &BevGrid) -> Result<()> {
        match &self.variant {
            CoarseVariant::RandomUniform { n } | CoarseVariant::GaussianEgo { n, .. } if *n > grid.n_cells() => {
                Err(Error::Argument(format!("cannot draw {n} distinct cells from {}", grid.n_cells())))
            }
            CoarseVariant::GaussianEgo { sigma, .. } if !(*sigma > 0.0) => {
                Err(Error::Argument(format!("gaussian sigma must be positive, got {sigma}")))
            }
            CoarseVariant::RegularGrid { spacing } if !(*spacing >= 1.0) || !spacing.is_finite() => {
                Err(Error::Argument(format!("regular spacing must be >= 1, got {spacing}")))
            }
            CoarseVariant::MaskPrior { mask, n } => {
                if !mask.matches(grid) {
                    Err(Error::Argument("mask prior does not match the grid".into()))
                } else if mask.count() == 0 {
                    Err(Error::Argument("mask prior has no true cell".into()))
                } else if *n > grid.n_cells() {
                    Err(Error::Argument(format!("cannot draw {n} distinct cells from {}", grid.n_cells())))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

fn regular_axis(n: usize, spacing: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut a = 0usize;
    loop {
        let i = (a as f64 * spacing).floor() as usize;
        if i >= n {
            break;
        }
        out.push(i);
        a += 1;
    }
    out
}

/// Draws the coarse cell set. Output is sorted lexicographically.
pub fn sample_coarse(strategy: &CoarseStrategy, grid: &BevGrid) -> Result<SampleSet> {
    strategy.validate(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
    let cells = match &strategy.variant {
        CoarseVariant::RandomUniform { n } => index::sample(&mut rng, grid.n_cells(), *n)
            .into_iter()
            .map(|i| grid.cell_from_flat(i))
            .collect(),
        CoarseVariant::RegularGrid { spacing } => {
            let xs = regular_axis(grid.nx(), *spacing);
            let ys = regular_axis(grid.ny(), *spacing);
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for &ix in &xs {
                for &iy in &ys {
                    out.push(Cell::new(ix, iy));
                }
            }
            out
        }
        CoarseVariant::GaussianEgo { sigma, n } => {
            // Gumbel-top-k over log-weights: weighted sampling without replacement
            let mut keyed: Vec<(f64, Cell)> = grid
                .all_cells()
                .into_iter()
                .map(|c| {
                    let (x, y) = grid.cell_to_world(c.ix, c.iy).expect("cell from grid");
                    let log_w = -(x * x + y * y) / (2.0 * sigma * sigma);
                    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    (log_w - (-u.ln()).ln(), c)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            keyed.into_iter().take(*n).map(|(_, c)| c).collect()
        }
        CoarseVariant::MaskPrior { mask, n } => {
            let candidates = mask.true_cells();
            if candidates.len() <= *n {
                candidates
            } else {
                index::sample(&mut rng, candidates.len(), *n).into_iter().map(|i| candidates[i]).collect()
            }
        }
    };
    Ok(SampleSet::dedup(cells))
}

/// Anchor selection rule applied to a pass's logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorRule {
    TopK(usize),
    /// Cells with `sigmoid(logit) > tau`.
    Threshold(f64),
}

impl AnchorRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AnchorRule::TopK(0) => Err(Error::Argument("top-k anchor count must be >= 1".into())),
            AnchorRule::Threshold(t) if !(0.0..=1.0).contains(&t) => {
                Err(Error::Argument(format!("anchor threshold must lie in [0, 1], got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// Evaluated cells with one logit each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PassResult {
    cells: SampleSet,
    logits: Vec<f64>,
}

impl PassResult {
    pub fn new(cells: SampleSet, logits: Vec<f64>) -> Result<Self> {
        if cells.len() != logits.len() {
            return Err(Error::Argument(format!("{} cells but {} logits", cells.len(), logits.len())));
        }
        if !logits.iter().all(|l| l.is_finite()) {
            return Err(Error::Argument("non-finite logit".into()));
        }
        Ok(Self { cells, logits })
    }

    pub fn cells(&self) -> &SampleSet {
        &self.cells
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Cell, f64)> + '_ {
        self.cells.cells().iter().copied().zip(self.logits.iter().copied())
    }
}

/// Picks anchors from a pass. Top-K ties are broken by ascending cell order;
/// the returned cells are sorted lexicographically.
pub fn select_anchors(result: &PassResult, rule: AnchorRule) -> SampleSet {
    let mut picked: Vec<Cell> = match rule {
        AnchorRule::TopK(n) => {
            let mut order: Vec<(f64, Cell)> = result.iter().map(|(c, l)| (l, c)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            order.into_iter().take(n).map(|(_, c)| c).collect()
        }
        AnchorRule::Threshold(tau) => result.iter().filter(|&(_, l)| sigmoid(l) > tau).map(|(c, _)| c).collect(),
    };
    picked.sort_unstable();
    SampleSet { unique: result.cells.unique, cells: picked }
}

/// Union of `k_fine x k_fine` windows around every anchor, clipped to the grid.
pub fn densify(anchors: &SampleSet, k_fine: usize, grid: &BevGrid) -> Result<SampleSet> {
    if k_fine == 0 || k_fine % 2 == 0 {
        return Err(Error::Argument(format!("k_fine must be odd and >= 1, got {k_fine}")));
    }
    let half = (k_fine / 2) as isize;
    let mut hit = vec![false; grid.n_cells()];
    for a in anchors.cells() {
        if !grid.contains(*a) {
            return Err(Error::Range(format!("anchor ({}, {}) outside grid", a.ix, a.iy)));
        }
        let x0 = (a.ix as isize - half).max(0) as usize;
        let x1 = (a.ix as isize + half).min(grid.nx() as isize - 1) as usize;
        let y0 = (a.iy as isize - half).max(0) as usize;
        let y1 = (a.iy as isize + half).min(grid.ny() as isize - 1) as usize;
        for iy in y0..=y1 {
            let row = iy * grid.nx();
            hit[row + x0..=row + x1].iter_mut().for_each(|h| *h = true);
        }
    }
    let mut cells = Vec::new();
    for ix in 0..grid.nx() {
        for iy in 0..grid.ny() {
            if hit[iy * grid.nx() + ix] {
                cells.push(Cell::new(ix, iy));
            }
        }
    }
    Ok(SampleSet { cells, unique: true })
}

/// Uniform random subset of at most `n_fine` cells, in input order.
pub fn cap_budget(cells: &SampleSet, n_fine: usize, seed: u64) -> SampleSet {
    if cells.len() <= n_fine {
        return cells.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, cells.len(), n_fine).into_vec();
    keep.sort_unstable();
    SampleSet { cells: keep.into_iter().map(|i| cells.cells[i]).collect(), unique: cells.unique }
}

/// Union of two passes; fine logits win on shared cells. Output is sorted.
pub fn merge_passes(coarse: &PassResult, fine: &PassResult) -> PassResult {
    let mut merged: BTreeMap<Cell, f64> = coarse.iter().collect();
    merged.extend(fine.iter());
    let (cells, logits): (Vec<Cell>, Vec<f64>) = merged.into_iter().unzip();
    PassResult { cells: SampleSet { cells, unique: true }, logits }
}

/// Cells holding at least one LiDAR return; heights are ignored.
pub fn lidar_to_mask(lidar_points: &[Point3<f64>], grid: &BevGrid) -> BevMask {
    let mut mask = BevMask::new(grid);
    for p in lidar_points {
        if let Some(c) = grid.world_to_cell(p.x, p.y) {
            mask.set(c, true);
        }
    }
    mask
}

/// Where a mask prior comes from on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSource {
    Lidar,
}

/// Command-line form of a coarse strategy, before masks and seeds are bound:
/// `random:2500:seed=7`, `regular:4`, `gauss:10.0:2500`, `mask:lidar[:n]`.
#[derive(Debug, Clone, PartialEq)]
pub enum CoarseSpec {
    Random { n: usize, seed: Option<u64> },
    Regular { spacing: f64 },
    Gauss { sigma: f64, n: usize },
    Mask { source: MaskSource, n: usize },
}

/// Cell budget used by `mask:` specs without an explicit count.
pub const DEFAULT_MASK_BUDGET: usize = 2500;

impl CoarseSpec {
    /// Binds this coarse spec to a seed (unless it carries its own) and a mask.
    pub fn resolve(&self, seed: u64, lidar: Option<&BevMask>) -> Result<CoarseStrategy> {
        Ok(match self {
            CoarseSpec::Random { n, seed: own } => CoarseStrategy::random(*n, own.unwrap_or(seed)),
            CoarseSpec::Regular { spacing } => CoarseStrategy::regular(*spacing),
            CoarseSpec::Gauss { sigma, n } => CoarseStrategy::gaussian(*sigma, *n, seed),
            CoarseSpec::Mask { source: MaskSource::Lidar, n } => {
                let mask = lidar.ok_or_else(|| Error::Argument("mask:lidar needs a LiDAR sweep".into()))?;
                CoarseStrategy::mask(mask.clone(), *n, seed)
            }
        })
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Argument(format!("cannot parse {what} from `{s}`")))
}

impl FromStr for CoarseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["random", n] => CoarseSpec::Random { n: parse_num(n, "count")?, seed: None },
            ["random", n, seed] => {
                let seed = seed
                    .strip_prefix("seed=")
                    .ok_or_else(|| Error::Argument(format!("expected seed=<u64>, got `{seed}`")))?;
                CoarseSpec::Random { n: parse_num(n, "count")?, seed: Some(parse_num(seed, "seed")?) }
            }
            ["regular", k] => CoarseSpec::Regular { spacing: parse_num(k, "spacing")? },
            ["gauss", sigma, n] => CoarseSpec::Gauss { sigma: parse_num(sigma, "sigma")?, n: parse_num(n, "count")? },
            ["mask", "lidar"] => CoarseSpec::Mask { source: MaskSource::Lidar, n: DEFAULT_MASK_BUDGET },
            ["mask", "lidar", n] => CoarseSpec::Mask { source: MaskSource::Lidar, n: parse_num(n, "count")? },
            _ => return Err(Error::Argument(format!("unknown coarse strategy `{s}`"))),
        };
        if let CoarseSpec::Regular { spacing } = spec {
            if !(spacing >= 1.0) {
                return Err(Error::Argument(format!("regular spacing must be >= 1, got {spacing}")));
            }
        }
        Ok(spec)
    }
}

impl FromStr for AnchorRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rule = match s.split_once(':') {
            Some(("topk", n)) => AnchorRule::TopK(parse_num(n, "anchor count")?),
            Some(("thresh", t)) => AnchorRule::Threshold(parse_num(t, "threshold")?),
            _ => return Err(Error::Argument(format!("unknown anchor rule `{s}`"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}
