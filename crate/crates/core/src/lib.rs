//! Sparse bird's-eye-view segmentation engine.
//!
//! The crate evaluates BeV occupancy on arbitrary sets of grid cells instead of
//! the dense grid. Cells are lifted to vertical pillars, the pillar points pull
//! camera features only from the cameras that see them ([`pulling`]), a small
//! pointwise head turns them into logits ([`net`]), and the cells themselves are
//! chosen by a coarse pass followed by a densified fine pass ([`sampling`]).
//! Past frames are fused with windowed attention over sparse spatio-temporal
//! point sets ([`attention`]). [`world`] renders deterministic synthetic scenes
//! to train and evaluate on.

pub mod attention;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod net;
pub mod pulling;
pub mod sampling;
pub mod selftest;
pub mod temporal;
pub mod train;
pub mod world;

pub use error::{Error, Result};

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
