//! Object queries: a learnable box plus a learnable feature vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, Box3D};

/// Initial box dimensions `(w, l, h)` of every query.
pub const INIT_DIMS: [f64; 3] = [6.0, 3.0, 2.0];
/// Standard deviation of the initial query features.
pub const INIT_FEAT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQuery {
    pub bbox: Box3D,
    pub feat: Vec<f64>,
}

/// `n` queries on a near-square lattice over the grid range.
///
/// The lattice is `k × k` with `k = ⌈√n⌉`, truncated to `n` in row-major
/// order (rows along y, columns along x); cell centers are used so every
/// query lies strictly inside the range.
pub fn init_queries(n: usize, dim: usize, grid: &BevGrid, seed: u64) -> Result<Vec<ObjectQuery>> {
    if n == 0 {
        return Err(Error::Argument("query count must be at least 1".into()));
    }
    let k = (n as f64).sqrt().ceil() as usize;
    let k = if k * k < n { k + 1 } else { k };
    let (sx, sy) = ((grid.x_max - grid.x_min) / k as f64, (grid.y_max - grid.y_min) / k as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, INIT_FEAT_STD).expect("finite std");
    Ok((0..n)
        .map(|i| {
            let (r, c) = (i / k, i % k);
            let x = grid.x_min + (c as f64 + 0.5) * sx;
            let y = grid.y_min + (r as f64 + 0.5) * sy;
            let bbox = Box3D { x, y, z: 0.0, w: INIT_DIMS[0], l: INIT_DIMS[1], h: INIT_DIMS[2], sin: 0.0, cos: 1.0 };
            let feat = (0..dim).map(|_| dist.sample(&mut rng)).collect();
            ObjectQuery { bbox, feat }
        })
        .collect())
}
