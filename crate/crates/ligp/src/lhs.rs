//! Latin hypercube sampling on hyperrectangles.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

/// Draw an `n`-point Latin hypercube on the box given by per-dimension
/// `(lo, hi)` bounds. Each of the `n` equal-width strata of every dimension
/// contains exactly one point.
pub fn latin_hypercube<R: Rng>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> DMatrix<f64> {
    let d = bounds.len();
    let mut out = DMatrix::zeros(n, d);
    let mut strata: Vec<usize> = (0..n).collect();
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        strata.shuffle(rng);
        for i in 0..n {
            let u: f64 = rng.random();
            let frac = (strata[i] as f64 + u) / n as f64;
            out[(i, j)] = lo + frac * (hi - lo);
        }
    }
    out
}

/// Unit-cube Latin hypercube coordinates in (0, 1).
pub fn latin_hypercube_unit<R: Rng>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let bounds = vec![(0.0, 1.0); d];
    latin_hypercube(n, &bounds, rng)
}
