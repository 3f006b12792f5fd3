//! Isotropic Gaussian kernel evaluations and jitter-stabilized Cholesky
//! factorization.
//!
//! Every covariance in this crate is built from the single isotropic kernel
//! `k(x, x') = exp(-||x - x'||^2 / theta)` on pre-scaled inputs, so the
//! kernel diagonal is always one. Factorizations of kernel matrices are
//! protected by a small diagonal jitter that grows geometrically on failure.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Lengthscale of the isotropic Gaussian kernel, in squared-distance units of
/// the (pre-scaled) input space. Strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lengthscale(f64);

impl Lengthscale {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!(
                "lengthscale must be positive and finite, got {theta}"
            )));
        }
        Ok(Lengthscale(theta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which matrix a factorization request belongs to; the starting jitter
/// differs between the inducing-point matrix K and the Woodbury matrix Q.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorTarget {
    K,
    Q,
}

/// Diagonal jitter schedule for Cholesky factorizations.
///
/// The starting values follow the usual conditioning defaults for sparse GP
/// matrices; on factorization failure the jitter is multiplied by
/// `growth_factor` up to `max_attempts` times, after which the failure is
/// surfaced as a numerical error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JitterPolicy {
    pub eps_k: f64,
    pub eps_q: f64,
    pub growth_factor: f64,
    pub max_attempts: u32,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            eps_k: 1e-8,
            eps_q: 1e-5,
            growth_factor: 10.0,
            max_attempts: 4,
        }
    }
}

impl JitterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_k > 0.0 && self.eps_q > 0.0) {
            return Err(Error::invalid("jitter values must be positive"));
        }
        if !(self.growth_factor > 1.0) {
            return Err(Error::invalid("jitter growth factor must exceed 1"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("jitter max_attempts must be positive"));
        }
        Ok(())
    }

    fn start(&self, which: FactorTarget) -> f64 {
        match which {
            FactorTarget::K => self.eps_k,
            FactorTarget::Q => self.eps_q,
        }
    }
}

/// Squared Euclidean distance between two points of equal dimension.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (ai, bi) in a.iter().zip(b.iter()) {
        let d = ai - bi;
        acc += d * d;
    }
    acc
}

#[inline]
pub(crate) fn kernel_from_sq(d2: f64, theta: f64) -> f64 {
    (-d2 / theta).exp()
}

/// Isotropic Gaussian kernel `exp(-||x_i - x_j||^2 / theta)`.
///
/// Symmetric in its arguments, valued in (0, 1] with equality exactly at
/// coincident points.
pub fn kernel(x_i: &[f64], x_j: &[f64], theta: Lengthscale) -> Result<f64> {
    if x_i.len() != x_j.len() {
        return Err(Error::invalid(format!(
            "kernel arguments have dimensions {} and {}",
            x_i.len(),
            x_j.len()
        )));
    }
    if x_i.iter().chain(x_j.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("kernel arguments must be finite"));
    }
    Ok(kernel_from_sq(sq_dist(x_i, x_j), theta.value()))
}

/// Pairwise squared distances between the rows of `a` (p x d) and `b` (q x d).
pub(crate) fn cross_sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(p, q);
    for i in 0..p {
        for j in 0..q {
            let mut acc = 0.0;
            for k in 0..a.ncols() {
                let d = a[(i, k)] - b[(j, k)];
                acc += d * d;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Cross-covariance matrix with entry `(i, j) = kernel(a_i, b_j, theta)`,
/// where points are the rows of `a` and `b`.
pub fn cross_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: Lengthscale) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!(
            "cross_matrix inputs have dimensions {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("cross_matrix inputs must be finite"));
    }
    let mut d2 = cross_sq_dists(a, b);
    let t = theta.value();
    d2.apply(|v| *v = kernel_from_sq(*v, t));
    Ok(d2)
}

/// A successful stabilized factorization: the lower Cholesky factor of
/// `M + jitter * I` together with the jitter that was actually used.
#[derive(Debug)]
pub struct StableFactor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl StableFactor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

/// Cholesky-factorize `M + eps * I`, growing `eps` geometrically from the
/// policy's starting value until the factorization succeeds.
///
/// `M` must be symmetric with finite entries. The effective jitter never
/// decreases within a call; exhausting `max_attempts` is reported as a
/// numerical error carrying the last jitter tried.
pub fn stable_factor(m: &DMatrix<f64>, policy: &JitterPolicy, which: FactorTarget) -> Result<StableFactor> {
    policy.validate()?;
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!(
            "stable_factor needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("stable_factor input has non-finite entries"));
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::invalid("stable_factor input is not symmetric"));
            }
        }
    }

    let mut eps = policy.start(which);
    for attempt in 0..policy.max_attempts {
        let mut jittered = m.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(StableFactor { chol, jitter: eps });
        }
        if attempt + 1 < policy.max_attempts {
            eps *= policy.growth_factor;
        }
    }
    Err(Error::numerical(format!(
        "matrix of size {} not positive definite after {} jitter attempts (last eps {:.3e})",
        m.nrows(),
        policy.max_attempts,
        eps
    )))
}
