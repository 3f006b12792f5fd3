//! Shared oracle machinery for integration tests.
//!
//! Everything here recomputes quantities from first principles — dense
//! n x n covariance assembly, naive expanded-data predictive formulas,
//! adaptive quadrature, finite differences — independently of the library's
//! compressed Woodbury path, so agreement is evidence rather than tautology.

#![allow(dead_code)]

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

/// A random replicated instance with its raw expansion kept around.
pub struct Instance {
    /// unique inputs (nbar x d)
    pub xbar: DMatrix<f64>,
    pub a: Vec<usize>,
    /// raw replicate responses per unique input
    pub reps: Vec<Vec<f64>>,
    /// inducing points (m x d)
    pub psi: DMatrix<f64>,
    pub theta: f64,
    pub g: f64,
}

impl Instance {
    pub fn n_total(&self) -> usize {
        self.a.iter().sum()
    }

    pub fn nbar(&self) -> usize {
        self.xbar.nrows()
    }

    pub fn dim(&self) -> usize {
        self.xbar.ncols()
    }

    /// Raw rows in site-major order.
    pub fn raw(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_total();
        let d = self.dim();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut r = 0;
        for i in 0..self.nbar() {
            for j in 0..self.a[i] {
                for k in 0..d {
                    x[(r, k)] = self.xbar[(i, k)];
                }
                y[r] = self.reps[i][j];
                r += 1;
            }
        }
        (x, y)
    }

    pub fn ybar(&self) -> DVector<f64> {
        DVector::from_fn(self.nbar(), |i, _| {
            self.reps[i].iter().sum::<f64>() / self.a[i] as f64
        })
    }
}

/// Draw a random instance. Inducing points are picked by farthest-point
/// selection from random candidates so the inducing kernel matrix stays
/// well conditioned and identity checks are meaningful at 1e-9.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    nbar_max: usize,
    m_max: usize,
    a_max: usize,
    d_max: usize,
) -> Instance {
    let d = rng.random_range(1..=d_max);
    let nbar = rng.random_range(2..=nbar_max.max(2));
    let m = rng.random_range(1..=m_max);
    let xbar = DMatrix::from_fn(nbar, d, |_, _| rng.random_range(0.0..2.0));
    let a: Vec<usize> = (0..nbar).map(|_| rng.random_range(1..=a_max)).collect();

    let candidates: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..d).map(|_| rng.random_range(-0.2..2.2)).collect())
        .collect();
    let mut chosen: Vec<Vec<f64>> = vec![candidates[0].clone()];
    while chosen.len() < m {
        let far = candidates
            .iter()
            .max_by(|p, q| {
                let dp = chosen
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(p.iter())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                let dq = chosen
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(q.iter())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                dp.partial_cmp(&dq).unwrap()
            })
            .unwrap();
        chosen.push(far.clone());
    }
    let psi = DMatrix::from_fn(m, d, |l, k| chosen[l][k]);
    let theta = rng.random_range(0.3..2.0);
    let g = rng.random_range(1e-2..0.5);
    let mut reps = Vec::with_capacity(nbar);
    for &ai in &a {
        let center: f64 = rng.random_range(-1.0..1.0);
        reps.push((0..ai).map(|_| center + rng.random_range(-0.5..0.5)).collect());
    }
    Instance {
        xbar,
        a,
        reps,
        psi,
        theta,
        g,
    }
}

pub fn kernel(a: &[f64], b: &[f64], theta: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / theta).exp()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Dense `n x n` covariance divided by tau2, assembled from the raw
/// expansion with the inducing matrix jittered by `eps_k` exactly as the
/// implementation jitters it.
pub fn dense_sigma0(inst: &Instance, eps_k: f64) -> DMatrix<f64> {
    let (x, _) = inst.raw();
    let n = x.nrows();
    let m = inst.psi.nrows();
    let mut kmm = DMatrix::from_fn(m, m, |i, j| kernel(&row(&inst.psi, i), &row(&inst.psi, j), inst.theta));
    for l in 0..m {
        kmm[(l, l)] += eps_k;
    }
    let knm = DMatrix::from_fn(n, m, |i, l| kernel(&row(&x, i), &row(&inst.psi, l), inst.theta));
    let kinv = Cholesky::new(kmm).expect("dense oracle K factorization").inverse();
    let low_rank = &knm * &kinv * knm.transpose();
    let mut sigma = low_rank.clone();
    for i in 0..n {
        // Diag{K_n - low_rank} + g I, with unit kernel diagonal
        sigma[(i, i)] += 1.0 - low_rank[(i, i)] + inst.g;
    }
    sigma
}

/// Log-determinant of a dense SPD matrix.
pub fn dense_log_det(m: &DMatrix<f64>) -> f64 {
    let chol = Cholesky::new(m.clone()).expect("dense oracle log det");
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Full MVN log-density of the raw responses under scale tau2.
pub fn dense_log_likelihood(inst: &Instance, eps_k: f64, tau2: f64) -> f64 {
    let (_, y) = inst.raw();
    let n = y.len();
    let sigma0 = dense_sigma0(inst, eps_k);
    let chol = Cholesky::new(sigma0).expect("dense oracle likelihood");
    let quad = y.dot(&chol.solve(&y)) / tau2;
    let logdet = (n as f64) * tau2.ln()
        + 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * ((n as f64) * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Dense concentrated tau2: `Y' Sigma0^{-1} Y / n`.
pub fn dense_tau2(inst: &Instance, eps_k: f64) -> f64 {
    let (_, y) = inst.raw();
    let sigma0 = dense_sigma0(inst, eps_k);
    let chol = Cholesky::new(sigma0).expect("dense oracle tau2");
    y.dot(&chol.solve(&y)) / y.len() as f64
}

/// Naive expanded-data SPGP predictive moments (mean, variance/tau2) with
/// the same jitters the implementation applies.
pub fn naive_predict(inst: &Instance, eps_k: f64, eps_q: f64, xprime: &[f64]) -> (f64, f64) {
    let (x, y) = inst.raw();
    let n = x.nrows();
    let m = inst.psi.nrows();
    let mut kmm = DMatrix::from_fn(m, m, |i, j| kernel(&row(&inst.psi, i), &row(&inst.psi, j), inst.theta));
    for l in 0..m {
        kmm[(l, l)] += eps_k;
    }
    let knm = DMatrix::from_fn(n, m, |i, l| kernel(&row(&x, i), &row(&inst.psi, l), inst.theta));
    let kchol = Cholesky::new(kmm.clone()).expect("naive oracle K");
    let kinv = kchol.inverse();
    let low_rank_diag: Vec<f64> = (0..n)
        .map(|i| {
            let ki = knm.row(i).transpose();
            (ki.transpose() * &kinv * &ki)[(0, 0)]
        })
        .collect();
    let omega: Vec<f64> = (0..n).map(|i| 1.0 + inst.g - low_rank_diag[i]).collect();

    // Q = K + k' Omega^{-1} k on the expanded rows
    let mut q = kmm.clone();
    for i in 0..n {
        let ki = knm.row(i).transpose();
        q += &ki * ki.transpose() / omega[i];
    }
    for l in 0..m {
        q[(l, l)] += eps_q;
    }
    let qchol = Cholesky::new(q).expect("naive oracle Q");

    let mut rhs = DVector::zeros(m);
    for i in 0..n {
        for l in 0..m {
            rhs[l] += knm[(i, l)] * y[i] / omega[i];
        }
    }
    let alpha = qchol.solve(&rhs);
    let kappa = DVector::from_fn(m, |l, _| kernel(&row(&inst.psi, l), xprime, inst.theta));
    let mu = kappa.dot(&alpha);
    let var_over_tau2 =
        1.0 + inst.g - kappa.dot(&(&kinv * &kappa)) + kappa.dot(&qchol.solve(&kappa));
    (mu, var_over_tau2)
}

/// Central finite difference of a scalar function.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, rel_step: f64) -> f64 {
    let h = rel_step * x.abs().max(1e-8);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Adaptive Simpson quadrature on an interval.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64, f64, f64) {
        let c = 0.5 * (a + b);
        let fa = f(a);
        let fb = f(b);
        let fc = f(c);
        ((b - a) / 6.0 * (fa + 4.0 * fc + fb), fa, fb, fc)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        whole: f64,
        fa: f64,
        fb: f64,
        fc: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let c = 0.5 * (a + b);
        let lm = 0.5 * (a + c);
        let rm = 0.5 * (c + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (c - a) / 6.0 * (fa + 4.0 * flm + fc);
        let right = (b - c) / 6.0 * (fc + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, c, left, fa, fc, flm, tol / 2.0, depth - 1)
                + recurse(f, c, b, right, fc, fb, frm, tol / 2.0, depth - 1)
        }
    }
    let (whole, fa, fb, fc) = simpson(f, lo, hi);
    recurse(f, lo, hi, whole, fa, fb, fc, tol, 40)
}

/// Tensor-product adaptive quadrature over a 2d box.
pub fn adaptive_simpson_2d<F: Fn(f64, f64) -> f64>(
    f: &F,
    box2: [(f64, f64); 2],
    tol: f64,
) -> f64 {
    let outer = |x: f64| {
        let inner = |y: f64| f(x, y);
        adaptive_simpson(&inner, box2[1].0, box2[1].1, tol / 10.0)
    };
    adaptive_simpson(&outer, box2[0].0, box2[0].1, tol)
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let rank = |xs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let ra = rank(a);
    let rb = rank(b);
    let ma = ra.iter().sum::<f64>() / ra.len() as f64;
    let mb = rb.iter().sum::<f64>() / rb.len() as f64;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

/// Turn an instance into the library's design + full-design neighborhood.
pub fn instance_to_design(
    inst: &Instance,
) -> (
    ligp::design::ReplicatedDesign,
    ligp::neighborhood::LocalNeighborhood,
    ligp::templates::InducingSet,
) {
    let (x, y) = inst.raw();
    let raw = ligp::design::RawDesign::new(x, y).unwrap();
    let design = ligp::design::compress(&raw, 0.0).unwrap();
    let index = ligp::neighborhood::build_index(&design);
    let centroid = DVector::from_fn(inst.dim(), |k, _| {
        (0..design.n_unique()).map(|i| design.xbar()[(i, k)]).sum::<f64>() / design.n_unique() as f64
    });
    let neigh =
        ligp::neighborhood::neighborhood(&index, &design, &centroid, design.n_unique()).unwrap();
    let psi = ligp::templates::InducingSet {
        psi: inst.psi.clone(),
        anchor: centroid,
    };
    (design, neigh, psi)
}

/// Jitter policy for oracle comparisons: the K jitter is mirrored into the
/// oracle's construction, and the Q jitter is taken near zero because it has
/// no dense-side counterpart. Well-conditioned oracle instances never need
/// the growth schedule.
pub fn oracle_policy() -> ligp::kernel::JitterPolicy {
    ligp::kernel::JitterPolicy {
        eps_k: 1e-10,
        eps_q: 1e-12,
        growth_factor: 10.0,
        max_attempts: 4,
    }
}

pub const ORACLE_EPS_K: f64 = 1e-10;
pub const ORACLE_EPS_Q: f64 = 1e-12;
