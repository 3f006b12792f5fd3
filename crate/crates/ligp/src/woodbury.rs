//! Replication-aware local likelihood, gradient, and prediction.
//!
//! The local model at a site conditions on `nbar` unique inputs carrying
//! `a_i` replicates each (`n = sum a_i` raw runs) through `m` inducing
//! points. Two applications of the Woodbury identity — one across inducing
//! points, one across replicates — reduce every determinant, inverse, and
//! quadratic form to matrices sized by `m` and `nbar` only. With
//! `Lambda = diag(a_i / omega_i)` and `Q = K_m + k' Lambda k`, the log
//! determinant of the implicit `n x n` covariance is
//!
//! ```text
//! n ln(tau2) + ln|Q| - ln|K_m| + sum_i a_i ln(omega_i)
//! ```
//!
//! and the response quadratic form needs only the per-location replicate
//! sums of squares. The scale MLE `tau2 = quad / n` concentrates out of the
//! likelihood, leaving a low-dimensional problem in `(theta, g)` with a
//! closed-form gradient.

use nalgebra::{DMatrix, DVector};

use crate::design::ReplicatedDesign;
use crate::error::{Error, Result};
use crate::kernel::{
    cross_sq_dists, kernel_from_sq, stable_factor, FactorTarget, JitterPolicy, StableFactor,
};
use crate::neighborhood::LocalNeighborhood;
use crate::optim::{minimize, OptimOptions};
use crate::templates::InducingSet;

/// Test instrumentation: a thread-local high-water mark of matrix dimensions
/// allocated by this module, used to assert that no computation ever builds
/// an n-sized matrix no matter how heavy the replication.
pub mod audit {
    use std::cell::Cell;

    thread_local! {
        static HIGH_WATER: Cell<usize> = const { Cell::new(0) };
    }

    pub fn reset() {
        HIGH_WATER.with(|h| h.set(0));
    }

    pub fn high_water() -> usize {
        HIGH_WATER.with(|h| h.get())
    }

    pub(crate) fn record(rows: usize, cols: usize) {
        HIGH_WATER.with(|h| h.set(h.get().max(rows).max(cols)));
    }
}

/// Kernel scale, lengthscale, and nugget of a local model. The observation
/// noise variance is `tau2 * g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub tau2: f64,
    pub theta: f64,
    pub g: f64,
}

/// Gamma-shaped log-penalties that stabilize hyperparameter estimation.
///
/// Each penalty has its minimum at the anchor value, with the lengthscale
/// anchored at the distance-quantile initialization and the nugget at the
/// local response residual variance. Both are toggleable and exposed in the
/// pipeline config.
#[derive(Debug, Clone, Copy)]
pub struct Priors {
    pub theta_anchor: f64,
    pub g_anchor: f64,
    pub theta_strength: f64,
    pub g_strength: f64,
    /// Gamma shape parameter; `shape - 1` controls how hard the penalty
    /// pulls toward the anchor.
    pub shape: f64,
}

impl Priors {
    pub fn penalty(&self, theta: f64, g: f64) -> f64 {
        let k1 = self.shape - 1.0;
        let pt = k1 * (-(theta / self.theta_anchor).ln() + theta / self.theta_anchor);
        let pg = k1 * (-(g / self.g_anchor).ln() + g / self.g_anchor);
        self.theta_strength * pt + self.g_strength * pg
    }

    pub fn grad(&self, theta: f64, g: f64) -> (f64, f64) {
        let k1 = self.shape - 1.0;
        let dt = self.theta_strength * k1 * (1.0 / self.theta_anchor - 1.0 / theta);
        let dg = self.g_strength * k1 * (1.0 / self.g_anchor - 1.0 / g);
        (dt, dg)
    }
}

/// All cached decompositions for one neighborhood, inducing set, and
/// hyperparameter pair. Immutable after construction.
pub struct LocalSystem {
    xbar: DMatrix<f64>,
    a: DVector<f64>,
    ybar: DVector<f64>,
    sq_sums: DVector<f64>,
    n: f64,
    psi: DMatrix<f64>,
    theta: f64,
    g: f64,
    chol_k: StableFactor,
    knm: DMatrix<f64>,
    omega: DVector<f64>,
    lambda: DVector<f64>,
    chol_q: StableFactor,
    /// k' Lambda ybar
    b: DVector<f64>,
    /// Q^{-1} b
    alpha: DVector<f64>,
    /// sum_i S_i / omega_i, the replicate-weighted response energy
    energy: f64,
}

impl LocalSystem {
    pub fn nbar(&self) -> usize {
        self.xbar.nrows()
    }

    pub fn m(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_total(&self) -> f64 {
        self.n
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn omega(&self) -> &DVector<f64> {
        &self.omega
    }

    pub fn knm(&self) -> &DMatrix<f64> {
        &self.knm
    }

    /// `Q^{-1} k' Lambda ybar`, the weight vector behind the predictive mean.
    pub fn qinv_b(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter_k(&self) -> f64 {
        self.chol_k.jitter
    }

    pub fn jitter_q(&self) -> f64 {
        self.chol_q.jitter
    }

    pub fn ybar(&self) -> &DVector<f64> {
        &self.ybar
    }

    pub fn sq_sums(&self) -> &DVector<f64> {
        &self.sq_sums
    }

    pub fn multiplicities(&self) -> &DVector<f64> {
        &self.a
    }
}

/// Fitted hyperparameters with optimizer diagnostics.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub params: Hyperparams,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Final concentrated negative log-likelihood (including any priors).
    pub nll: f64,
}

/// Whether a hyperparameter is optimized or held at a given value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamMode {
    Estimated,
    Fixed(f64),
}

/// Controls for [`fit_hyperparams`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub theta_mode: ParamMode,
    pub g_mode: ParamMode,
    /// Lengthscale box is `[theta0 / factor, theta0 * factor]`.
    pub theta_bounds_factor: f64,
    pub g_bounds: (f64, f64),
    /// Nugget initialization as a fraction of the local residual variance of
    /// the averaged responses. A guess the data quickly overrides; kept in
    /// config so it is visible.
    pub g_init_fraction: f64,
    pub use_priors: bool,
    pub theta_prior_strength: f64,
    pub g_prior_strength: f64,
    pub optim: OptimOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            theta_mode: ParamMode::Estimated,
            g_mode: ParamMode::Estimated,
            theta_bounds_factor: 100.0,
            g_bounds: (1e-8, 10.0),
            g_init_fraction: 0.1,
            use_priors: true,
            theta_prior_strength: 1.0,
            g_prior_strength: 1.0,
            optim: OptimOptions {
                grad_tol: 1e-4,
                f_tol: 1e-9,
                max_iters: 60,
                memory: 8,
            },
        }
    }
}

fn gather_neighborhood(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>, f64)> {
    if neigh.indices.is_empty() {
        return Err(Error::invalid("neighborhood is empty"));
    }
    let nbar = neigh.indices.len();
    let d = design.dim();
    audit::record(nbar, d);
    let xbar = DMatrix::from_fn(nbar, d, |i, j| design.xbar()[(neigh.indices[i], j)]);
    let a = DVector::from_fn(nbar, |i, _| design.multiplicities()[neigh.indices[i]] as f64);
    let ybar = DVector::from_fn(nbar, |i, _| design.ybar()[neigh.indices[i]]);
    let s = DVector::from_fn(nbar, |i, _| design.sq_sums()[neigh.indices[i]]);
    let n = a.sum();
    Ok((xbar, a, ybar, s, n))
}

/// Pieces of the likelihood that depend on `theta` only; cached across
/// nugget-only optimizer steps, where they dominate the cost.
struct ThetaParts {
    theta: f64,
    kmat: DMatrix<f64>,
    chol_k: StableFactor,
    knm: DMatrix<f64>,
    /// `K^{-1} k'` (m x nbar)
    w: DMatrix<f64>,
    /// Nystrom diagonal `d_i = k_i K^{-1} k_i'`
    nystrom: DVector<f64>,
}

/// Reusable evaluation context for one `(neighborhood, inducing set)` pair:
/// distance matrices never change across hyperparameter iterations, and the
/// kernel-dependent parts are rebuilt only when `theta` moves.
pub(crate) struct FitContext {
    a: DVector<f64>,
    ybar: DVector<f64>,
    sq_sums: DVector<f64>,
    n: f64,
    dist_nm: DMatrix<f64>,
    dist_mm: DMatrix<f64>,
    policy: JitterPolicy,
    parts: Option<ThetaParts>,
}

pub(crate) struct NllEval {
    pub nll: f64,
    pub grad: Option<(f64, f64)>,
}

struct QuadParts {
    omega: DVector<f64>,
    lambda: DVector<f64>,
    chol_q: StableFactor,
    b: DVector<f64>,
    alpha: DVector<f64>,
    energy: f64,
    quad: f64,
}

impl FitContext {
    pub(crate) fn new(
        design: &ReplicatedDesign,
        neigh: &LocalNeighborhood,
        psi: &InducingSet,
        policy: &JitterPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        let (xbar, a, ybar, s, n) = gather_neighborhood(design, neigh)?;
        if psi.psi.ncols() != xbar.ncols() {
            return Err(Error::invalid(format!(
                "inducing points have dimension {}, design has {}",
                psi.psi.ncols(),
                xbar.ncols()
            )));
        }
        let m = psi.psi.nrows();
        let nbar = xbar.nrows();
        if m > nbar {
            log::warn!("inducing set larger than neighborhood (m = {m} > nbar = {nbar})");
        }
        audit::record(nbar, m);
        let dist_nm = cross_sq_dists(&xbar, &psi.psi);
        audit::record(m, m);
        let dist_mm = cross_sq_dists(&psi.psi, &psi.psi);
        Ok(FitContext {
            a,
            ybar,
            sq_sums: s,
            n,
            dist_nm,
            dist_mm,
            policy: *policy,
            parts: None,
        })
    }

    fn theta_parts(&mut self, theta: f64) -> Result<&ThetaParts> {
        let stale = match &self.parts {
            Some(p) => p.theta != theta,
            None => true,
        };
        if stale {
            let m = self.dist_mm.nrows();
            let nbar = self.dist_nm.nrows();
            audit::record(m, m);
            let mut kmat = self.dist_mm.clone();
            kmat.apply(|v| *v = kernel_from_sq(*v, theta));
            let chol_k = stable_factor(&kmat, &self.policy, FactorTarget::K)?;
            audit::record(nbar, m);
            let mut knm = self.dist_nm.clone();
            knm.apply(|v| *v = kernel_from_sq(*v, theta));
            let w = chol_k.solve_mat(&knm.transpose());
            let nystrom = DVector::from_fn(nbar, |i, _| {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += knm[(i, l)] * w[(l, i)];
                }
                acc
            });
            self.parts = Some(ThetaParts {
                theta,
                kmat,
                chol_k,
                knm,
                w,
                nystrom,
            });
        }
        Ok(self.parts.as_ref().unwrap())
    }

    /// Everything downstream of omega for fixed `(theta, g)`.
    fn quad_parts(&self, g: f64) -> Result<QuadParts> {
        let parts = self.parts.as_ref().expect("theta parts built");
        let nbar = self.dist_nm.nrows();
        let m = self.dist_mm.nrows();
        let mut omega = DVector::zeros(nbar);
        for i in 0..nbar {
            omega[i] = 1.0 + g - parts.nystrom[i];
            if omega[i] <= 0.0 {
                return Err(Error::numerical(format!(
                    "omega[{i}] = {} not positive after jitter",
                    omega[i]
                )));
            }
        }
        let lambda = DVector::from_fn(nbar, |i, _| self.a[i] / omega[i]);

        audit::record(nbar, m);
        let mut scaled = parts.knm.clone();
        for i in 0..nbar {
            for l in 0..m {
                scaled[(i, l)] *= lambda[i];
            }
        }
        audit::record(m, m);
        let mut q = parts.knm.transpose() * &scaled;
        q += &parts.kmat;
        for l in 0..m {
            q[(l, l)] += parts.chol_k.jitter;
        }
        let chol_q = stable_factor(&q, &self.policy, FactorTarget::Q)?;

        let b = parts.knm.transpose() * DVector::from_fn(nbar, |i, _| lambda[i] * self.ybar[i]);
        let alpha = chol_q.solve_vec(&b);
        let energy: f64 = (0..nbar).map(|i| self.sq_sums[i] / omega[i]).sum();
        let quad = energy - b.dot(&alpha);
        Ok(QuadParts {
            omega,
            lambda,
            chol_q,
            b,
            alpha,
            energy,
            quad,
        })
    }

    /// Concentrated negative log-likelihood and, on request, its analytic
    /// gradient with respect to `theta` and `g`.
    pub(crate) fn eval(
        &mut self,
        theta: f64,
        g: f64,
        want_grad: bool,
        priors: Option<&Priors>,
    ) -> Result<NllEval> {
        if !(theta > 0.0) || !(g >= 0.0) {
            return Err(Error::invalid("theta must be positive and g nonnegative"));
        }
        self.theta_parts(theta)?;
        let qp = self.quad_parts(g)?;
        if qp.quad <= 0.0 {
            return Err(Error::numerical(format!(
                "response quadratic form {} not positive",
                qp.quad
            )));
        }
        let parts = self.parts.as_ref().unwrap();
        let nbar = self.dist_nm.nrows();
        let m = self.dist_mm.nrows();
        let n = self.n;

        let logdet_k = parts.chol_k.log_det();
        let logdet_q = qp.chol_q.log_det();
        let mut nll = n * qp.quad.ln() + logdet_q - logdet_k
            + (0..nbar).map(|i| self.a[i] * qp.omega[i].ln()).sum::<f64>();
        if let Some(p) = priors {
            nll += p.penalty(theta, g);
        }

        if !want_grad {
            return Ok(NllEval { nll, grad: None });
        }

        let qinv = qp.chol_q.chol.inverse();
        let kinv = parts.chol_k.chol.inverse();

        // theta-derivatives of the kernel blocks; the unit diagonal of K is
        // constant so the elementwise form needs no special-casing
        let theta2 = theta * theta;
        audit::record(m, m);
        let mut kdot = parts.kmat.clone();
        for i in 0..m {
            for j in 0..m {
                kdot[(i, j)] *= self.dist_mm[(i, j)] / theta2;
            }
        }
        audit::record(nbar, m);
        let mut knmdot = parts.knm.clone();
        for i in 0..nbar {
            for l in 0..m {
                knmdot[(i, l)] *= self.dist_nm[(i, l)] / theta2;
            }
        }

        // d/dtheta of the Nystrom diagonal: 2 kdot_i . w_i - w_i . (Kdot w)_i
        let kdot_w = &kdot * &parts.w;
        let mut nystrom_dot = DVector::zeros(nbar);
        for i in 0..nbar {
            let mut acc = 0.0;
            for l in 0..m {
                acc += 2.0 * knmdot[(i, l)] * parts.w[(l, i)] - parts.w[(l, i)] * kdot_w[(l, i)];
            }
            nystrom_dot[i] = acc;
        }

        let lam_y = DVector::from_fn(nbar, |i, _| qp.lambda[i] * self.ybar[i]);
        let mut grad_out = [0.0f64; 2];
        for (slot, is_theta) in [(0usize, true), (1usize, false)] {
            let omega_dot: DVector<f64> = if is_theta {
                -nystrom_dot.clone()
            } else {
                DVector::from_element(nbar, 1.0)
            };
            let lambda_dot = DVector::from_fn(nbar, |i, _| {
                -self.a[i] * omega_dot[i] / (qp.omega[i] * qp.omega[i])
            });

            // dQ = dK + dk' L k + (dk' L k)' + k' dL k
            let mut qdot = DMatrix::zeros(m, m);
            if is_theta {
                qdot += &kdot;
                let mut scaled_dot = knmdot.clone();
                for i in 0..nbar {
                    for l in 0..m {
                        scaled_dot[(i, l)] *= qp.lambda[i];
                    }
                }
                let cross = parts.knm.transpose() * &scaled_dot;
                qdot += cross.transpose() + cross;
            }
            {
                let mut scaled_l = parts.knm.clone();
                for i in 0..nbar {
                    for l in 0..m {
                        scaled_l[(i, l)] *= lambda_dot[i];
                    }
                }
                qdot += parts.knm.transpose() * &scaled_l;
            }

            let energy_dot: f64 = (0..nbar)
                .map(|i| -self.sq_sums[i] * omega_dot[i] / (qp.omega[i] * qp.omega[i]))
                .sum();
            let mut bdot =
                parts.knm.transpose() * DVector::from_fn(nbar, |i, _| lambda_dot[i] * self.ybar[i]);
            if is_theta {
                bdot += knmdot.transpose() * &lam_y;
            }
            let quad_dot = energy_dot - 2.0 * bdot.dot(&qp.alpha) + (&qdot * &qp.alpha).dot(&qp.alpha);

            let tr_q = qinv.zip_fold(&qdot, 0.0, |acc, x, y| acc + x * y);
            let tr_k = if is_theta {
                kinv.zip_fold(&kdot, 0.0, |acc, x, y| acc + x * y)
            } else {
                0.0
            };
            let omega_term: f64 = (0..nbar)
                .map(|i| self.a[i] * omega_dot[i] / qp.omega[i])
                .sum();

            grad_out[slot] = n * quad_dot / qp.quad + tr_q - tr_k + omega_term;
        }
        if let Some(p) = priors {
            let (dt, dg) = p.grad(theta, g);
            grad_out[0] += dt;
            grad_out[1] += dg;
        }

        Ok(NllEval {
            nll,
            grad: Some((grad_out[0], grad_out[1])),
        })
    }

    fn tau2(&mut self, theta: f64, g: f64) -> Result<f64> {
        self.theta_parts(theta)?;
        let qp = self.quad_parts(g)?;
        if qp.quad <= 0.0 {
            return Err(Error::numerical(
                "quadratic form not positive; cannot estimate tau2".to_string(),
            ));
        }
        Ok(qp.quad / self.n)
    }
}

/// Assemble the cached local system at fixed hyperparameters.
///
/// All matrices are sized by `m` and `nbar` only; the raw run count enters
/// through the multiplicities and sufficient statistics.
pub fn build_system(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    psi: &InducingSet,
    theta: f64,
    g: f64,
    policy: &JitterPolicy,
) -> Result<LocalSystem> {
    if !(theta > 0.0) || !(g >= 0.0) {
        return Err(Error::invalid("theta must be positive and g nonnegative"));
    }
    let mut ctx = FitContext::new(design, neigh, psi, policy)?;
    ctx.theta_parts(theta)?;
    let qp = ctx.quad_parts(g)?;
    let (xbar, a, ybar, s, n) = gather_neighborhood(design, neigh)?;
    let parts = ctx.parts.take().unwrap();

    Ok(LocalSystem {
        xbar,
        a,
        ybar,
        sq_sums: s,
        n,
        psi: psi.psi.clone(),
        theta,
        g,
        chol_k: parts.chol_k,
        knm: parts.knm,
        omega: qp.omega,
        lambda: qp.lambda,
        chol_q: qp.chol_q,
        b: qp.b,
        alpha: qp.alpha,
        energy: qp.energy,
    })
}

/// Log-determinant of the implicit `n x n` covariance at scale `tau2`.
pub fn log_det_sigma(sys: &LocalSystem, tau2: f64) -> f64 {
    let omega_term: f64 = (0..sys.nbar())
        .map(|i| sys.a[i] * sys.omega[i].ln())
        .sum();
    sys.n * tau2.ln() + sys.chol_q.log_det() - sys.chol_k.log_det() + omega_term
}

/// The response quadratic form `Y' Omega^{-1} Y - ybar' L k Q^{-1} k' L ybar`,
/// computed entirely from sufficient statistics.
pub fn quad_form(sys: &LocalSystem) -> f64 {
    sys.energy - sys.b.dot(&sys.alpha)
}

/// Closed-form scale MLE `quad / n`.
pub fn tau2_mle(sys: &LocalSystem) -> Result<f64> {
    let quad = quad_form(sys);
    if quad <= 0.0 {
        return Err(Error::numerical(format!(
            "quadratic form {quad} not positive; cannot estimate tau2"
        )));
    }
    Ok(quad / sys.n)
}

/// The three pieces of the pre-averaged scale decomposition.
#[derive(Debug, Clone, Copy)]
pub struct Tau2Decomposition {
    /// Full-replicate MLE, identical to [`tau2_mle`] up to rounding.
    pub tau2_hat: f64,
    /// Naive estimate from averaged responses only.
    pub tau2_bar: f64,
    /// What replication adds beyond the averages:
    /// `n * tau2_hat = nbar * tau2_bar + correction`.
    pub correction: f64,
}

/// Rewrite the scale MLE through the averaged-response covariance, exposing
/// how much variance pre-averaging alone would miss.
///
/// The computation routes through the variant covariance whose whole
/// diagonal is reweighted by `1/a_i`, which stays well defined when some
/// locations carry a single replicate; the textbook split through
/// `(A^{-1} - I)^{-1}` is singular there but agrees with this route on rows
/// with `a_i >= 2`.
pub fn tau2_decomposition(sys: &LocalSystem) -> Result<Tau2Decomposition> {
    let nbar = sys.nbar();
    audit::record(nbar, nbar);
    // dense Nystrom block k K^{-1} k'
    let w = sys.chol_k.solve_mat(&sys.knm.transpose());
    let m0 = &sys.knm * &w;

    let build_and_solve = |diag: &DVector<f64>| -> Result<f64> {
        let mut mat = m0.clone();
        for i in 0..nbar {
            mat[(i, i)] += diag[i];
        }
        let chol = nalgebra::Cholesky::new(mat)
            .ok_or_else(|| Error::numerical("averaged covariance not positive definite"))?;
        Ok(sys.ybar.dot(&chol.solve(&sys.ybar)))
    };

    // Sigma-bar: diagonal correction in full, nugget shrunk by replication
    let diag_bar = DVector::from_fn(nbar, |i, _| (1.0 - m0[(i, i)]).max(0.0) + sys.g / sys.a[i]);
    // Sigma-grave: the whole diagonal reweighted by 1/a_i
    let diag_grave = DVector::from_fn(nbar, |i, _| sys.omega[i] / sys.a[i]);

    let ybar_quad_bar = build_and_solve(&diag_bar)?;
    let ybar_quad_grave = build_and_solve(&diag_grave)?;

    let lambda_quad: f64 = (0..nbar)
        .map(|i| sys.lambda[i] * sys.ybar[i] * sys.ybar[i])
        .sum();
    let tau2_hat = (sys.energy - lambda_quad + ybar_quad_grave) / sys.n;
    let tau2_bar = ybar_quad_bar / nbar as f64;
    let correction = sys.n * tau2_hat - nbar as f64 * tau2_bar;
    Ok(Tau2Decomposition {
        tau2_hat,
        tau2_bar,
        correction,
    })
}

/// Concentrated negative log-likelihood at `(theta, g)`, with optional prior
/// penalty.
pub fn concentrated_nll(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    psi: &InducingSet,
    theta: f64,
    g: f64,
    policy: &JitterPolicy,
    priors: Option<&Priors>,
) -> Result<f64> {
    let mut ctx = FitContext::new(design, neigh, psi, policy)?;
    Ok(ctx.eval(theta, g, false, priors)?.nll)
}

/// Analytic gradient of [`concentrated_nll`] with respect to `(theta, g)`.
pub fn concentrated_nll_grad(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    psi: &InducingSet,
    theta: f64,
    g: f64,
    policy: &JitterPolicy,
    priors: Option<&Priors>,
) -> Result<(f64, f64)> {
    let mut ctx = FitContext::new(design, neigh, psi, policy)?;
    Ok(ctx.eval(theta, g, true, priors)?.grad.unwrap())
}

/// Local residual variance of the averaged responses about their mean; the
/// anchor for nugget initialization and its prior.
fn ybar_residual_variance(design: &ReplicatedDesign, neigh: &LocalNeighborhood) -> f64 {
    let vals: Vec<f64> = neigh.indices.iter().map(|&i| design.ybar()[i]).collect();
    crate::stats::variance(&vals)
}

/// Maximize the concentrated likelihood over the configured parameters by
/// bounded quasi-Newton with the analytic gradient, starting from
/// `(theta0, g0)`. Deterministic given the data and the initialization.
///
/// When `init.1` is `None` the nugget starts at `g_init_fraction` of the
/// neighborhood's averaged-response residual variance, clamped into bounds.
pub fn fit_hyperparams(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    psi: &InducingSet,
    init: (f64, Option<f64>),
    cfg: &FitConfig,
    policy: &JitterPolicy,
) -> Result<LocalFit> {
    let (theta0, g0_opt) = init;
    if !(theta0 > 0.0) {
        return Err(Error::invalid("theta initialization must be positive"));
    }
    let (g_lo, g_hi) = cfg.g_bounds;
    if !(g_lo > 0.0 && g_hi > g_lo) {
        return Err(Error::invalid("nugget bounds must be ordered and positive"));
    }

    let g0 = g0_opt
        .unwrap_or_else(|| cfg.g_init_fraction * ybar_residual_variance(design, neigh))
        .clamp(g_lo, g_hi);

    let priors = if cfg.use_priors {
        Some(Priors {
            theta_anchor: theta0,
            g_anchor: ybar_residual_variance(design, neigh).clamp(1e-4, 1.0),
            theta_strength: cfg.theta_prior_strength,
            g_strength: cfg.g_prior_strength,
            shape: 1.5,
        })
    } else {
        None
    };

    let mut ctx = FitContext::new(design, neigh, psi, policy)?;

    let theta_est = matches!(cfg.theta_mode, ParamMode::Estimated);
    let g_est = matches!(cfg.g_mode, ParamMode::Estimated);
    let theta_fixed = match cfg.theta_mode {
        ParamMode::Fixed(v) => v,
        ParamMode::Estimated => theta0,
    };
    let g_fixed = match cfg.g_mode {
        ParamMode::Fixed(v) => v.max(0.0),
        ParamMode::Estimated => g0,
    };

    if !theta_est && !g_est {
        let eval = ctx.eval(theta_fixed, g_fixed, false, priors.as_ref())?;
        let tau2 = ctx.tau2(theta_fixed, g_fixed)?;
        return Ok(LocalFit {
            params: Hyperparams {
                tau2,
                theta: theta_fixed,
                g: g_fixed,
            },
            iterations: 0,
            evaluations: 1,
            converged: true,
            nll: eval.nll,
        });
    }

    // optimize in log space over the estimated parameters
    let mut x0 = Vec::new();
    let mut bounds = Vec::new();
    if theta_est {
        x0.push(theta0.ln());
        bounds.push((
            (theta0 / cfg.theta_bounds_factor).ln(),
            (theta0 * cfg.theta_bounds_factor).ln(),
        ));
    }
    if g_est {
        x0.push(g0.ln());
        bounds.push((g_lo.ln(), g_hi.ln()));
    }

    let priors_ref = priors.as_ref();
    let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut idx = 0;
        let theta = if theta_est {
            idx += 1;
            z[idx - 1].exp()
        } else {
            theta_fixed
        };
        let g = if g_est { z[idx].exp() } else { g_fixed };
        let eval = ctx.eval(theta, g, true, priors_ref).ok()?;
        let (dt, dg) = eval.grad.unwrap();
        let mut grad = Vec::with_capacity(z.len());
        if theta_est {
            grad.push(dt * theta);
        }
        if g_est {
            grad.push(dg * g);
        }
        Some((eval.nll, grad))
    };

    let result = minimize(objective, &x0, &bounds, &cfg.optim).ok_or_else(|| {
        Error::Fit("likelihood not evaluable at the hyperparameter initialization".into())
    })?;

    let mut idx = 0;
    let theta = if theta_est {
        idx += 1;
        result.x[idx - 1].exp()
    } else {
        theta_fixed
    };
    let g = if g_est { result.x[idx].exp() } else { g_fixed };

    let tau2 = ctx.tau2(theta, g)?;
    Ok(LocalFit {
        params: Hyperparams { tau2, theta, g },
        iterations: result.iterations,
        evaluations: result.evaluations,
        converged: result.converged,
        nll: result.f,
    })
}

/// Predictive mean and variance at `xprime` from a fitted system.
///
/// The variance is strictly positive by construction: `Q` dominates the
/// inducing matrix, so the subtracted term never exceeds the prior variance.
pub fn predict(fit: &LocalFit, sys: &LocalSystem, xprime: &DVector<f64>) -> Result<(f64, f64)> {
    if fit.params.theta != sys.theta || fit.params.g != sys.g {
        return Err(Error::invalid(
            "fit and system were built at different hyperparameters",
        ));
    }
    if xprime.len() != sys.xbar.ncols() {
        return Err(Error::invalid("prediction site has wrong dimension"));
    }
    let m = sys.m();
    let kappa = DVector::from_fn(m, |l, _| {
        let mut acc = 0.0;
        for k in 0..sys.psi.ncols() {
            let d = sys.psi[(l, k)] - xprime[k];
            acc += d * d;
        }
        kernel_from_sq(acc, sys.theta)
    });
    let mu = kappa.dot(&sys.alpha);
    let u = sys.chol_k.solve_vec(&kappa);
    let v = sys.chol_q.solve_vec(&kappa);
    let sigma2 = fit.params.tau2 * (1.0 + sys.g - kappa.dot(&u) + kappa.dot(&v));
    if !(sigma2 > 0.0) {
        return Err(Error::numerical(format!(
            "predictive variance {sigma2} not positive"
        )));
    }
    Ok((mu, sigma2))
}
