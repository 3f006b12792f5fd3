//! Local inducing-point construction: greedy weighted-IMSE designs, the
//! qNorm space-filling template, and template transport.
//!
//! A weighted integrated mean-squared error criterion scores a candidate
//! inducing point by the Gaussian-weighted integral of the resulting
//! predictive variance over a hyperrectangle centered interest at the
//! prediction site. For the Gaussian kernel the integral has a closed form:
//! an erf product for the weight mass minus a trace against a matrix of
//! kernel triple-product integrals. Inducing-point designs depend only on
//! the geometry of the unique neighborhood inputs, never on replicate
//! counts or responses, so one template built at the design center can be
//! translated to every prediction site.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::ContinuousCDF;
use statrs::function::erf::erf;

use crate::design::ReplicatedDesign;
use crate::error::{Error, Result};
use crate::kernel::{stable_factor, FactorTarget, JitterPolicy};
use crate::lhs::latin_hypercube_unit;
use crate::neighborhood::LocalNeighborhood;
use crate::optim::{minimize, OptimOptions};
use crate::rng::stream;

/// Inducing-point coordinates together with the site they were built for.
/// Rows of `psi` are points; they are not required to lie in the design.
#[derive(Debug, Clone)]
pub struct InducingSet {
    pub psi: DMatrix<f64>,
    pub anchor: DVector<f64>,
}

impl InducingSet {
    pub fn m(&self) -> usize {
        self.psi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }
}

/// How the inner candidate optimization obtains gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Central finite differences on the criterion (default).
    FiniteDifference,
    /// Closed-form gradient of the erf/trace expression.
    Analytic,
}

/// Controls for greedy wIMSE construction.
#[derive(Debug, Clone)]
pub struct WimseConfig {
    /// Integration and search hyperrectangle, one `(lo, hi)` per dimension.
    pub bounds: Vec<(f64, f64)>,
    pub multistarts: usize,
    /// Convergence tolerance of the inner bounded optimizer.
    pub tol: f64,
    pub gradient: GradientMode,
    pub seed: u64,
    pub jitter: JitterPolicy,
}

impl WimseConfig {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(Error::invalid("wIMSE bounds must satisfy lo < hi"));
        }
        Ok(WimseConfig {
            bounds,
            multistarts: 20,
            tol: 0.01,
            gradient: GradientMode::FiniteDifference,
            seed: 0,
            jitter: JitterPolicy::default(),
        })
    }

    /// Bounds from the bounding box of the neighborhood's unique inputs,
    /// inflated marginally where the box would be degenerate.
    pub fn from_neighborhood(design: &ReplicatedDesign, neigh: &LocalNeighborhood) -> Result<Self> {
        WimseConfig::new(neighborhood_box(design, neigh))
    }
}

/// Axis-aligned bounding box of the neighborhood's unique inputs.
pub fn neighborhood_box(design: &ReplicatedDesign, neigh: &LocalNeighborhood) -> Vec<(f64, f64)> {
    let d = design.dim();
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for &i in &neigh.indices {
        for k in 0..d {
            let v = design.xbar()[(i, k)];
            bounds[k].0 = bounds[k].0.min(v);
            bounds[k].1 = bounds[k].1.max(v);
        }
    }
    for b in &mut bounds {
        if b.0 >= b.1 {
            b.0 -= 0.5;
            b.1 += 0.5;
        }
    }
    bounds
}

/// Gaussian-weight mass over the box: the erf-product leading term of the
/// criterion, `prod_k (sqrt(theta pi)/2) [erf((x'_k - lo_k)/sqrt(theta)) -
/// erf((x'_k - hi_k)/sqrt(theta))]`.
pub fn weight_mass(xprime: &DVector<f64>, theta: f64, bounds: &[(f64, f64)]) -> f64 {
    let sqrt_theta = theta.sqrt();
    let half = 0.5 * (theta * std::f64::consts::PI).sqrt();
    bounds
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| {
            half * (erf((xprime[k] - lo) / sqrt_theta) - erf((xprime[k] - hi) / sqrt_theta))
        })
        .product()
}

/// One-dimensional kernel triple-product integral over `[lo, hi]`:
/// `int k(x, p) k(x, q) k(x, c) dx` for the Gaussian kernel, and its partial
/// derivative with respect to `q` when requested.
fn triple_product_1d(
    p: f64,
    q: f64,
    c: f64,
    theta: f64,
    lo: f64,
    hi: f64,
    want_dq: bool,
) -> (f64, f64) {
    let mu = (p + q + c) / 3.0;
    let s = (3.0 / theta).sqrt();
    let spread = (p - q) * (p - q) + (p - c) * (p - c) + (q - c) * (q - c);
    let gauss = (-spread / (3.0 * theta)).exp();
    let b_term = erf(s * (hi - mu)) - erf(s * (lo - mu));
    let front = 0.5 * (theta * std::f64::consts::PI / 3.0).sqrt();
    let w = front * gauss * b_term;
    if !want_dq {
        return (w, 0.0);
    }
    let dgauss = gauss * (-(2.0 * (q - p) + 2.0 * (q - c)) / (3.0 * theta));
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    let db = -(s / 3.0)
        * two_over_sqrt_pi
        * ((-(s * (hi - mu)).powi(2)).exp() - (-(s * (lo - mu)).powi(2)).exp());
    (w, front * (dgauss * b_term + gauss * db))
}

/// Shared pieces for a wIMSE evaluation at one candidate.
struct WimseSystem {
    /// augmented inducing set (m+1 rows)
    aug: DMatrix<f64>,
    knm: DMatrix<f64>,
    /// K^{-1} k' (m1 x nbar)
    w: DMatrix<f64>,
    kinv: DMatrix<f64>,
    qinv: DMatrix<f64>,
    omega: DVector<f64>,
    /// difference of inverses K^{-1} - Q^{-1}
    p: DMatrix<f64>,
    /// triple-product matrix, entry (i, j) = prod_k w_k(psi_i, psi_j)
    wprime: DMatrix<f64>,
    /// per-dimension 1d factors, kept for gradient assembly
    factors: Vec<DMatrix<f64>>,
}

fn build_wimse_system(
    xbar: &DMatrix<f64>,
    psi_current: &DMatrix<f64>,
    candidate: &[f64],
    xprime: &DVector<f64>,
    theta: f64,
    bounds: &[(f64, f64)],
    jitter: &JitterPolicy,
    want_factors: bool,
) -> Result<WimseSystem> {
    let m = psi_current.nrows();
    let m1 = m + 1;
    let d = psi_current.ncols();
    let nbar = xbar.nrows();

    let mut aug = DMatrix::zeros(m1, d);
    for i in 0..m {
        for k in 0..d {
            aug[(i, k)] = psi_current[(i, k)];
        }
    }
    for k in 0..d {
        aug[(m, k)] = candidate[k];
    }

    let kmat = crate::kernel::cross_matrix(&aug, &aug, crate::kernel::Lengthscale::new(theta)?)?;
    let chol_k = stable_factor(&kmat, jitter, FactorTarget::K)?;
    let knm = crate::kernel::cross_matrix(xbar, &aug, crate::kernel::Lengthscale::new(theta)?)?;
    let w = chol_k.solve_mat(&knm.transpose());

    // unit multiplicities: the inducing design depends on neighborhood
    // geometry only, which keeps it invariant to replicate counts
    let mut omega = DVector::zeros(nbar);
    for i in 0..nbar {
        let mut nystrom = 0.0;
        for l in 0..m1 {
            nystrom += knm[(i, l)] * w[(l, i)];
        }
        omega[i] = 1.0 - nystrom;
        if omega[i] <= 0.0 {
            return Err(Error::numerical(format!(
                "wIMSE omega[{i}] = {} not positive",
                omega[i]
            )));
        }
    }

    let mut scaled = knm.clone();
    for i in 0..nbar {
        for l in 0..m1 {
            scaled[(i, l)] /= omega[i];
        }
    }
    let mut q = knm.transpose() * &scaled;
    q += &kmat;
    for l in 0..m1 {
        q[(l, l)] += chol_k.jitter;
    }
    let chol_q = stable_factor(&q, jitter, FactorTarget::Q)?;

    let kinv = chol_k.chol.inverse();
    let qinv = chol_q.chol.inverse();
    let p = &kinv - &qinv;

    // triple-product matrix as a Hadamard product of per-dimension factors
    let mut factors = Vec::with_capacity(d);
    let mut wprime = DMatrix::from_element(m1, m1, 1.0);
    for k in 0..d {
        let mut fk = DMatrix::zeros(m1, m1);
        for i in 0..m1 {
            for j in i..m1 {
                let (w1, _) = triple_product_1d(
                    aug[(i, k)],
                    aug[(j, k)],
                    xprime[k],
                    theta,
                    bounds[k].0,
                    bounds[k].1,
                    false,
                );
                fk[(i, j)] = w1;
                fk[(j, i)] = w1;
            }
        }
        for i in 0..m1 {
            for j in 0..m1 {
                wprime[(i, j)] *= fk[(i, j)];
            }
        }
        if want_factors {
            factors.push(fk);
        }
    }

    Ok(WimseSystem {
        aug,
        knm,
        w,
        kinv,
        qinv,
        omega,
        p,
        wprime,
        factors,
    })
}

/// Weighted integrated mean-squared error of augmenting `psi_current` with
/// `candidate`, for a prediction site weight centered at the neighborhood's
/// site. Lower is better.
///
/// Computes the closed form of the Gaussian-weighted integrated variance:
/// the erf-product weight mass minus `tr((K^{-1} - Q^{-1}) W')` where `W'`
/// holds kernel triple-product integrals over the box.
pub fn wimse_criterion(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    psi_current: &InducingSet,
    candidate: &[f64],
    theta: f64,
    cfg: &WimseConfig,
) -> Result<f64> {
    let d = design.dim();
    if candidate.len() != d {
        return Err(Error::invalid("candidate has wrong dimension"));
    }
    if cfg.bounds.len() != d {
        return Err(Error::invalid("bounds dimension mismatch"));
    }
    for (k, &(lo, hi)) in cfg.bounds.iter().enumerate() {
        if candidate[k] < lo || candidate[k] > hi {
            return Err(Error::invalid(format!(
                "candidate coordinate {k} = {} outside [{lo}, {hi}]",
                candidate[k]
            )));
        }
    }
    let nbar = neigh.indices.len();
    let xbar = DMatrix::from_fn(nbar, d, |i, j| design.xbar()[(neigh.indices[i], j)]);
    let sys = build_wimse_system(
        &xbar,
        &psi_current.psi,
        candidate,
        &neigh.xprime,
        theta,
        &cfg.bounds,
        &cfg.jitter,
        false,
    )?;
    let mass = weight_mass(&neigh.xprime, theta, &cfg.bounds);
    let trace = sys.p.zip_fold(&sys.wprime, 0.0, |acc, a, b| acc + a * b);
    Ok(mass - trace)
}

/// Closed-form gradient of [`wimse_criterion`] with respect to the candidate
/// coordinates.
pub fn wimse_gradient(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    psi_current: &InducingSet,
    candidate: &[f64],
    theta: f64,
    cfg: &WimseConfig,
) -> Result<Vec<f64>> {
    let d = design.dim();
    let nbar = neigh.indices.len();
    let xbar = DMatrix::from_fn(nbar, d, |i, j| design.xbar()[(neigh.indices[i], j)]);
    let sys = build_wimse_system(
        &xbar,
        &psi_current.psi,
        candidate,
        &neigh.xprime,
        theta,
        &cfg.bounds,
        &cfg.jitter,
        true,
    )?;
    let m1 = sys.aug.nrows();
    let last = m1 - 1;

    // precompute matrices contracted against dK and dQ
    let kwk = &sys.kinv * &sys.wprime * &sys.kinv;
    let qwq = &sys.qinv * &sys.wprime * &sys.qinv;

    let mut grad = vec![0.0; d];
    for l in 0..d {
        // dK: only the last row/column varies
        let mut dk_last = DVector::zeros(m1);
        for i in 0..last {
            let kval = crate::kernel::kernel_from_sq(
                crate::kernel::sq_dist(
                    sys.aug.row(i).transpose().as_slice(),
                    sys.aug.row(last).transpose().as_slice(),
                ),
                theta,
            );
            dk_last[i] = kval * 2.0 * (sys.aug[(i, l)] - candidate[l]) / theta;
        }

        // dk (n x m1): only the last column varies
        let mut dknm_last = DVector::zeros(nbar);
        for j in 0..nbar {
            dknm_last[j] = sys.knm[(j, last)] * 2.0 * (xbar[(j, l)] - candidate[l]) / theta;
        }

        // d omega_j = -(2 dknm[j] W[last, j] - 2 W[last, j] sum_i dk_last[i] W[i, j])
        let mut domega = DVector::zeros(nbar);
        for j in 0..nbar {
            let mut kdk = 0.0;
            for i in 0..last {
                kdk += dk_last[i] * sys.w[(i, j)];
            }
            domega[j] = -(2.0 * dknm_last[j] * sys.w[(last, j)] - 2.0 * sys.w[(last, j)] * kdk);
        }

        // tr(K^{-1} dK K^{-1} W') = <kwk, dK>; dK symmetric with zero corner
        let mut tr_kdk = 0.0;
        for i in 0..last {
            tr_kdk += 2.0 * kwk[(i, last)] * dk_last[i];
        }

        // dQ = dK + dk' L k + (dk' L k)' + k' dL k, with L = diag(1/omega)
        // contracted directly against qwq
        let mut tr_qdq = 0.0;
        for i in 0..last {
            tr_qdq += 2.0 * qwq[(i, last)] * dk_last[i];
        }
        // dk' L k part: dknm only in column `last`
        // (dk' L k)[last, c] = sum_j dknm[j] k[j, c] / omega_j
        for c in 0..m1 {
            let mut acc = 0.0;
            for j in 0..nbar {
                acc += dknm_last[j] * sys.knm[(j, c)] / sys.omega[j];
            }
            // appears twice (the matrix plus its transpose)
            tr_qdq += 2.0 * qwq[(last, c)] * acc;
        }
        // k' dL k part: dL_j = -domega_j / omega_j^2
        for r in 0..m1 {
            for c in 0..m1 {
                let mut acc = 0.0;
                for j in 0..nbar {
                    acc += sys.knm[(j, r)] * sys.knm[(j, c)] * (-domega[j])
                        / (sys.omega[j] * sys.omega[j]);
                }
                tr_qdq += qwq[(r, c)] * acc;
            }
        }

        // tr(dP W') with dP = -K^{-1} dK K^{-1} + Q^{-1} dQ Q^{-1}
        let tr_dp_w = -tr_kdk + tr_qdq;

        // tr(P dW'): dW' nonzero on the last row/column and its corner
        let mut tr_p_dw = 0.0;
        for i in 0..m1 {
            // product over dimensions except l, at entry (i, last)
            let mut rest = 1.0;
            for (k, fk) in sys.factors.iter().enumerate() {
                if k != l {
                    rest *= fk[(i, last)];
                }
            }
            let (_, dwl) = triple_product_1d(
                sys.aug[(i, l)],
                candidate[l],
                neigh.xprime[l],
                theta,
                cfg.bounds[l].0,
                cfg.bounds[l].1,
                true,
            );
            let dw = if i == last { 2.0 * dwl * rest } else { dwl * rest };
            let weight = if i == last {
                sys.p[(last, last)]
            } else {
                2.0 * sys.p[(i, last)]
            };
            tr_p_dw += weight * dw;
        }

        grad[l] = -(tr_dp_w + tr_p_dw);
    }
    Ok(grad)
}

/// Diagnostics from greedy construction.
#[derive(Debug, Clone, Default)]
pub struct GreedyReport {
    /// Criterion value of each accepted point, in order.
    pub values: Vec<f64>,
    /// How many points fell back to duplicating the previous one because the
    /// search found nothing better.
    pub fallbacks: usize,
}

/// Greedy wIMSE inducing-point construction: the anchor site first, then
/// each next point by seeded multistart bounded minimization of the
/// criterion over the config box.
pub fn greedy_wimse(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    m: usize,
    theta: f64,
    cfg: &WimseConfig,
) -> Result<InducingSet> {
    greedy_wimse_with_report(design, neigh, m, theta, cfg).map(|(set, _)| set)
}

pub fn greedy_wimse_with_report(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    m: usize,
    theta: f64,
    cfg: &WimseConfig,
) -> Result<(InducingSet, GreedyReport)> {
    if m == 0 {
        return Err(Error::invalid("inducing set needs at least one point"));
    }
    let d = design.dim();
    if cfg.bounds.len() != d {
        return Err(Error::invalid("bounds dimension mismatch"));
    }
    let anchor = neigh.xprime.clone();
    let mut psi = DMatrix::zeros(1, d);
    for k in 0..d {
        psi[(0, k)] = anchor[k];
    }
    let mut report = GreedyReport::default();
    let mut previous_value = f64::INFINITY;

    let opt_opts = OptimOptions {
        grad_tol: cfg.tol,
        f_tol: 1e-10,
        max_iters: 50,
        memory: 8,
    };

    for next in 1..m {
        let current = InducingSet {
            psi: psi.clone(),
            anchor: anchor.clone(),
        };
        let mut rng = stream(cfg.seed, "wimse-multistart", &[next as u64]);
        let starts = latin_hypercube_unit(cfg.multistarts, d, &mut rng);

        let mut best: Option<(f64, Vec<f64>)> = None;
        let consider = |value: f64, point: Vec<f64>, best: &mut Option<(f64, Vec<f64>)>| {
            if best.as_ref().map(|(v, _)| value < *v).unwrap_or(true) {
                *best = Some((value, point));
            }
        };

        for s in 0..cfg.multistarts {
            let start: Vec<f64> = (0..d)
                .map(|k| cfg.bounds[k].0 + starts[(s, k)] * (cfg.bounds[k].1 - cfg.bounds[k].0))
                .collect();
            if let Ok(v) = wimse_criterion(design, neigh, &current, &start, theta, cfg) {
                consider(v, start.clone(), &mut best);
            }
            let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
                let f = wimse_criterion(design, neigh, &current, x, theta, cfg).ok()?;
                let g = match cfg.gradient {
                    GradientMode::Analytic => {
                        wimse_gradient(design, neigh, &current, x, theta, cfg).ok()?
                    }
                    GradientMode::FiniteDifference => {
                        let mut g = vec![0.0; d];
                        for k in 0..d {
                            let span = cfg.bounds[k].1 - cfg.bounds[k].0;
                            let h = (1e-6 * span).max(1e-9);
                            let mut hi = x.to_vec();
                            let mut lo = x.to_vec();
                            hi[k] = (x[k] + h).min(cfg.bounds[k].1);
                            lo[k] = (x[k] - h).max(cfg.bounds[k].0);
                            let fh = wimse_criterion(design, neigh, &current, &hi, theta, cfg).ok()?;
                            let fl = wimse_criterion(design, neigh, &current, &lo, theta, cfg).ok()?;
                            g[k] = (fh - fl) / (hi[k] - lo[k]);
                        }
                        g
                    }
                };
                Some((f, g))
            };
            if let Some(r) = minimize(objective, &start, &cfg.bounds, &opt_opts) {
                consider(r.f, r.x, &mut best);
            }
        }

        let (value, point) = match best {
            Some(b) => b,
            None => {
                // optimizer total failure: duplicate the previous point,
                // which leaves the criterion unchanged
                report.fallbacks += 1;
                let prev: Vec<f64> = (0..d).map(|k| psi[(next - 1, k)]).collect();
                let v = wimse_criterion(
                    design,
                    neigh,
                    &current,
                    &clamp_into(&prev, &cfg.bounds),
                    theta,
                    cfg,
                )?;
                (v, clamp_into(&prev, &cfg.bounds))
            }
        };
        // greedy values must not increase; a duplicate of the previous point
        // reproduces the previous criterion, so use it if the search lost
        let (value, point) = if value > previous_value {
            report.fallbacks += 1;
            let prev: Vec<f64> = (0..d).map(|k| psi[(next - 1, k)]).collect();
            let clamped = clamp_into(&prev, &cfg.bounds);
            let v = wimse_criterion(design, neigh, &current, &clamped, theta, cfg)?;
            (v.min(previous_value), clamped)
        } else {
            (value, point)
        };

        previous_value = value;
        report.values.push(value);
        psi = psi.insert_row(next, 0.0);
        for k in 0..d {
            psi[(next, k)] = point[k];
        }
    }

    Ok((InducingSet { psi, anchor }, report))
}

fn clamp_into(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(v, &(lo, hi))| v.clamp(lo, hi))
        .collect()
}

/// Space-filling template: an `(m-1)`-point Latin hypercube on the
/// hyperrectangle enclosing the neighborhood, warped per dimension by the
/// inverse Normal CDF so points concentrate near the anchor, clipped to the
/// box, plus the anchor itself as the m-th point.
///
/// The warp maps the unit coordinate `u` to `anchor + qnorm(u) * scale`,
/// with the scale chosen so the central `1 - 2e-3` mass of the Normal spans
/// the box half-widths.
pub fn qnorm_template(
    design: &ReplicatedDesign,
    neigh: &LocalNeighborhood,
    m: usize,
    seed: u64,
) -> Result<InducingSet> {
    if m == 0 {
        return Err(Error::invalid("inducing set needs at least one point"));
    }
    let d = design.dim();
    let anchor = neigh.xprime.clone();
    let bounds = neighborhood_box(design, neigh);
    let mut psi = DMatrix::zeros(m, d);

    if m > 1 {
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        let eps = 1e-3;
        let z_span = normal.inverse_cdf(1.0 - eps);
        let mut rng = stream(seed, "qnorm-lhs", &[]);
        let unit = latin_hypercube_unit(m - 1, d, &mut rng);
        for i in 0..(m - 1) {
            for k in 0..d {
                let (lo, hi) = bounds[k];
                let half = 0.5 * (hi - lo);
                let u = unit[(i, k)].clamp(1e-12, 1.0 - 1e-12);
                let z = normal.inverse_cdf(u);
                let v = anchor[k] + z * half / z_span;
                psi[(i, k)] = v.clamp(lo, hi);
            }
        }
    }
    for k in 0..d {
        psi[(m - 1, k)] = anchor[k].clamp(bounds[k].0, bounds[k].1);
    }
    Ok(InducingSet { psi, anchor })
}

/// Translate a template to a new prediction site. Pure displacement: all
/// pairwise geometry within the set is preserved exactly.
pub fn transport(template: &InducingSet, xprime: &DVector<f64>) -> InducingSet {
    let d = template.dim();
    let mut psi = template.psi.clone();
    for i in 0..psi.nrows() {
        for k in 0..d {
            psi[(i, k)] += xprime[k] - template.anchor[k];
        }
    }
    InducingSet {
        psi,
        anchor: xprime.clone(),
    }
}
