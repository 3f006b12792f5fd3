//! Box-constrained quasi-Newton minimization.
//!
//! A limited-memory BFGS iteration with gradient projection onto the bound
//! box and an Armijo backtracking line search along the projected path. The
//! problems in this crate are smooth and low-dimensional (one to five
//! variables), where this scheme converges in a handful of iterations and is
//! fully deterministic.

/// Options controlling the iteration.
#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    /// Convergence threshold on the infinity norm of the projected gradient.
    pub grad_tol: f64,
    /// Convergence threshold on the relative objective decrease.
    pub f_tol: f64,
    pub max_iters: usize,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            grad_tol: 1e-5,
            f_tol: 1e-10,
            max_iters: 100,
            memory: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn clamp_to(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Gradient with outward components at active bounds zeroed.
fn projected_gradient(x: &[f64], grad: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(grad)
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| {
            if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` over the box `bounds`, starting from `x0`.
///
/// The objective returns `None` at points where it cannot be evaluated
/// (failed factorization, out-of-domain intermediate); the line search treats
/// those as infinitely bad and backtracks. The starting point must be
/// evaluable, otherwise `None` is returned.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], opts: &OptimOptions) -> Option<OptimResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    assert_eq!(bounds.len(), n);
    let mut x = x0.to_vec();
    clamp_to(&mut x, bounds);

    let mut evals = 1usize;
    let (mut fx, mut gx) = f(&x)?;
    // (s, y) pairs for the two-loop recursion
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> =
        std::collections::VecDeque::new();

    let mut converged = false;
    let mut iter = 0usize;
    let mut stalled = 0usize;
    while iter < opts.max_iters {
        let pg = projected_gradient(&x, &gx, bounds);
        if inf_norm(&pg) < opts.grad_tol {
            converged = true;
            break;
        }

        // two-loop recursion on the projected gradient
        let mut q = pg.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &pg) >= 0.0 {
            // not a descent direction; fall back to steepest descent
            dir = pg.iter().map(|v| -v).collect();
        }

        // Armijo line search along the projected path: backtrack from the
        // initial step on failure, expand while it keeps holding on success
        let c1 = 1e-4;
        let init_step = if hist.is_empty() {
            1.0 / inf_norm(&dir).max(1.0)
        } else {
            1.0
        };
        let try_step = |step: f64, evals: &mut usize, f: &mut F| {
            let mut xt: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            clamp_to(&mut xt, bounds);
            let actual: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&actual) == 0.0 {
                return None;
            }
            *evals += 1;
            let (ft, gt) = f(&xt)?;
            if ft <= fx + c1 * dot(&gx, &actual) {
                Some((xt, ft, gt, actual))
            } else {
                None
            }
        };

        let mut accepted = None;
        let mut step = init_step;
        if let Some(hit) = try_step(step, &mut evals, &mut f) {
            accepted = Some(hit);
            for _ in 0..30 {
                step *= 2.0;
                match try_step(step, &mut evals, &mut f) {
                    Some(hit) if hit.1 < accepted.as_ref().unwrap().1 => accepted = Some(hit),
                    _ => break,
                }
            }
        } else {
            for _ in 0..40 {
                step *= 0.5;
                if let Some(hit) = try_step(step, &mut evals, &mut f) {
                    accepted = Some(hit);
                    break;
                }
            }
        }

        let Some((xt, ft, gt, s_vec)) = accepted else {
            break; // no progress possible along this direction
        };

        let y_vec: Vec<f64> = gt.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s_vec, &y_vec);
        if sy > 1e-12 * inf_norm(&s_vec) * inf_norm(&y_vec).max(1e-300) {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s_vec, y_vec, 1.0 / sy));
        }

        let f_drop = (fx - ft).abs();
        let f_scale = fx.abs().max(ft.abs()).max(1.0);
        x = xt;
        gx = gt;
        fx = ft;
        iter += 1;

        // stop only after the objective has stalled twice in a row
        if f_drop <= opts.f_tol * f_scale {
            stalled += 1;
            if stalled >= 2 {
                break;
            }
        } else {
            stalled = 0;
        }
    }

    if !converged {
        let pg = projected_gradient(&x, &gx, bounds);
        converged = inf_norm(&pg) < opts.grad_tol;
    }

    Some(OptimResult {
        x,
        f: fx,
        grad: gx,
        iterations: iter,
        evaluations: evals,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quadratic(center: &[f64]) -> impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)> + '_ {
        move |x: &[f64]| {
            let f = x
                .iter()
                .zip(center)
                .map(|(xi, ci)| (xi - ci) * (xi - ci))
                .sum::<f64>();
            let g = x.iter().zip(center).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            Some((f, g))
        }
    }

    #[test]
    fn unconstrained_quadratic_minimum() {
        let center = [1.5, -0.5];
        let r = minimize(
            quadratic(&center),
            &[0.0, 0.0],
            &[(-10.0, 10.0), (-10.0, 10.0)],
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 1.5, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], -0.5, epsilon = 1e-6);
    }

    #[test]
    fn active_bound_is_respected() {
        let center = [5.0];
        let r = minimize(quadratic(&center), &[0.0], &[(-1.0, 2.0)], &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.x[0], 2.0);
    }

    #[test]
    fn rosenbrock_in_a_box() {
        let rosen = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Some((f, g))
        };
        let r = minimize(
            rosen,
            &[-1.2, 1.0],
            &[(-2.0, 2.0), (-2.0, 2.0)],
            &OptimOptions {
                max_iters: 500,
                ..OptimOptions::default()
            },
        )
        .unwrap();
        assert!(r.converged, "rosenbrock did not converge: {r:?}");
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn start_at_optimum_stops_immediately() {
        let center = [0.25];
        let r = minimize(quadratic(&center), &[0.25], &[(0.0, 1.0)], &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2);
    }

    #[test]
    fn infeasible_start_returns_none() {
        let f = |_: &[f64]| -> Option<(f64, Vec<f64>)> { None };
        assert!(minimize(f, &[0.5], &[(0.0, 1.0)], &OptimOptions::default()).is_none());
    }

    #[test]
    fn backtracks_over_infeasible_regions() {
        // objective undefined for x > 1.2; minimum at the bound x = 1
        let f = |x: &[f64]| {
            if x[0] > 1.2 {
                None
            } else {
                Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]))
            }
        };
        let r = minimize(f, &[0.0], &[(-5.0, 1.0)], &OptimOptions::default()).unwrap();
        assert_eq!(r.x[0], 1.0);
    }
}
