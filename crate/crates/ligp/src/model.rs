//! The end-to-end local prediction pipeline: neighborhood, transported
//! template, hyperparameter fit, and prediction for each site, batched in
//! parallel over large testing sets.
//!
//! Every site is a pure function of the (immutable) design, template, and
//! config, so results are identical for any worker count and any execution
//! order. Sites that fail to fit fall back to a flagged prior-reversion
//! prediction rather than aborting the batch.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::design::ReplicatedDesign;
use crate::error::{Error, Result};
use crate::kernel::JitterPolicy;
use crate::neighborhood::{build_index, neighborhood, LocalNeighborhood, SpatialIndex};
use crate::stats::quantile_r7_sorted;
use crate::templates::{
    greedy_wimse, qnorm_template, transport, InducingSet, WimseConfig,
};
use crate::woodbury::{build_system, fit_hyperparams, predict, FitConfig, ParamMode};

/// Which inducing-point template the pipeline builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Wimse,
    Qnorm,
}

/// Pipeline configuration.
#[derive(Debug, Clone)]
pub struct LigpConfig {
    /// Neighborhood size in unique inputs; clamped (with a warning) when a
    /// design has fewer unique rows.
    pub nbar: usize,
    /// Inducing-point count; `None` picks a default from the input dimension.
    pub m: Option<usize>,
    pub template: TemplateKind,
    /// Estimate the local nugget (otherwise pin it at `fixed_g`).
    pub estimate_nugget: bool,
    /// Nugget used when `estimate_nugget` is false.
    pub fixed_g: f64,
    /// Fix the lengthscale (in pre-scaled coordinates) instead of estimating.
    pub fixed_theta: Option<f64>,
    pub jitter: JitterPolicy,
    pub use_priors: bool,
    /// Worker threads for batch prediction; 0 means all available cores.
    pub workers: usize,
    pub seed: u64,
}

impl Default for LigpConfig {
    fn default() -> Self {
        LigpConfig {
            nbar: 100,
            m: None,
            template: TemplateKind::Qnorm,
            estimate_nugget: true,
            fixed_g: 1e-8,
            fixed_theta: None,
            jitter: JitterPolicy::default(),
            use_priors: true,
            workers: 0,
            seed: 0,
        }
    }
}

/// Default inducing-point count: 10 at d <= 2, growing by 5 per dimension
/// and capped at 30, interpolating the benchmark settings.
pub fn default_m(dim: usize) -> usize {
    (10 + 5 * dim.saturating_sub(2)).min(30)
}

impl LigpConfig {
    pub fn resolved_m(&self, dim: usize) -> usize {
        self.m.unwrap_or_else(|| default_m(dim))
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            theta_mode: match self.fixed_theta {
                Some(t) => ParamMode::Fixed(t),
                None => ParamMode::Estimated,
            },
            g_mode: if self.estimate_nugget {
                ParamMode::Estimated
            } else {
                ParamMode::Fixed(self.fixed_g)
            },
            use_priors: self.use_priors,
            ..FitConfig::default()
        }
    }
}

/// Per-site outcome status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitStatus {
    Ok,
    /// The local fit failed; the prediction is a flagged prior reversion.
    Fallback,
}

/// Per-site fit diagnostics.
#[derive(Debug, Clone)]
pub struct SiteDiagnostics {
    pub status: FitStatus,
    pub theta: f64,
    pub g: f64,
    pub tau2: f64,
    pub iterations: usize,
    pub wall: f64,
}

/// Batched predictions, row-aligned with the requested sites.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub sites: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma2: DVector<f64>,
    pub diagnostics: Vec<SiteDiagnostics>,
}

impl PredictionBatch {
    pub fn fallback_count(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| d.status == FitStatus::Fallback)
            .count()
    }
}

/// Lengthscale initialization: the 10% empirical quantile of squared
/// pairwise Euclidean distances among the neighborhood's unique inputs.
pub fn theta_init(design: &ReplicatedDesign, neigh: &LocalNeighborhood) -> Result<f64> {
    let nbar = neigh.indices.len();
    if nbar < 2 {
        return Err(Error::invalid(
            "theta initialization needs at least two unique inputs",
        ));
    }
    let d = design.dim();
    let mut dists = Vec::with_capacity(nbar * (nbar - 1) / 2);
    for a in 0..nbar {
        for b in (a + 1)..nbar {
            let mut acc = 0.0;
            for k in 0..d {
                let delta =
                    design.xbar()[(neigh.indices[a], k)] - design.xbar()[(neigh.indices[b], k)];
                acc += delta * delta;
            }
            dists.push(acc);
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let q = quantile_r7_sorted(&dists, 0.1);
    if q <= 0.0 {
        // all-coincident neighborhoods cannot inform a lengthscale
        return Err(Error::invalid(
            "neighborhood has no distinct pairwise distances",
        ));
    }
    Ok(q)
}

/// Build the pipeline's inducing-point template at the per-dimension median
/// of the design's unique inputs.
pub fn build_template(design: &ReplicatedDesign, cfg: &LigpConfig) -> Result<InducingSet> {
    let d = design.dim();
    let m = cfg.resolved_m(d);
    let index = build_index(design);
    let center = DVector::from_fn(d, |k, _| {
        let col: Vec<f64> = (0..design.n_unique()).map(|i| design.xbar()[(i, k)]).collect();
        crate::stats::median(&col)
    });
    let nbar = cfg.nbar.min(design.n_unique());
    if nbar < cfg.nbar {
        log::warn!(
            "neighborhood size {} clamped to {} available unique inputs",
            cfg.nbar,
            nbar
        );
    }
    let neigh = neighborhood(&index, design, &center, nbar)?;
    match cfg.template {
        TemplateKind::Qnorm => qnorm_template(design, &neigh, m, cfg.seed),
        TemplateKind::Wimse => {
            let theta = match cfg.fixed_theta {
                Some(t) => t,
                None => theta_init(design, &neigh)?,
            };
            let mut wcfg = WimseConfig::from_neighborhood(design, &neigh)?;
            wcfg.seed = cfg.seed;
            wcfg.jitter = cfg.jitter;
            greedy_wimse(design, &neigh, m, theta, &wcfg)
        }
    }
}

/// Fit and predict at one site: neighborhood, transported template,
/// hyperparameter estimation, prediction. Fit failures yield a flagged
/// prior-reversion fallback (zero mean, neighborhood mean-square variance)
/// so batch jobs always complete.
pub fn fit_predict_site(
    design: &ReplicatedDesign,
    index: &SpatialIndex,
    template: &InducingSet,
    xprime: &DVector<f64>,
    cfg: &LigpConfig,
) -> (f64, f64, SiteDiagnostics) {
    let start = std::time::Instant::now();
    let nbar = cfg.nbar.min(design.n_unique());

    let attempt = || -> Result<(f64, f64, SiteDiagnostics)> {
        let neigh = neighborhood(index, design, xprime, nbar)?;
        let local = transport(template, xprime);
        let theta0 = match cfg.fixed_theta {
            Some(t) => t,
            None => theta_init(design, &neigh)?,
        };
        let fit = fit_hyperparams(
            design,
            &neigh,
            &local,
            (theta0, None),
            &cfg.fit_config(),
            &cfg.jitter,
        )?;
        let sys = build_system(
            design,
            &neigh,
            &local,
            fit.params.theta,
            fit.params.g,
            &cfg.jitter,
        )?;
        let (mu, sigma2) = predict(&fit, &sys, xprime)?;
        Ok((
            mu,
            sigma2,
            SiteDiagnostics {
                status: FitStatus::Ok,
                theta: fit.params.theta,
                g: fit.params.g,
                tau2: fit.params.tau2,
                iterations: fit.iterations,
                wall: 0.0,
            },
        ))
    };

    let (mu, sigma2, mut diag) = attempt().unwrap_or_else(|_| {
        // prior reversion: zero mean with the neighborhood's mean-square
        // response as the variance proxy
        let proxy = prior_variance_proxy(design, index, xprime, nbar);
        (
            0.0,
            proxy,
            SiteDiagnostics {
                status: FitStatus::Fallback,
                theta: f64::NAN,
                g: f64::NAN,
                tau2: proxy,
                iterations: 0,
                wall: 0.0,
            },
        )
    });
    diag.wall = start.elapsed().as_secs_f64();
    (mu, sigma2, diag)
}

fn prior_variance_proxy(
    design: &ReplicatedDesign,
    index: &SpatialIndex,
    xprime: &DVector<f64>,
    nbar: usize,
) -> f64 {
    if let Ok(neigh) = neighborhood(index, design, xprime, nbar) {
        let mut total = 0.0;
        let mut count = 0.0;
        for &i in &neigh.indices {
            total += design.sq_sums()[i];
            count += design.multiplicities()[i] as f64;
        }
        if count > 0.0 && total > 0.0 {
            return total / count;
        }
    }
    1.0
}

/// Map [`fit_predict_site`] over a testing set with the configured worker
/// pool. Output order matches input order for any worker count.
pub fn predict_batch(
    design: &ReplicatedDesign,
    sites: &DMatrix<f64>,
    cfg: &LigpConfig,
) -> Result<PredictionBatch> {
    if sites.ncols() != design.dim() {
        return Err(Error::invalid(format!(
            "sites have dimension {}, design has {}",
            sites.ncols(),
            design.dim()
        )));
    }
    if design.n_unique() == 0 {
        return Err(Error::invalid("empty design"));
    }
    let index = build_index(design);
    let template = build_template(design, cfg)?;

    let run = |site_rows: Vec<DVector<f64>>| -> Vec<(f64, f64, SiteDiagnostics)> {
        site_rows
            .into_par_iter()
            .map(|xp| fit_predict_site(design, &index, &template, &xp, cfg))
            .collect()
    };

    let rows: Vec<DVector<f64>> = (0..sites.nrows())
        .map(|i| sites.row(i).transpose())
        .collect();
    let results = if cfg.workers == 0 {
        run(rows)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| run(rows))
    };

    let n = results.len();
    let mu = DVector::from_fn(n, |i, _| results[i].0);
    let sigma2 = DVector::from_fn(n, |i, _| results[i].1);
    let diagnostics = results.into_iter().map(|r| r.2).collect();
    Ok(PredictionBatch {
        sites: sites.clone(),
        mu,
        sigma2,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{compress, RawDesign};
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn theta_init_two_points() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let design = compress(&RawDesign::new(x, y).unwrap(), 0.0).unwrap();
        let index = build_index(&design);
        let neigh = neighborhood(&index, &design, &DVector::from_vec(vec![0.5]), 2).unwrap();
        assert_eq!(theta_init(&design, &neigh).unwrap(), 1.0);
    }

    #[test]
    fn theta_init_grid_matches_enumeration() {
        // unit 3x3 grid: quantile over the 36 squared distances
        let mut rows = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                rows.push((i as f64, j as f64));
            }
        }
        let x = DMatrix::from_fn(9, 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
        let y = DVector::zeros(9);
        let design = compress(&RawDesign::new(x, y).unwrap(), 0.0).unwrap();
        let index = build_index(&design);
        let neigh = neighborhood(&index, &design, &DVector::from_vec(vec![1.0, 1.0]), 9).unwrap();
        let got = theta_init(&design, &neigh).unwrap();

        // brute-force oracle over all 36 pairs with the same quantile rule
        let mut dists = Vec::new();
        for a in 0..9 {
            for b in (a + 1)..9 {
                let dx = rows[a].0 - rows[b].0;
                let dy = rows[a].1 - rows[b].1;
                dists.push(dx * dx + dy * dy);
            }
        }
        assert_eq!(dists.len(), 36);
        dists.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let want = crate::stats::quantile_r7_sorted(&dists, 0.1);
        assert_eq!(got, want);
    }

    #[test]
    fn theta_init_scale_equivariance() {
        let mut rng = stream(31, "theta-scale", &[]);
        let n = 12;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..1.0));
        let y = DVector::zeros(n);
        let design = compress(&RawDesign::new(x.clone(), y.clone()).unwrap(), 0.0).unwrap();
        let index = build_index(&design);
        let q = DVector::from_vec(vec![0.5, 0.5]);
        let neigh = neighborhood(&index, &design, &q, n).unwrap();
        let base = theta_init(&design, &neigh).unwrap();

        let c = 2.5;
        let design2 = compress(&RawDesign::new(x.map(|v| c * v), y).unwrap(), 0.0).unwrap();
        let index2 = build_index(&design2);
        let neigh2 = neighborhood(&index2, &design2, &(q * c), n).unwrap();
        let scaled = theta_init(&design2, &neigh2).unwrap();
        assert!((scaled - c * c * base).abs() < 1e-12 * scaled.abs());
    }

    #[test]
    fn default_m_interpolates_dimension() {
        assert_eq!(default_m(1), 10);
        assert_eq!(default_m(2), 10);
        assert_eq!(default_m(3), 15);
        assert_eq!(default_m(4), 20);
        assert_eq!(default_m(6), 30);
        assert_eq!(default_m(12), 30);
    }
}
