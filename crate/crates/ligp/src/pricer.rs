//! Regression Monte Carlo pricing of Bermudan max-call options on a local
//! surrogate chain.
//!
//! Asset prices follow independent geometric Brownian motions, simulated by
//! the exact log-normal transition between exercise dates. Working backward
//! from the last exercise date, each step fits a local GP surrogate for the
//! timing value — the expected pathwise payoff of continuing minus the
//! immediate payoff — on a replicated design of simulated continuations.
//! The exercise rule is the sign of the fitted timing value: stop at the
//! first in-the-money date where it is negative. Pricing replays a fresh
//! path set through the rule and averages the collected discounted payoffs;
//! since any implementable rule is suboptimal, higher prices mean better
//! surrogates on a fixed path set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::design::{
    apply_prescale, compress, fit_prescale, PrescaleTransform, RawDesign, DEFAULT_PRESCALE_SUBSET,
};
use crate::error::{Error, Result};
use crate::lhs::latin_hypercube;
use crate::model::{build_template, fit_predict_site, FitStatus, LigpConfig};
use crate::neighborhood::{build_index, SpatialIndex};
use crate::rng::stream;
use crate::templates::InducingSet;

/// Geometric Brownian motion dynamics for `d` independent assets observed at
/// the exercise interval `dt`, over `k_steps` exercise dates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GbmModel {
    pub d: usize,
    pub r: f64,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub dt: f64,
    pub k_steps: usize,
    pub x0: Vec<f64>,
}

impl GbmModel {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.delta.len() != self.d
            || self.sigma.len() != self.d
            || self.x0.len() != self.d
        {
            return Err(Error::invalid("GBM model dimension mismatch"));
        }
        if self.sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::invalid("volatilities must be nonnegative"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("exercise interval must be positive"));
        }
        if self.k_steps < 2 {
            return Err(Error::invalid("need at least two exercise dates"));
        }
        if self.x0.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("initial prices must be positive"));
        }
        Ok(())
    }
}

/// One exact log-normal transition over `dt` for every asset.
pub fn gbm_step<R: Rng>(x: &[f64], model: &GbmModel, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.d);
    for i in 0..model.d {
        let drift = (model.r - model.delta[i] - 0.5 * model.sigma[i] * model.sigma[i]) * model.dt;
        let z: f64 = StandardNormal.sample(rng);
        out.push(x[i] * (drift + model.sigma[i] * model.dt.sqrt() * z).exp());
    }
    out
}

/// Discounted max-call payoff parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MaxCallPayoff {
    pub strike: f64,
    pub r: f64,
    pub dt: f64,
}

impl MaxCallPayoff {
    pub fn is_itm(&self, x: &[f64]) -> bool {
        x.iter().cloned().fold(f64::MIN, f64::max) > self.strike
    }
}

/// `exp(-r k dt) (max_i x_i - strike)_+`, the payoff of exercising at step
/// `k`, discounted to time zero.
pub fn payoff(k: usize, x: &[f64], p: &MaxCallPayoff) -> f64 {
    let best = x.iter().cloned().fold(f64::MIN, f64::max);
    (-p.r * k as f64 * p.dt).exp() * (best - p.strike).max(0.0)
}

/// A frozen per-step surrogate: the fitted replicated design in pre-scaled
/// coordinates plus everything needed to answer timing-value queries.
pub struct StepSurrogate {
    pub step: usize,
    design: crate::design::ReplicatedDesign,
    index: SpatialIndex,
    template: InducingSet,
    prescale: PrescaleTransform,
    cfg: LigpConfig,
    /// fraction of queried sites that fell back during fitting diagnostics
    pub fit_wall: f64,
}

impl StepSurrogate {
    /// Fitted timing value at a raw (price-space) point.
    pub fn timing_value(&self, x: &[f64]) -> f64 {
        let raw = DMatrix::from_row_slice(1, x.len(), x);
        let scaled = match apply_prescale(&self.prescale, &raw) {
            Ok(s) => s,
            Err(_) => return 0.0,
        };
        let site = scaled.row(0).transpose();
        let (mu, _, diag) = fit_predict_site(&self.design, &self.index, &self.template, &site, &self.cfg);
        match diag.status {
            FitStatus::Ok => mu,
            // prior reversion means "no information": continue
            FitStatus::Fallback => f64::MAX,
        }
    }

    /// Timing value with predictive variance, for boundary diagnostics.
    pub fn timing_value_with_sd(&self, x: &[f64]) -> (f64, f64) {
        let raw = DMatrix::from_row_slice(1, x.len(), x);
        let scaled = match apply_prescale(&self.prescale, &raw) {
            Ok(s) => s,
            Err(_) => return (0.0, f64::INFINITY),
        };
        let site = scaled.row(0).transpose();
        let (mu, var, _) = fit_predict_site(&self.design, &self.index, &self.template, &site, &self.cfg);
        (mu, var.sqrt())
    }
}

/// The fitted timing-value surrogates for steps `1..k_steps-1`, fitted
/// backward so each step's targets depend only on later steps.
pub struct SurrogateChain {
    pub model: GbmModel,
    pub payoff: MaxCallPayoff,
    /// entry `j` answers queries at step `j + 1`
    pub steps: Vec<StepSurrogate>,
}

impl SurrogateChain {
    /// Timing value at step `k`, when a surrogate exists for it.
    pub fn timing_value(&self, k: usize, x: &[f64]) -> Option<f64> {
        if k == 0 || k >= self.model.k_steps {
            return None;
        }
        self.steps.get(k - 1).map(|s| s.timing_value(x))
    }

    /// The exercise decision at step `k` for an in-the-money state: stop at
    /// the final date, otherwise stop where the timing value is negative.
    fn exercise(&self, k: usize, x: &[f64]) -> bool {
        if !self.payoff.is_itm(x) {
            return false;
        }
        if k == self.model.k_steps {
            return true;
        }
        match self.timing_value(k, x) {
            Some(t) => t < 0.0,
            None => false,
        }
    }
}

/// Pathwise payoff selector for a realized trajectory `path[0] = x_k,
/// path[1] = x_{k+1}, ..., path[K-k] = x_K`: the discounted payoff collected
/// at the first exercise after `k`, minus the immediate payoff at `k`.
/// Positive values favor continuation.
pub fn pathwise_payoff(
    path: &[Vec<f64>],
    chain: &SurrogateChain,
    k: usize,
    p: &MaxCallPayoff,
) -> f64 {
    let k_steps = chain.model.k_steps;
    assert!(
        path.len() >= k_steps - k + 1,
        "path must reach the final exercise date"
    );
    let mut collected = 0.0;
    for s in (k + 1)..=k_steps {
        let x = &path[s - k];
        if chain.exercise(s, x) {
            collected = payoff(s, x, p);
            break;
        }
    }
    collected - payoff(k, &path[0], p)
}

/// Where a step's unique design sites come from.
#[derive(Debug, Clone)]
pub enum SiteSampling {
    /// Latin hypercube on a fixed sub-domain, filtered to in-the-money.
    LhsSubdomain(Vec<(f64, f64)>),
    /// Draws from the step's log-normal marginal density, filtered to
    /// in-the-money.
    LognormalDensity,
}

/// Per-step design sizes for chain fitting.
#[derive(Debug, Clone)]
pub struct ChainDesignSpec {
    /// unique sites per step
    pub nbar_sites: usize,
    /// replicate continuation paths per site
    pub replicates: u32,
    pub sampling: SiteSampling,
    /// subset size for the one-off global prescale fit
    pub prescale_subset: usize,
}

impl ChainDesignSpec {
    pub fn new(nbar_sites: usize, replicates: u32, sampling: SiteSampling) -> Self {
        ChainDesignSpec {
            nbar_sites,
            replicates,
            sampling,
            prescale_subset: DEFAULT_PRESCALE_SUBSET,
        }
    }
}

/// Draw exactly `nbar` in-the-money sites for step `k`.
fn sample_step_sites(
    model: &GbmModel,
    p: &MaxCallPayoff,
    spec: &ChainDesignSpec,
    k: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let d = model.d;
    let mut sites: Vec<Vec<f64>> = Vec::with_capacity(spec.nbar_sites);
    let mut batch = 0u64;
    while sites.len() < spec.nbar_sites {
        if batch > 200 {
            return Err(Error::Fit(format!(
                "step {k}: could not find {} in-the-money sites",
                spec.nbar_sites
            )));
        }
        match &spec.sampling {
            SiteSampling::LhsSubdomain(bounds) => {
                if bounds.len() != d {
                    return Err(Error::invalid("sub-domain bounds dimension mismatch"));
                }
                let mut rng = stream(seed, "chain-sites-lhs", &[k as u64, batch]);
                let draw = latin_hypercube(spec.nbar_sites, bounds, &mut rng);
                for i in 0..draw.nrows() {
                    let site: Vec<f64> = (0..d).map(|j| draw[(i, j)]).collect();
                    if p.is_itm(&site) {
                        sites.push(site);
                        if sites.len() == spec.nbar_sites {
                            break;
                        }
                    }
                }
            }
            SiteSampling::LognormalDensity => {
                let mut rng = stream(seed, "chain-sites-lognormal", &[k as u64, batch]);
                let t = k as f64 * model.dt;
                for _ in 0..(4 * spec.nbar_sites) {
                    let site: Vec<f64> = (0..d)
                        .map(|i| {
                            let drift = (model.r
                                - model.delta[i]
                                - 0.5 * model.sigma[i] * model.sigma[i])
                                * t;
                            let z: f64 = StandardNormal.sample(&mut rng);
                            model.x0[i] * (drift + model.sigma[i] * t.sqrt() * z).exp()
                        })
                        .collect();
                    if p.is_itm(&site) {
                        sites.push(site);
                        if sites.len() == spec.nbar_sites {
                            break;
                        }
                    }
                }
            }
        }
        batch += 1;
    }
    let mut out = DMatrix::zeros(spec.nbar_sites, d);
    for (i, s) in sites.iter().enumerate() {
        for j in 0..d {
            out[(i, j)] = s[j];
        }
    }
    Ok(out)
}

/// Fit the whole surrogate chain backward from the last exercise date.
///
/// Each step draws fresh in-the-money unique sites, runs `a` independent
/// continuation paths from every site through the already-fitted later
/// surrogates, and fits the local GP on the replicated pathwise payoffs.
/// Out-of-the-money states never enter a design and are never queried: the
/// payoff's zero set always continues. Inputs are pre-scaled once, on the
/// first fitted step, and the same transform is reused down the chain.
pub fn fit_chain(
    model: &GbmModel,
    p: &MaxCallPayoff,
    spec: &ChainDesignSpec,
    ligp_cfg: &LigpConfig,
    seed: u64,
) -> Result<SurrogateChain> {
    model.validate()?;
    if spec.nbar_sites == 0 || spec.replicates == 0 {
        return Err(Error::invalid("chain design needs sites and replicates"));
    }
    let k_steps = model.k_steps;
    let mut chain = SurrogateChain {
        model: model.clone(),
        payoff: *p,
        steps: Vec::new(),
    };
    let mut prescale: Option<PrescaleTransform> = None;

    for k in (1..k_steps).rev() {
        let start = std::time::Instant::now();
        let sites = sample_step_sites(model, p, spec, k, seed)
            .map_err(|e| Error::Fit(format!("step {k}: {e}")))?;
        let d = model.d;
        let a = spec.replicates as usize;

        // replicated pathwise-payoff targets via independent continuations
        let targets: Vec<f64> = (0..spec.nbar_sites * a)
            .into_par_iter()
            .map(|idx| {
                let i = idx / a;
                let r = idx % a;
                let mut rng = stream(seed, "chain-continuation", &[k as u64, i as u64, r as u64]);
                let mut path = Vec::with_capacity(k_steps - k + 1);
                let site: Vec<f64> = (0..d).map(|j| sites[(i, j)]).collect();
                path.push(site);
                for _ in (k + 1)..=k_steps {
                    let next = gbm_step(path.last().unwrap(), model, &mut rng);
                    path.push(next);
                }
                pathwise_payoff(&path, &chain, k, p)
            })
            .collect();

        let mut xs = Vec::with_capacity(spec.nbar_sites * a * d);
        for i in 0..spec.nbar_sites {
            for _ in 0..a {
                for j in 0..d {
                    xs.push(sites[(i, j)]);
                }
            }
        }
        let raw = RawDesign::new(
            DMatrix::from_row_slice(spec.nbar_sites * a, d, &xs),
            DVector::from_vec(targets),
        )?;

        if prescale.is_none() {
            let sub = spec.prescale_subset.min(spec.nbar_sites).max(2);
            prescale = Some(
                fit_prescale(&raw, sub, seed ^ 0x70f3)
                    .map_err(|e| Error::Fit(format!("step {k} prescale: {e}")))?,
            );
        }
        let transform = prescale.as_ref().unwrap();

        let compressed = compress(&raw, 0.0)?;
        let scaled_inputs = apply_prescale(transform, compressed.xbar())?;
        let design = compressed.with_inputs(scaled_inputs)?;

        let mut cfg = ligp_cfg.clone();
        cfg.nbar = cfg.nbar.min(design.n_unique());
        cfg.seed = seed ^ ((k as u64) << 32);
        let template = build_template(&design, &cfg)
            .map_err(|e| Error::Fit(format!("step {k} template: {e}")))?;
        let index = build_index(&design);

        chain.steps.insert(
            0,
            StepSurrogate {
                step: k,
                design,
                index,
                template,
                prescale: transform.clone(),
                cfg,
                fit_wall: start.elapsed().as_secs_f64(),
            },
        );
    }
    Ok(chain)
}

/// Option price estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PricingResult {
    pub price: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// fraction of paths first exercised at each step `1..=k_steps`
    pub exercise_rate: Vec<f64>,
    /// wall time spent fitting each step of the chain, last step first
    pub step_fit_wall: Vec<f64>,
}

/// Simulate `n_paths` fresh scenarios from the initial price and average the
/// discounted payoff collected under the chain's exercise rule.
pub fn price(chain: &SurrogateChain, n_paths: usize, seed: u64) -> PricingResult {
    let model = &chain.model;
    let p = &chain.payoff;
    let k_steps = model.k_steps;
    let results: Vec<(f64, usize)> = (0..n_paths)
        .into_par_iter()
        .map(|path_idx| {
            let mut rng = stream(seed, "price-path", &[path_idx as u64]);
            let mut x = model.x0.clone();
            for k in 1..=k_steps {
                x = gbm_step(&x, model, &mut rng);
                if chain.exercise(k, &x) {
                    return (payoff(k, &x, p), k);
                }
            }
            (0.0, 0)
        })
        .collect();

    summarize_payoffs(&results, n_paths, k_steps, chain)
}

/// Price the never-exercise-early policy on the identical seeded path set:
/// collect the final-date payoff only. This is the European max-call value
/// estimate, a lower bound any sensible exercise rule should beat.
pub fn european_price(model: &GbmModel, p: &MaxCallPayoff, n_paths: usize, seed: u64) -> (f64, f64) {
    let k_steps = model.k_steps;
    let payoffs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path_idx| {
            let mut rng = stream(seed, "price-path", &[path_idx as u64]);
            let mut x = model.x0.clone();
            for _ in 1..=k_steps {
                x = gbm_step(&x, model, &mut rng);
            }
            payoff(k_steps, &x, p)
        })
        .collect();
    mean_and_se(&payoffs)
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize_payoffs(
    results: &[(f64, usize)],
    n_paths: usize,
    k_steps: usize,
    chain: &SurrogateChain,
) -> PricingResult {
    let payoffs: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (price, std_error) = mean_and_se(&payoffs);
    let mut exercise_rate = vec![0.0; k_steps];
    for &(_, k) in results {
        if k >= 1 {
            exercise_rate[k - 1] += 1.0;
        }
    }
    for r in &mut exercise_rate {
        *r /= n_paths as f64;
    }
    PricingResult {
        price,
        std_error,
        n_paths,
        exercise_rate,
        step_fit_wall: chain.steps.iter().map(|s| s.fit_wall).collect(),
    }
}
