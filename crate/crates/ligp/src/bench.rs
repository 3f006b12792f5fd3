//! Benchmark simulators, replicated-design generators, and accuracy metrics.
//!
//! Two stochastic test problems: a smooth two-dimensional mean surface with
//! constant Gaussian noise, and a continuous-time Markov SIR epidemic whose
//! response variance swings hard across the input square. Both are
//! deterministic functions of `(input, seed)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::design::RawDesign;
use crate::error::{Error, Result};
use crate::lhs::latin_hypercube;
use crate::rng::stream;

/// The univariate factor of the benchmark surface:
/// `w(x) = exp(-(x-1)^2) + exp(-0.8 (x+1)^2) - 0.05 sin(8 (x + 0.1))`.
pub fn herbie_w(x: f64) -> f64 {
    (-(x - 1.0) * (x - 1.0)).exp() + (-0.8 * (x + 1.0) * (x + 1.0)).exp()
        - 0.05 * (8.0 * (x + 0.1)).sin()
}

/// Noise-free benchmark mean `f(x1, x2) = -w(x1) w(x2)` on `[-2, 2]^2`.
pub fn herbie_mean(x: &[f64]) -> f64 {
    assert_eq!(x.len(), 2, "herbie mean is two-dimensional");
    -herbie_w(x[0]) * herbie_w(x[1])
}

/// Standard deviation of the benchmark's additive Gaussian noise.
pub const HERBIE_NOISE_SD: f64 = 0.02;

/// One noisy draw of the benchmark response.
pub fn herbie_sample<R: Rng>(x: &[f64], noise_sd: f64, rng: &mut R) -> f64 {
    let mean = herbie_mean(x);
    if noise_sd == 0.0 {
        return mean;
    }
    let normal = Normal::new(0.0, noise_sd).unwrap();
    mean + normal.sample(rng)
}

/// Rates and scaling of the continuous-time Markov SIR simulator.
#[derive(Debug, Clone, Copy)]
pub struct SirConfig {
    pub population: u32,
    /// infection rate (per susceptible-infected contact, scaled by 1/N)
    pub beta: f64,
    /// recovery rate
    pub gamma: f64,
    /// response divisor applied to the accumulated infected-days
    pub scale: f64,
}

impl Default for SirConfig {
    fn default() -> Self {
        SirConfig {
            population: 1000,
            beta: 0.75,
            gamma: 0.5,
            scale: 1000.0,
        }
    }
}

/// One Gillespie trajectory of the SIR chain, returning the aggregate
/// infected-days until the epidemic dies out, divided by `cfg.scale`.
///
/// Inputs are fractions on the unit square: `x[0]` sets the initial
/// susceptible share of the population and `x[1]` the initially infected
/// share of the remainder.
pub fn sir_sample<R: Rng>(x: &[f64], cfg: &SirConfig, rng: &mut R) -> f64 {
    assert_eq!(x.len(), 2, "sir simulator takes unit-square inputs");
    let n = cfg.population as f64;
    let mut s = (x[0].clamp(0.0, 1.0) * n).round();
    let mut i = (x[1].clamp(0.0, 1.0) * (n - s)).round();
    let mut infected_days = 0.0;
    while i > 0.0 {
        let infection_rate = cfg.beta * s * i / n;
        let recovery_rate = cfg.gamma * i;
        let total = infection_rate + recovery_rate;
        let wait = Exp::new(total).unwrap().sample(rng);
        infected_days += i * wait;
        let u: f64 = rng.random();
        if u * total < infection_rate {
            s -= 1.0;
            i += 1.0;
        } else {
            i -= 1.0;
        }
    }
    infected_days / cfg.scale
}

/// Which simulator a benchmark run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulatorId {
    Herbie,
    Sir,
}

impl SimulatorId {
    pub fn domain(&self) -> Vec<(f64, f64)> {
        match self {
            SimulatorId::Herbie => vec![(-2.0, 2.0), (-2.0, 2.0)],
            SimulatorId::Sir => vec![(0.0, 1.0), (0.0, 1.0)],
        }
    }

    /// Noise-free truth where one exists.
    pub fn truth(&self, x: &[f64]) -> Option<f64> {
        match self {
            SimulatorId::Herbie => Some(herbie_mean(x)),
            SimulatorId::Sir => None,
        }
    }

    pub fn draw<R: Rng>(&self, x: &[f64], rng: &mut R) -> f64 {
        match self {
            SimulatorId::Herbie => herbie_sample(x, HERBIE_NOISE_SD, rng),
            SimulatorId::Sir => sir_sample(x, &SirConfig::default(), rng),
        }
    }
}

/// How many replicates each unique design site receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ReplicationRule {
    Fixed(u32),
    /// iid uniform on `{1, ..., max}`
    UniformUpTo(u32),
}

/// A complete benchmark experiment description.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub simulator: SimulatorId,
    pub nbar_sites: usize,
    pub replication: ReplicationRule,
    pub test_size: usize,
    pub seed: u64,
}

/// Generate the replicated training design: Latin hypercube sites on the
/// simulator domain with seeded per-site replicate streams, so that
/// generation order never affects the draws.
pub fn make_design(spec: &BenchmarkSpec) -> Result<RawDesign> {
    if spec.nbar_sites == 0 {
        return Err(Error::invalid("benchmark needs at least one site"));
    }
    let bounds = spec.simulator.domain();
    let d = bounds.len();
    let sites = latin_hypercube(
        spec.nbar_sites,
        &bounds,
        &mut stream(spec.seed, "design-sites", &[]),
    );
    let mut reps_rng = stream(spec.seed, "design-replication", &[]);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..spec.nbar_sites {
        let reps = match spec.replication {
            ReplicationRule::Fixed(a) => a.max(1),
            ReplicationRule::UniformUpTo(max) => reps_rng.random_range(1..=max.max(1)),
        };
        let site: Vec<f64> = (0..d).map(|k| sites[(i, k)]).collect();
        for r in 0..reps {
            let mut draw_rng = stream(spec.seed, "sim-draw", &[i as u64, r as u64]);
            let y = spec.simulator.draw(&site, &mut draw_rng);
            xs.extend_from_slice(&site);
            ys.push(y);
        }
    }
    let n = ys.len();
    RawDesign::new(DMatrix::from_row_slice(n, d, &xs), DVector::from_vec(ys))
}

/// Fresh testing locations with one observed response each.
pub fn make_test_set(spec: &BenchmarkSpec) -> (DMatrix<f64>, DVector<f64>) {
    let bounds = spec.simulator.domain();
    let d = bounds.len();
    let sites = latin_hypercube(
        spec.test_size,
        &bounds,
        &mut stream(spec.seed, "test-sites", &[]),
    );
    let y = DVector::from_fn(spec.test_size, |i, _| {
        let site: Vec<f64> = (0..d).map(|k| sites[(i, k)]).collect();
        let mut rng = stream(spec.seed, "test-draw", &[i as u64]);
        spec.simulator.draw(&site, &mut rng)
    });
    (sites, y)
}

/// Which variance penalty the proper score uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreVariant {
    /// `-sum (err^2 / var) - sum var`
    VariancePenalty,
    /// `-sum (err^2 / var) - sum ln var`
    LogVariancePenalty,
}

/// Out-of-sample accuracy report.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub score: f64,
    pub wall_time: f64,
}

/// Root-mean-squared error (against the noise-free truth when provided,
/// otherwise against the observed test responses) and the proper score
/// combining mean and variance accuracy; higher score is better.
///
/// The root is taken of the mean squared error rather than the bare sum, so
/// magnitudes are comparable across test-set sizes; rankings between
/// surrogates are unaffected.
pub fn metrics(
    mu: &DVector<f64>,
    sigma2: &DVector<f64>,
    y_test: &DVector<f64>,
    truth: Option<&DVector<f64>>,
    variant: ScoreVariant,
    wall_time: f64,
) -> Result<MetricReport> {
    let n = mu.len();
    if sigma2.len() != n || y_test.len() != n || truth.map(|t| t.len() != n).unwrap_or(false) {
        return Err(Error::invalid("metrics inputs must share a length"));
    }
    if sigma2.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("metrics need positive predictive variances"));
    }
    let rmse_target = truth.unwrap_or(y_test);
    let mse: f64 = (0..n)
        .map(|i| (mu[i] - rmse_target[i]).powi(2))
        .sum::<f64>()
        / n as f64;
    let mut score = 0.0;
    for i in 0..n {
        let err2 = (mu[i] - y_test[i]).powi(2);
        score -= err2 / sigma2[i];
        score -= match variant {
            ScoreVariant::VariancePenalty => sigma2[i],
            ScoreVariant::LogVariancePenalty => sigma2[i].ln(),
        };
    }
    Ok(MetricReport {
        rmse: mse.sqrt(),
        score,
        wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn herbie_w_frozen_values() {
        // w(1) = 1 + exp(-3.2) - 0.05 sin(8.8)
        let want = 1.0 + (-3.2f64).exp() - 0.05 * (8.8f64).sin();
        assert_relative_eq!(herbie_w(1.0), want, max_relative = 1e-15);
        // w(0) = exp(-1) + exp(-0.8) - 0.05 sin(0.8)
        let w0 = (-1.0f64).exp() + (-0.8f64).exp() - 0.05 * (0.8f64).sin();
        assert_relative_eq!(herbie_w(0.0), w0, max_relative = 1e-15);
        assert_relative_eq!(herbie_mean(&[0.0, 0.0]), -w0 * w0, max_relative = 1e-15);
    }

    #[test]
    fn herbie_mean_is_symmetric() {
        for &(a, b) in &[(0.3, -1.2), (1.7, 0.4), (-2.0, 2.0)] {
            assert_eq!(herbie_mean(&[a, b]), herbie_mean(&[b, a]));
        }
    }

    #[test]
    fn herbie_sample_clt_checks() {
        let x = [0.4, -0.9];
        let n = 100_000;
        let mut rng = stream(42, "herbie-clt", &[]);
        let draws: Vec<f64> = (0..n).map(|_| herbie_sample(&x, HERBIE_NOISE_SD, &mut rng)).collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let se = HERBIE_NOISE_SD / (n as f64).sqrt();
        assert!(
            (mean - herbie_mean(&x)).abs() < 3.0 * se,
            "sample mean {mean} vs truth {}",
            herbie_mean(&x)
        );
        let var: f64 = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - 4e-4).abs() / 4e-4 < 0.05, "sample variance {var}");
    }

    #[test]
    fn herbie_zero_noise_is_exact() {
        let mut rng = stream(1, "zero-noise", &[]);
        let x = [1.1, 0.2];
        assert_eq!(herbie_sample(&x, 0.0, &mut rng), herbie_mean(&x));
    }

    #[test]
    fn sir_no_infections_no_epidemic() {
        let mut rng = stream(2, "sir-zero", &[]);
        let y = sir_sample(&[0.5, 0.0], &SirConfig::default(), &mut rng);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn sir_faster_recovery_shrinks_epidemics() {
        // seeded averages decrease monotonically along a recovery-rate grid
        let gammas = [0.3, 0.6, 1.2, 2.4];
        let mut means = Vec::new();
        for (gi, &gamma) in gammas.iter().enumerate() {
            let cfg = SirConfig {
                gamma,
                ..SirConfig::default()
            };
            let mut acc = 0.0;
            let reps = 300;
            for r in 0..reps {
                let mut rng = stream(77, "sir-gamma", &[gi as u64, r]);
                acc += sir_sample(&[0.5, 0.1], &cfg, &mut rng);
            }
            means.push(acc / reps as f64);
        }
        for w in means.windows(2) {
            assert!(
                w[1] < w[0],
                "infected-days should fall as recovery speeds up: {means:?}"
            );
        }
    }

    #[test]
    fn sir_variance_is_input_dependent() {
        // sample variance across bins of the input square spans more than
        // a factor of five
        let mut variances = Vec::new();
        for (bi, &(s0, i0)) in [(0.9, 0.08), (0.15, 0.5), (0.5, 0.95), (0.95, 0.9)]
            .iter()
            .enumerate()
        {
            let reps = 200;
            let draws: Vec<f64> = (0..reps)
                .map(|r| {
                    let mut rng = stream(99, "sir-hetero", &[bi as u64, r]);
                    sir_sample(&[s0, i0], &SirConfig::default(), &mut rng)
                })
                .collect();
            let mean: f64 = draws.iter().sum::<f64>() / reps as f64;
            let var: f64 =
                draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps as f64;
            variances.push(var);
        }
        let max = variances.iter().cloned().fold(f64::MIN, f64::max);
        let min = variances.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max / min > 5.0,
            "variance ratio {} across bins {variances:?}",
            max / min
        );
    }

    #[test]
    fn make_design_counts_rows() {
        let spec = BenchmarkSpec {
            simulator: SimulatorId::Herbie,
            nbar_sites: 100,
            replication: ReplicationRule::Fixed(10),
            test_size: 10,
            seed: 5,
        };
        let raw = make_design(&spec).unwrap();
        assert_eq!(raw.n(), 1000);
        let compressed = crate::design::compress(&raw, 0.0).unwrap();
        assert_eq!(compressed.n_unique(), 100);
        assert!(compressed.multiplicities().iter().all(|&a| a == 10));
    }

    #[test]
    fn make_design_uniform_replication_mean() {
        let spec = BenchmarkSpec {
            simulator: SimulatorId::Herbie,
            nbar_sites: 10_000,
            replication: ReplicationRule::UniformUpTo(20),
            test_size: 10,
            seed: 6,
        };
        let raw = make_design(&spec).unwrap();
        let mean_reps = raw.n() as f64 / 10_000.0;
        assert!(
            (mean_reps - 10.5).abs() / 10.5 < 0.1,
            "mean replicate count {mean_reps}"
        );
    }

    #[test]
    fn make_design_sites_are_stratified() {
        let spec = BenchmarkSpec {
            simulator: SimulatorId::Herbie,
            nbar_sites: 50,
            replication: ReplicationRule::Fixed(1),
            test_size: 10,
            seed: 7,
        };
        let raw = make_design(&spec).unwrap();
        let n = 50;
        for k in 0..2 {
            let mut counts = vec![0usize; n];
            for i in 0..n {
                let frac = (raw.x[(i, k)] + 2.0) / 4.0;
                let bin = ((frac * n as f64).floor() as usize).min(n - 1);
                counts[bin] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn metrics_hand_instance() {
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let s2 = DVector::from_vec(vec![1.0, 1.0]);
        let r = metrics(&mu, &s2, &y, None, ScoreVariant::VariancePenalty, 0.0).unwrap();
        assert_relative_eq!(r.rmse, 1.0);
        assert_relative_eq!(r.score, -4.0);
    }

    #[test]
    fn metrics_perfect_mean_scores_variance_penalty() {
        let y = DVector::from_vec(vec![0.5, -0.25, 1.5]);
        let s2 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let r = metrics(&y.clone(), &s2, &y, None, ScoreVariant::VariancePenalty, 0.0).unwrap();
        assert_relative_eq!(r.score, -0.6, max_relative = 1e-12);
        assert_relative_eq!(r.rmse, 0.0);
    }

    #[test]
    fn metrics_rmse_prefers_truth_when_given() {
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 0.0]);
        let truth = mu.clone();
        let s2 = DVector::from_vec(vec![1.0, 1.0]);
        let r = metrics(&mu, &s2, &y, Some(&truth), ScoreVariant::VariancePenalty, 0.0).unwrap();
        assert_eq!(r.rmse, 0.0);
        let r2 = metrics(&mu, &s2, &y, None, ScoreVariant::VariancePenalty, 0.0).unwrap();
        assert!(r2.rmse > 0.0);
    }

    #[test]
    fn metrics_rejects_length_mismatch() {
        let mu = DVector::from_vec(vec![0.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let s2 = DVector::from_vec(vec![1.0]);
        assert!(metrics(&mu, &s2, &y, None, ScoreVariant::VariancePenalty, 0.0).is_err());
    }

    #[test]
    fn designs_replay_deterministically() {
        let spec = BenchmarkSpec {
            simulator: SimulatorId::Sir,
            nbar_sites: 20,
            replication: ReplicationRule::UniformUpTo(5),
            test_size: 5,
            seed: 11,
        };
        let a = make_design(&spec).unwrap();
        let b = make_design(&spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }
}
