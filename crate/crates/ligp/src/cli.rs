//! Command-line interface: reproducible, seeded runs of the prediction
//! pipeline, the benchmarks, and the option pricer.
//!
//! Configuration is a flat `key=value` file overridden by flags; every run
//! writes a manifest carrying the fully resolved configuration, seeds,
//! per-phase wall times, and canonical digests of all outputs. Feeding a
//! manifest back through `--config` replays the run exactly.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure, 3 success
//! with fallback predictions present.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use crate::bench::{
    make_design, make_test_set, metrics, BenchmarkSpec, ReplicationRule, ScoreVariant, SimulatorId,
};
use crate::design::{
    apply_prescale, compress, fit_prescale, read_design_csv, write_design_csv, PrescaleTransform,
    RawDesign,
};
use crate::error::{Error, Result};
use crate::manifest::{format_flat_config, load_config_file, RunManifest};
use crate::model::{predict_batch, FitStatus, LigpConfig, TemplateKind};
use crate::pricer::{
    european_price, fit_chain, price, ChainDesignSpec, GbmModel, MaxCallPayoff, SiteSampling,
};

#[derive(Parser)]
#[command(name = "ligp", version, about = "Local inducing-point GP surrogates for stochastic simulators")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct CommonFlags {
    /// Flat key=value config file, or a manifest.json to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Master seed; all randomness derives from it through named streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Neighborhood size in unique inputs.
    #[arg(long)]
    nbar: Option<usize>,
    /// Inducing-point count.
    #[arg(long)]
    m: Option<usize>,
    /// Inducing template: qnorm or wimse.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit local surrogates to a training CSV and predict at test sites.
    Predict {
        #[command(flatten)]
        common: CommonFlags,
        /// Training data CSV with header x1,...,xd,y.
        #[arg(long)]
        train: PathBuf,
        /// Test sites CSV with header x1,...,xd (a trailing y is ignored).
        #[arg(long)]
        test: PathBuf,
    },
    /// Run a named benchmark experiment end to end.
    Benchmark {
        #[command(flatten)]
        common: CommonFlags,
        /// Benchmark name: herbie or sir.
        #[arg(long)]
        spec: String,
    },
    /// Price a Bermudan max-call option with the surrogate chain.
    Price {
        #[command(flatten)]
        common: CommonFlags,
        /// Validate and echo the resolved configuration without simulating.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the built-in dense-oracle invariant suite.
    Selfcheck,
}

fn merge_flags(map: &mut BTreeMap<String, String>, common: &CommonFlags) {
    if let Some(v) = common.seed {
        map.insert("seed".into(), v.to_string());
    }
    if let Some(v) = common.workers {
        map.insert("workers".into(), v.to_string());
    }
    if let Some(v) = common.nbar {
        map.insert("nbar".into(), v.to_string());
    }
    if let Some(v) = common.m {
        map.insert("m".into(), v.to_string());
    }
    if let Some(v) = &common.template {
        map.insert("template".into(), v.clone());
    }
}

fn get_u64(map: &BTreeMap<String, String>, key: &str) -> Result<u64> {
    map[key]
        .parse()
        .map_err(|_| Error::Config(format!("{key} must be an integer, got '{}'", map[key])))
}

fn get_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    map[key]
        .parse()
        .map_err(|_| Error::Config(format!("{key} must be an integer, got '{}'", map[key])))
}

fn get_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    map[key]
        .parse()
        .map_err(|_| Error::Config(format!("{key} must be a number, got '{}'", map[key])))
}

fn get_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match map[key].as_str() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key} must be a boolean, got '{other}'"))),
    }
}

/// A scalar broadcast to `d` entries, or a comma-separated list of `d`.
fn get_vec_f64(map: &BTreeMap<String, String>, key: &str, d: usize) -> Result<Vec<f64>> {
    let raw = &map[key];
    let parts: Vec<&str> = raw.split(',').map(|s| s.trim()).collect();
    let values: Vec<f64> = parts
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: '{s}' is not a number")))
        })
        .collect::<Result<_>>()?;
    match values.len() {
        1 => Ok(vec![values[0]; d]),
        n if n == d => Ok(values),
        n => Err(Error::Config(format!(
            "{key} needs 1 or {d} values, got {n}"
        ))),
    }
}

fn template_kind(map: &BTreeMap<String, String>) -> Result<TemplateKind> {
    match map["template"].as_str() {
        "qnorm" => Ok(TemplateKind::Qnorm),
        "wimse" => Ok(TemplateKind::Wimse),
        other => Err(Error::Config(format!(
            "template must be qnorm or wimse, got '{other}'"
        ))),
    }
}

fn ligp_config(map: &BTreeMap<String, String>, dim: usize) -> Result<LigpConfig> {
    let fixed_theta = match map["theta"].as_str() {
        "estimate" => None,
        raw => Some(raw.parse().map_err(|_| {
            Error::Config(format!("theta must be 'estimate' or a number, got '{raw}'"))
        })?),
    };
    let m = match map["m"].as_str() {
        "auto" => None,
        raw => Some(raw.parse().map_err(|_| {
            Error::Config(format!("m must be 'auto' or an integer, got '{raw}'"))
        })?),
    };
    let cfg = LigpConfig {
        nbar: get_usize(map, "nbar")?,
        m,
        template: template_kind(map)?,
        estimate_nugget: get_bool(map, "estimate_nugget")?,
        fixed_theta,
        use_priors: get_bool(map, "use_priors")?,
        workers: get_usize(map, "workers")?,
        seed: get_u64(map, "seed")?,
        ..LigpConfig::default()
    };
    let _ = dim;
    Ok(cfg)
}

fn base_defaults() -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for (k, v) in [
        ("seed", "0"),
        ("workers", "0"),
        ("nbar", "100"),
        ("m", "auto"),
        ("template", "qnorm"),
        ("estimate_nugget", "true"),
        ("theta", "estimate"),
        ("use_priors", "true"),
        ("prescale", "on"),
        ("prescale_subset", "1000"),
    ] {
        map.insert(k.to_string(), v.to_string());
    }
    map
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> Result<i32> {
    let cli = Cli::parse();
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Predict { common, train, test } => cmd_predict(&common, &train, &test),
        Command::Benchmark { common, spec } => cmd_benchmark(&common, &spec),
        Command::Price { common, dry_run } => cmd_price(&common, dry_run),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn resolve(common: &CommonFlags, defaults: BTreeMap<String, String>) -> Result<BTreeMap<String, String>> {
    let mut map = defaults;
    if let Some(path) = &common.config {
        for (k, v) in load_config_file(path)? {
            map.insert(k, v);
        }
    }
    merge_flags(&mut map, common);
    Ok(map)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn fit_design_prescale(
    raw: &RawDesign,
    map: &BTreeMap<String, String>,
) -> Result<PrescaleTransform> {
    match map["prescale"].as_str() {
        "off" | "none" => Ok(PrescaleTransform::identity(raw.dim())),
        "on" => fit_prescale(raw, get_usize(map, "prescale_subset")?, get_u64(map, "seed")?),
        other => Err(Error::Config(format!(
            "prescale must be on or off, got '{other}'"
        ))),
    }
}

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// Read test sites from CSV: header `x1,...,xd` with an optional trailing
/// `y` column that is ignored.
fn read_sites_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let d = if cols.last() == Some(&"y") {
        cols.len() - 1
    } else {
        cols.len()
    };
    if d == 0 {
        return Err(Error::invalid("test CSV has no coordinate columns"));
    }
    for (k, name) in cols[..d].iter().enumerate() {
        let expected = format!("x{}", k + 1);
        if *name != expected {
            return Err(Error::invalid(format!(
                "test CSV column {} is named '{name}', expected '{expected}'",
                k + 1
            )));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(d);
        for field in record.iter().take(d) {
            row.push(field.trim().parse::<f64>().map_err(|_| {
                Error::invalid(format!("test CSV field '{field}' is not a number"))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid("test CSV has no rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn write_predictions_csv(
    path: &Path,
    sites: &DMatrix<f64>,
    batch: &crate::model::PredictionBatch,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let d = sites.ncols();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend(["mu".to_string(), "sigma2".to_string(), "status".to_string()]);
    writer.write_record(&header)?;
    for i in 0..sites.nrows() {
        let mut row: Vec<String> = (0..d).map(|k| format_float(sites[(i, k)])).collect();
        row.push(format_float(batch.mu[i]));
        row.push(format_float(batch.sigma2[i]));
        row.push(
            match batch.diagnostics[i].status {
                FitStatus::Ok => "ok",
                FitStatus::Fallback => "fallback",
            }
            .to_string(),
        );
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

fn cmd_predict(common: &CommonFlags, train: &Path, test: &Path) -> Result<i32> {
    let map = resolve(common, base_defaults())?;
    prepare_out_dir(&common.out_dir)?;
    let mut manifest = RunManifest::new("predict", get_u64(&map, "seed")?, map.clone());

    let t0 = std::time::Instant::now();
    let raw = read_design_csv(train)?;
    let sites = read_sites_csv(test)?;
    if sites.ncols() != raw.dim() {
        return Err(Error::invalid(format!(
            "train has dimension {}, test has {}",
            raw.dim(),
            sites.ncols()
        )));
    }
    manifest.record_time("ingest", t0.elapsed().as_secs_f64());

    let t1 = std::time::Instant::now();
    let prescale = fit_design_prescale(&raw, &map)?;
    let compressed = compress(&raw, 0.0)?;
    let design = compressed.with_inputs(apply_prescale(&prescale, compressed.xbar())?)?;
    let scaled_sites = apply_prescale(&prescale, &sites)?;
    manifest.record_time("prescale", t1.elapsed().as_secs_f64());

    let t2 = std::time::Instant::now();
    let cfg = ligp_config(&map, raw.dim())?;
    let batch = predict_batch(&design, &scaled_sites, &cfg)?;
    manifest.record_time("predict", t2.elapsed().as_secs_f64());

    let pred_path = common.out_dir.join("predictions.csv");
    write_predictions_csv(&pred_path, &sites, &batch)?;
    manifest.record_output(&pred_path)?;
    manifest.write(&common.out_dir.join("manifest.json"))?;

    let fallbacks = batch.fallback_count();
    if fallbacks > 0 {
        eprintln!("{fallbacks} of {} sites used the fallback prediction", sites.nrows());
        return Ok(3);
    }
    Ok(0)
}

fn benchmark_defaults() -> BTreeMap<String, String> {
    let mut map = base_defaults();
    for (k, v) in [
        ("nbar_sites", "2000"),
        ("replication", "fixed:10"),
        ("test_size", "2000"),
        ("score", "variance"),
    ] {
        map.insert(k.to_string(), v.to_string());
    }
    map
}

fn parse_replication(raw: &str) -> Result<ReplicationRule> {
    let Some((kind, count)) = raw.split_once(':') else {
        return Err(Error::Config(format!(
            "replication must be fixed:<a> or uniform:<max>, got '{raw}'"
        )));
    };
    let count: u32 = count
        .parse()
        .map_err(|_| Error::Config(format!("replication count '{count}' is not an integer")))?;
    match kind {
        "fixed" => Ok(ReplicationRule::Fixed(count)),
        "uniform" => Ok(ReplicationRule::UniformUpTo(count)),
        other => Err(Error::Config(format!("unknown replication rule '{other}'"))),
    }
}

fn cmd_benchmark(common: &CommonFlags, spec_name: &str) -> Result<i32> {
    let map = resolve(common, benchmark_defaults())?;
    prepare_out_dir(&common.out_dir)?;
    let simulator = match spec_name {
        "herbie" => SimulatorId::Herbie,
        "sir" => SimulatorId::Sir,
        other => {
            return Err(Error::invalid(format!(
                "unknown benchmark spec '{other}' (expected herbie or sir)"
            )))
        }
    };
    let mut resolved = map.clone();
    resolved.insert("spec".into(), spec_name.into());
    let seed = get_u64(&map, "seed")?;
    let mut manifest = RunManifest::new("benchmark", seed, resolved);

    let spec = BenchmarkSpec {
        simulator,
        nbar_sites: get_usize(&map, "nbar_sites")?,
        replication: parse_replication(&map["replication"])?,
        test_size: get_usize(&map, "test_size")?,
        seed,
    };
    let score_variant = match map["score"].as_str() {
        "variance" => ScoreVariant::VariancePenalty,
        "logvariance" => ScoreVariant::LogVariancePenalty,
        other => {
            return Err(Error::Config(format!(
                "score must be variance or logvariance, got '{other}'"
            )))
        }
    };

    let t0 = std::time::Instant::now();
    let raw = make_design(&spec)?;
    let (test_sites, y_test) = make_test_set(&spec);
    manifest.record_time("generate", t0.elapsed().as_secs_f64());

    let design_path = common.out_dir.join("design.csv");
    write_design_csv(&design_path, &raw)?;

    let t1 = std::time::Instant::now();
    let prescale = fit_design_prescale(&raw, &map)?;
    let compressed = compress(&raw, 0.0)?;
    let design = compressed.with_inputs(apply_prescale(&prescale, compressed.xbar())?)?;
    let scaled_sites = apply_prescale(&prescale, &test_sites)?;
    manifest.record_time("prescale", t1.elapsed().as_secs_f64());

    let t2 = std::time::Instant::now();
    let cfg = ligp_config(&map, raw.dim())?;
    let batch = predict_batch(&design, &scaled_sites, &cfg)?;
    let wall = t2.elapsed().as_secs_f64();
    manifest.record_time("predict", wall);

    let truth: Option<DVector<f64>> = match simulator {
        SimulatorId::Herbie => Some(DVector::from_fn(test_sites.nrows(), |i, _| {
            crate::bench::herbie_mean(&[test_sites[(i, 0)], test_sites[(i, 1)]])
        })),
        SimulatorId::Sir => None,
    };
    let report = metrics(
        &batch.mu,
        &batch.sigma2,
        &y_test,
        truth.as_ref(),
        score_variant,
        wall,
    )?;

    let metrics_path = common.out_dir.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report).expect("metrics encode"),
    )?;

    let pred_path = common.out_dir.join("predictions.csv");
    write_predictions_csv(&pred_path, &test_sites, &batch)?;

    // plot data: site coordinates, fitted mean, reference response, variance
    let plot_path = common.out_dir.join("plotdata.csv");
    {
        let mut writer = csv::Writer::from_path(&plot_path)?;
        let d = test_sites.ncols();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        header.extend(["mean".to_string(), "truth".to_string(), "variance".to_string()]);
        writer.write_record(&header)?;
        for i in 0..test_sites.nrows() {
            let mut row: Vec<String> = (0..d).map(|k| format_float(test_sites[(i, k)])).collect();
            row.push(format_float(batch.mu[i]));
            let reference = truth.as_ref().map(|t| t[i]).unwrap_or(y_test[i]);
            row.push(format_float(reference));
            row.push(format_float(batch.sigma2[i]));
            writer.write_record(&row)?;
        }
        writer.flush()?;
    }

    manifest.record_output(&design_path)?;
    manifest.record_output(&pred_path)?;
    manifest.record_output(&metrics_path)?;
    manifest.record_output(&plot_path)?;
    manifest.write(&common.out_dir.join("manifest.json"))?;

    println!(
        "{spec_name}: rmse {:.6} score {:.4} wall {:.2}s",
        report.rmse, report.score, report.wall_time
    );
    if batch.fallback_count() > 0 {
        return Ok(3);
    }
    Ok(0)
}

fn price_defaults() -> BTreeMap<String, String> {
    let mut map = base_defaults();
    for (k, v) in [
        ("d", "2"),
        ("r", "0.05"),
        ("strike", "100"),
        ("dt", "0.3333333333333333"),
        ("k_steps", "9"),
        ("delta", "0.1"),
        ("sigma", "0.2"),
        ("x0", "90"),
        ("design_nbar", "650"),
        ("design_reps", "25"),
        ("sampling", "lhs:50:150"),
        ("n_paths", "25000"),
        ("boundary_grid", "21"),
        ("nbar", "50"),
        ("m", "10"),
        ("theta", "1"),
    ] {
        map.insert(k.to_string(), v.to_string());
    }
    map
}

fn parse_sampling(raw: &str, d: usize) -> Result<SiteSampling> {
    if raw == "lognormal" {
        return Ok(SiteSampling::LognormalDensity);
    }
    if let Some(rest) = raw.strip_prefix("lhs:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!(
                "sampling must be lognormal or lhs:<lo>:<hi>, got '{raw}'"
            )));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| Error::Config(format!("sampling bound '{}' is not a number", parts[0])))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("sampling bound '{}' is not a number", parts[1])))?;
        if !(lo < hi) {
            return Err(Error::Config("sampling bounds must be ordered".into()));
        }
        return Ok(SiteSampling::LhsSubdomain(vec![(lo, hi); d]));
    }
    Err(Error::Config(format!(
        "sampling must be lognormal or lhs:<lo>:<hi>, got '{raw}'"
    )))
}

#[derive(serde::Serialize)]
struct PricingOutput {
    price: f64,
    std_error: f64,
    n_paths: usize,
    european_reference: f64,
    european_std_error: f64,
    exercise_rate: Vec<f64>,
    step_fit_wall: Vec<f64>,
}

fn cmd_price(common: &CommonFlags, dry_run: bool) -> Result<i32> {
    let map = resolve(common, price_defaults())?;
    let d = get_usize(&map, "d")?;
    let model = GbmModel {
        d,
        r: get_f64(&map, "r")?,
        delta: get_vec_f64(&map, "delta", d)?,
        sigma: get_vec_f64(&map, "sigma", d)?,
        dt: get_f64(&map, "dt")?,
        k_steps: get_usize(&map, "k_steps")?,
        x0: get_vec_f64(&map, "x0", d)?,
    };
    model.validate()?;
    let payoff_spec = MaxCallPayoff {
        strike: get_f64(&map, "strike")?,
        r: model.r,
        dt: model.dt,
    };
    let mut spec = ChainDesignSpec::new(
        get_usize(&map, "design_nbar")?,
        get_usize(&map, "design_reps")? as u32,
        parse_sampling(&map["sampling"], d)?,
    );
    spec.prescale_subset = get_usize(&map, "prescale_subset")?;
    let cfg = ligp_config(&map, d)?;
    let seed = get_u64(&map, "seed")?;

    if dry_run {
        print!("{}", format_flat_config(&map));
        return Ok(0);
    }

    prepare_out_dir(&common.out_dir)?;
    let mut manifest = RunManifest::new("price", seed, map.clone());

    let t0 = std::time::Instant::now();
    let chain = fit_chain(&model, &payoff_spec, &spec, &cfg, seed)?;
    manifest.record_time("fit_chain", t0.elapsed().as_secs_f64());

    let t1 = std::time::Instant::now();
    let n_paths = get_usize(&map, "n_paths")?;
    let result = price(&chain, n_paths, seed ^ 0x9e3779b97f4a7c15);
    let (eur, eur_se) = european_price(&model, &payoff_spec, n_paths, seed ^ 0x9e3779b97f4a7c15);
    manifest.record_time("price", t1.elapsed().as_secs_f64());

    let pricing_path = common.out_dir.join("pricing.json");
    let output = PricingOutput {
        price: result.price,
        std_error: result.std_error,
        n_paths: result.n_paths,
        european_reference: eur,
        european_std_error: eur_se,
        exercise_rate: result.exercise_rate.clone(),
        step_fit_wall: result.step_fit_wall.clone(),
    };
    std::fs::write(
        &pricing_path,
        serde_json::to_string_pretty(&output).expect("pricing encode"),
    )?;

    // timing-value grid over the first two price dimensions, for boundary
    // plots; other coordinates held at the initial price
    let boundary_path = common.out_dir.join("boundary.csv");
    let grid = get_usize(&map, "boundary_grid")?;
    {
        let mut writer = csv::Writer::from_path(&boundary_path)?;
        writer.write_record(["step", "x1", "x2", "timing_value"])?;
        if grid > 1 {
            let strike = payoff_spec.strike;
            let (lo, hi) = (0.5 * strike, 1.5 * strike);
            for surrogate in &chain.steps {
                for gi in 0..grid {
                    for gj in 0..grid {
                        let x1 = lo + (hi - lo) * gi as f64 / (grid - 1) as f64;
                        let x2 = lo + (hi - lo) * gj as f64 / (grid - 1) as f64;
                        let mut x = model.x0.clone();
                        x[0] = x1;
                        if d > 1 {
                            x[1] = x2;
                        }
                        if !payoff_spec.is_itm(&x) {
                            continue;
                        }
                        let t = surrogate.timing_value(&x);
                        writer.write_record(&[
                            surrogate.step.to_string(),
                            format_float(x1),
                            format_float(x2),
                            format_float(t),
                        ])?;
                    }
                }
            }
        }
        writer.flush()?;
    }

    manifest.record_output(&pricing_path)?;
    manifest.record_output(&boundary_path)?;
    manifest.write(&common.out_dir.join("manifest.json"))?;

    println!(
        "price {:.4} (se {:.4}), european reference {eur:.4} (se {eur_se:.4})",
        result.price, result.std_error
    );
    Ok(0)
}

/// Compact dense-oracle invariant suite exposed as a subcommand. The oracle
/// here is written independently of the test suite's, so the two dense
/// constructions cross-check each other.
fn cmd_selfcheck() -> Result<i32> {
    use crate::neighborhood::{build_index, neighborhood};
    use crate::templates::InducingSet;
    use crate::woodbury::{
        build_system, concentrated_nll, concentrated_nll_grad, log_det_sigma, quad_form,
        tau2_decomposition, tau2_mle,
    };
    use rand::Rng;

    let policy = crate::kernel::JitterPolicy {
        eps_k: 1e-10,
        eps_q: 1e-12,
        growth_factor: 10.0,
        max_attempts: 4,
    };
    let mut failures = 0;

    let kernel = |a: &[f64], b: &[f64], theta: f64| -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / theta).exp()
    };

    let mut max_logdet_err = 0.0f64;
    let mut max_quad_err = 0.0f64;
    let mut max_tau2_err = 0.0f64;
    let mut max_grad_err = 0.0f64;
    let mut max_dec_err = 0.0f64;

    for trial in 0..20u64 {
        let mut rng = crate::rng::stream(0xc0ffee, "selfcheck", &[trial]);
        let d = rng.random_range(1..=3usize);
        let nbar = rng.random_range(3..=10usize);
        let m = rng.random_range(1..=4usize);
        let theta = rng.random_range(0.4..1.5);
        let g = rng.random_range(0.02..0.4);

        // unique sites, replicates, thinned inducing points
        let xbar = DMatrix::from_fn(nbar, d, |_, _| rng.random_range(0.0..2.0));
        let a: Vec<usize> = (0..nbar).map(|_| rng.random_range(1..=3)).collect();
        let mut psi = DMatrix::zeros(m, d);
        for l in 0..m {
            for k in 0..d {
                psi[(l, k)] = 2.2 * (l as f64 + rng.random_range(0.25..0.75)) / m as f64 - 0.1;
            }
        }
        let mut rows = Vec::new();
        for i in 0..nbar {
            for _ in 0..a[i] {
                let site: Vec<f64> = (0..d).map(|k| xbar[(i, k)]).collect();
                rows.push((site, rng.random_range(-1.0..1.0)));
            }
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i].0[j]);
        let y = DVector::from_fn(n, |i, _| rows[i].1);

        let design = compress(&RawDesign::new(x.clone(), y.clone()).unwrap(), 0.0)?;
        let index = build_index(&design);
        let xp = DVector::from_element(d, 1.0);
        let neigh = neighborhood(&index, &design, &xp, nbar)?;
        let psi_set = InducingSet {
            psi: psi.clone(),
            anchor: xp.clone(),
        };
        let sys = build_system(&design, &neigh, &psi_set, theta, g, &policy)?;

        // dense oracle inside the CLI, from scratch
        let mut kmm =
            DMatrix::from_fn(m, m, |i, j| {
                kernel(
                    &(0..d).map(|k| psi[(i, k)]).collect::<Vec<_>>(),
                    &(0..d).map(|k| psi[(j, k)]).collect::<Vec<_>>(),
                    theta,
                )
            });
        for l in 0..m {
            kmm[(l, l)] += sys.jitter_k();
        }
        let kinv = nalgebra::Cholesky::new(kmm)
            .ok_or_else(|| Error::numerical("selfcheck oracle K"))?
            .inverse();
        let knm = DMatrix::from_fn(n, m, |i, l| {
            kernel(
                &rows[i].0,
                &(0..d).map(|k| psi[(l, k)]).collect::<Vec<_>>(),
                theta,
            )
        });
        let low = &knm * &kinv * knm.transpose();
        let mut sigma0 = low.clone();
        for i in 0..n {
            sigma0[(i, i)] += 1.0 - low[(i, i)] + g;
        }
        let chol = nalgebra::Cholesky::new(sigma0)
            .ok_or_else(|| Error::numerical("selfcheck oracle sigma"))?;
        let dense_logdet: f64 =
            2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let dense_quad = y.dot(&chol.solve(&y));

        let tau2 = rng.random_range(0.5..2.0);
        let err = (log_det_sigma(&sys, tau2) - (dense_logdet + n as f64 * tau2.ln())).abs();
        max_logdet_err = max_logdet_err.max(err);
        if err > 1e-8 {
            failures += 1;
        }

        let err = (quad_form(&sys) - dense_quad).abs() / dense_quad.abs().max(1e-300);
        max_quad_err = max_quad_err.max(err);
        if err > 1e-9 {
            failures += 1;
        }

        let mle = tau2_mle(&sys)?;
        let err = (mle - dense_quad / n as f64).abs() / mle;
        max_tau2_err = max_tau2_err.max(err);
        if err > 1e-9 {
            failures += 1;
        }

        let dec = tau2_decomposition(&sys)?;
        let err = (dec.tau2_hat - mle).abs() / mle;
        max_dec_err = max_dec_err.max(err);
        if err > 1e-9 {
            failures += 1;
        }

        // analytic gradient vs central differences
        let (dt, dg) = concentrated_nll_grad(&design, &neigh, &psi_set, theta, g, &policy, None)?;
        let h = 1e-5;
        let f =
            |t: f64, gg: f64| concentrated_nll(&design, &neigh, &psi_set, t, gg, &policy, None);
        let fd_t = (f(theta * (1.0 + h), g)? - f(theta * (1.0 - h), g)?) / (2.0 * theta * h);
        let fd_g = (f(theta, g * (1.0 + h))? - f(theta, g * (1.0 - h))?) / (2.0 * g * h);
        let err = ((dt - fd_t).abs() / fd_t.abs().max(1e-8))
            .max((dg - fd_g).abs() / fd_g.abs().max(1e-8));
        max_grad_err = max_grad_err.max(err);
        if err > 1e-4 {
            failures += 1;
        }
    }

    let verdict = |err: f64, tol: f64| if err <= tol { "ok" } else { "FAIL" };
    println!(
        "selfcheck log-determinant vs dense: max abs err {max_logdet_err:.3e} [{}]",
        verdict(max_logdet_err, 1e-8)
    );
    println!(
        "selfcheck quadratic form vs dense:  max rel err {max_quad_err:.3e} [{}]",
        verdict(max_quad_err, 1e-9)
    );
    println!(
        "selfcheck tau2 MLE vs dense:        max rel err {max_tau2_err:.3e} [{}]",
        verdict(max_tau2_err, 1e-9)
    );
    println!(
        "selfcheck tau2 decomposition:       max rel err {max_dec_err:.3e} [{}]",
        verdict(max_dec_err, 1e-9)
    );
    println!(
        "selfcheck gradient vs differences:  max rel err {max_grad_err:.3e} [{}]",
        verdict(max_grad_err, 1e-4)
    );

    if failures > 0 {
        eprintln!("selfcheck found {failures} violations");
        return Ok(2);
    }
    println!("selfcheck passed");
    Ok(0)
}

/// Map an error onto the documented exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Config(_) | Error::Io(_) | Error::Csv(_) => 1,
        Error::Numerical(_) | Error::Fit(_) => 2,
    }
}
