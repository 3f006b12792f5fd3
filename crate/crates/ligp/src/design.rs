//! Experiment-design ingestion: raw data, replicate compression to sufficient
//! statistics, and global input pre-scaling.
//!
//! Simulation campaigns commonly run the simulator several times at the same
//! input. Everything downstream of ingestion works on the unique inputs only,
//! carrying per-location multiplicities `a_i`, response averages, and sums of
//! squared responses. Those three sufficient statistics are all the
//! likelihood ever needs, so post-ingestion memory is linear in the number of
//! unique locations rather than in the raw run count.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::optim::{minimize, OptimOptions};
use crate::rng::stream;
use crate::stats::quantile_r7_sorted;

/// Raw simulation data: inputs `x` (N x d) with aligned responses `y`.
#[derive(Debug, Clone)]
pub struct RawDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl RawDesign {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("design needs at least one row"));
        }
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "design has {} input rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design entries must be finite"));
        }
        Ok(RawDesign { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// A design compressed to unique inputs with replicate sufficient statistics.
#[derive(Debug, Clone)]
pub struct ReplicatedDesign {
    xbar: DMatrix<f64>,
    a: Vec<u32>,
    ybar: DVector<f64>,
    s: DVector<f64>,
    n_total: usize,
}

impl ReplicatedDesign {
    /// Unique inputs, one per row, in lexicographic order.
    pub fn xbar(&self) -> &DMatrix<f64> {
        &self.xbar
    }

    /// Replicate count at each unique input.
    pub fn multiplicities(&self) -> &[u32] {
        &self.a
    }

    /// Replicate-averaged response at each unique input.
    pub fn ybar(&self) -> &DVector<f64> {
        &self.ybar
    }

    /// Per-location sums of squared responses.
    pub fn sq_sums(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn n_unique(&self) -> usize {
        self.xbar.nrows()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn dim(&self) -> usize {
        self.xbar.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.xbar.row(i).iter().copied().collect()
    }

    /// Replace the inputs with a transformed copy of the same shape, keeping
    /// all response statistics. Used to move a design into pre-scaled
    /// coordinates.
    pub fn with_inputs(&self, xbar: DMatrix<f64>) -> Result<Self> {
        if xbar.nrows() != self.xbar.nrows() {
            return Err(Error::invalid("transformed inputs must keep the row count"));
        }
        Ok(ReplicatedDesign {
            xbar,
            a: self.a.clone(),
            ybar: self.ybar.clone(),
            s: self.s.clone(),
            n_total: self.n_total,
        })
    }

    /// Unbiased per-location replicate variance, `(S_i - a_i*ybar_i^2)/(a_i - 1)`;
    /// zero where a location has a single replicate.
    pub fn replicate_variance(&self, i: usize) -> f64 {
        let a = self.a[i] as f64;
        if a < 2.0 {
            return 0.0;
        }
        ((self.s[i] - a * self.ybar[i] * self.ybar[i]) / (a - 1.0)).max(0.0)
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap() {
            std::cmp::Ordering::Equal => continue,
            ord => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

/// Group raw rows whose coordinates match within `tol` componentwise and
/// compute replicate sufficient statistics.
///
/// The default `tol = 0` groups on exact equality, which is what simulation
/// campaigns emitting genuine replicates produce; positive tolerances exist
/// to repair values damaged by lossy round-trips through text formats.
/// Unique rows come out in lexicographic order regardless of input order.
pub fn compress(raw: &RawDesign, tol: f64) -> Result<ReplicatedDesign> {
    if !(tol >= 0.0) {
        return Err(Error::invalid("compress tolerance must be nonnegative"));
    }
    let n = raw.n();
    let d = raw.dim();

    // sort row indices lexicographically so grouping and output order are
    // independent of input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let a: Vec<f64> = raw.x.row(i).iter().copied().collect();
        let b: Vec<f64> = raw.x.row(j).iter().copied().collect();
        lex_less(&a, &b)
    });

    // walk the sorted rows, opening a new group when the row no longer
    // matches the group representative within tol in every coordinate
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &idx in &order {
        let row: Vec<f64> = raw.x.row(idx).iter().copied().collect();
        let mut joined = false;
        // under sorting, only a suffix of groups can still match on the first
        // coordinate; scan backwards and stop once dim 0 is out of range
        for grp in groups.iter_mut().rev() {
            let rep: Vec<f64> = raw.x.row(grp[0]).iter().copied().collect();
            if (row[0] - rep[0]).abs() > tol {
                break;
            }
            if (0..d).all(|k| (row[k] - rep[k]).abs() <= tol) {
                grp.push(idx);
                joined = true;
                break;
            }
        }
        if !joined {
            groups.push(vec![idx]);
        }
    }

    let nbar = groups.len();
    let mut xbar = DMatrix::zeros(nbar, d);
    let mut a = Vec::with_capacity(nbar);
    let mut ybar = DVector::zeros(nbar);
    let mut s = DVector::zeros(nbar);
    for (gi, grp) in groups.iter().enumerate() {
        // representative coordinates: the lexicographically smallest member,
        // which is the first one under the sorted walk
        for k in 0..d {
            xbar[(gi, k)] = raw.x[(grp[0], k)];
        }
        let ai = grp.len() as f64;
        let sum: f64 = grp.iter().map(|&i| raw.y[i]).sum();
        let sumsq: f64 = grp.iter().map(|&i| raw.y[i] * raw.y[i]).sum();
        a.push(grp.len() as u32);
        ybar[gi] = sum / ai;
        s[gi] = sumsq;
    }

    Ok(ReplicatedDesign {
        xbar,
        a,
        ybar,
        s,
        n_total: n,
    })
}

/// Columnwise positive divisors obtained from square-rooted separable global
/// lengthscales; dividing inputs by them makes an isotropic local kernel
/// appropriate.
#[derive(Debug, Clone)]
pub struct PrescaleTransform {
    divisors: DVector<f64>,
    subset_size: usize,
    fitted: bool,
}

impl PrescaleTransform {
    /// Identity transform (divisors one); counts as fitted.
    pub fn identity(dim: usize) -> Self {
        PrescaleTransform {
            divisors: DVector::from_element(dim, 1.0),
            subset_size: 0,
            fitted: true,
        }
    }

    /// Placeholder that rejects application until a fit replaces it.
    pub fn unfitted(dim: usize) -> Self {
        PrescaleTransform {
            divisors: DVector::from_element(dim, 1.0),
            subset_size: 0,
            fitted: false,
        }
    }

    pub fn divisors(&self) -> &DVector<f64> {
        &self.divisors
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn subset_size(&self) -> usize {
        self.subset_size
    }
}

/// Default number of unique rows used for the global lengthscale fit.
pub const DEFAULT_PRESCALE_SUBSET: usize = 1000;

/// Fit per-dimension global lengthscales on a seeded random subset of unique
/// inputs with averaged responses, and return the square-rooted lengthscales
/// as columnwise divisors.
///
/// The helper model is a dense zero-mean GP with a separable Gaussian kernel
/// and a jointly estimated nugget, fit by concentrated marginal likelihood.
/// Responses are standardized internally; only the lengthscales survive into
/// the transform.
pub fn fit_prescale(raw: &RawDesign, subset_size: usize, seed: u64) -> Result<PrescaleTransform> {
    if subset_size == 0 {
        return Err(Error::invalid("prescale subset size must be positive"));
    }
    let compressed = compress(raw, 0.0)?;
    let nbar = compressed.n_unique();
    let d = compressed.dim();

    let mut idx: Vec<usize> = (0..nbar).collect();
    idx.shuffle(&mut stream(seed, "prescale-subset", &[]));
    idx.truncate(subset_size.min(nbar));
    idx.sort_unstable();
    let n = idx.len();
    if n < 2 {
        return Err(Error::Fit("prescale subset has fewer than two unique inputs".into()));
    }

    let x = DMatrix::from_fn(n, d, |i, j| compressed.xbar()[(idx[i], j)]);
    let y_raw: Vec<f64> = idx.iter().map(|&i| compressed.ybar()[i]).collect();

    let y_mean = crate::stats::mean(&y_raw);
    let y_var = crate::stats::variance(&y_raw);
    if y_var <= 0.0 {
        return Err(Error::Fit(
            "constant response: global lengthscales are not identifiable".into(),
        ));
    }
    let y_sd = y_var.sqrt();
    let y = DVector::from_iterator(n, y_raw.iter().map(|v| (v - y_mean) / y_sd));

    // per-dimension squared-distance matrices and initial lengthscales from
    // the 10% quantile of nonzero per-dimension squared distances
    let mut dist2: Vec<DMatrix<f64>> = Vec::with_capacity(d);
    let mut theta0 = Vec::with_capacity(d);
    let mut any_spread = false;
    for k in 0..d {
        let mut m = DMatrix::zeros(n, n);
        let mut nonzero = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let delta = x[(i, k)] - x[(j, k)];
                let dd = delta * delta;
                m[(i, j)] = dd;
                m[(j, i)] = dd;
                if dd > 0.0 {
                    nonzero.push(dd);
                }
            }
        }
        if !nonzero.is_empty() {
            any_spread = true;
            nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
            theta0.push(quantile_r7_sorted(&nonzero, 0.1).max(1e-9));
        } else {
            theta0.push(1.0);
        }
        dist2.push(m);
    }
    if !any_spread {
        return Err(Error::Fit("prescale subset inputs are all identical".into()));
    }

    // parameters: ln(theta_1..d), ln(g)
    let mut x0: Vec<f64> = theta0.iter().map(|t| t.ln()).collect();
    x0.push((1e-2f64).ln());
    let mut bounds: Vec<(f64, f64)> = theta0
        .iter()
        .map(|t| ((t / 1e3).ln(), (t * 1e3).ln()))
        .collect();
    bounds.push(((1e-8f64).ln(), 1.0f64.ln()));

    let nf = n as f64;
    let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
        let thetas: Vec<f64> = z[..d].iter().map(|v| v.exp()).collect();
        let g = z[d].exp();
        let mut kmat = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut e = 0.0;
                for k in 0..d {
                    e += dist2[k][(i, j)] / thetas[k];
                }
                kmat[(i, j)] = (-e).exp();
            }
            kmat[(i, i)] += g + 1e-8;
        }
        let chol = nalgebra::Cholesky::new(kmat.clone())?;
        let alpha = chol.solve(&y);
        let quad = y.dot(&alpha);
        if quad <= 0.0 {
            return None;
        }
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let f = nf * quad.ln() + logdet;

        let kinv = chol.inverse();
        let mut grad = Vec::with_capacity(d + 1);
        for k in 0..d {
            // dK/d theta_k = K .* dist2_k / theta_k^2, diagonal untouched
            let mut trace = 0.0;
            let mut aka = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let dk = kmat[(i, j)] * dist2[k][(i, j)] / (thetas[k] * thetas[k]);
                    trace += kinv[(i, j)] * dk;
                    aka += alpha[i] * dk * alpha[j];
                }
            }
            let df_dtheta = -nf * aka / quad + trace;
            grad.push(df_dtheta * thetas[k]);
        }
        {
            let trace: f64 = (0..n).map(|i| kinv[(i, i)]).sum();
            let aa = alpha.dot(&alpha);
            let df_dg = -nf * aa / quad + trace;
            grad.push(df_dg * g);
        }
        Some((f, grad))
    };

    let opts = OptimOptions {
        grad_tol: 5e-3,
        f_tol: 1e-9,
        max_iters: 60,
        memory: 8,
    };
    let result = minimize(objective, &x0, &bounds, &opts)
        .ok_or_else(|| Error::Fit("prescale likelihood not evaluable at the initial point".into()))?;

    let divisors = DVector::from_iterator(d, result.x[..d].iter().map(|v| v.exp().sqrt()));
    Ok(PrescaleTransform {
        divisors,
        subset_size: n,
        fitted: true,
    })
}

/// Divide inputs columnwise by the transform's divisors.
pub fn apply_prescale(t: &PrescaleTransform, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !t.fitted {
        return Err(Error::invalid("prescale transform has not been fitted"));
    }
    if x.ncols() != t.divisors.len() {
        return Err(Error::invalid(format!(
            "prescale transform has {} dimensions but input has {}",
            t.divisors.len(),
            x.ncols()
        )));
    }
    let mut out = x.clone();
    for j in 0..out.ncols() {
        let inv = 1.0 / t.divisors[j];
        for i in 0..out.nrows() {
            out[(i, j)] *= inv;
        }
    }
    Ok(out)
}

/// Multiply inputs columnwise by the transform's divisors, exactly undoing
/// [`apply_prescale`] up to floating-point rounding.
pub fn invert_prescale(t: &PrescaleTransform, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !t.fitted {
        return Err(Error::invalid("prescale transform has not been fitted"));
    }
    if x.ncols() != t.divisors.len() {
        return Err(Error::invalid("dimension mismatch in invert_prescale"));
    }
    let mut out = x.clone();
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, j)] *= t.divisors[j];
        }
    }
    Ok(out)
}

/// Read a design from CSV with header `x1,...,xd,y`.
pub fn read_design_csv(path: &std::path::Path) -> Result<RawDesign> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.is_empty() || cols[cols.len() - 1] != "y" {
        return Err(Error::invalid(
            "design CSV must end with a column named 'y'".to_string(),
        ));
    }
    let d = cols.len() - 1;
    for (k, name) in cols[..d].iter().enumerate() {
        let expected = format!("x{}", k + 1);
        if *name != expected {
            return Err(Error::invalid(format!(
                "design CSV column {} is named '{name}', expected '{expected}'",
                k + 1
            )));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d + 1 {
            return Err(Error::invalid(format!(
                "design CSV row {} has {} fields, expected {}",
                line + 2,
                record.len(),
                d + 1
            )));
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::invalid(format!(
                    "design CSV row {} field '{}' is not a number",
                    line + 2,
                    cols[k]
                ))
            })?;
            if k < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::invalid("design CSV has no data rows"));
    }
    let n = ys.len();
    RawDesign::new(
        DMatrix::from_row_slice(n, d, &xs),
        DVector::from_vec(ys),
    )
}

/// Write a design as CSV with the same `x1,...,xd,y` schema the reader
/// expects.
pub fn write_design_csv(path: &std::path::Path, design: &RawDesign) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let d = design.dim();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.push("y".to_string());
    writer.write_record(&header)?;
    for i in 0..design.n() {
        let mut row: Vec<String> = (0..d).map(|k| format!("{}", design.x[(i, k)])).collect();
        row.push(format!("{}", design.y[i]));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
