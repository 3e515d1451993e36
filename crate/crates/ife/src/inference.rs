//! Analytic bias corrections, covariance estimators, and tests.
//!
//! The fitted slope coefficients carry asymptotic biases when the errors are
//! heteroskedastic or serially correlated, or when regressors are only
//! weakly exogenous. This module computes the three corresponding correction
//! terms, three covariance estimators (homoskedastic, heteroskedasticity
//! robust, clustered by unit), z-tests, and delta-method long-run effects.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::{check_rcond, IfeFit};
use crate::panel::PanelData;
use crate::residualize::{map_residualize, ResidualKind, MAP_MAX_SWEEPS, MAP_TOL};

/// Truncation lags for the serial-correlation corrections.
#[derive(Debug, Clone, Copy)]
pub struct BiasBandwidths {
    /// Lags for the weak-exogeneity correction.
    pub l: usize,
    /// Lags for the serial-correlation part of the second correction.
    pub m: usize,
}

impl BiasBandwidths {
    pub fn new(l: usize, m: usize) -> Self {
        Self { l, m }
    }

    /// Bandwidth rule of thumb `M = round(4 (t_bar / 100)^{2/9})`.
    pub fn newey_west_m(t_bar: f64) -> usize {
        (4.0 * (t_bar / 100.0).powf(2.0 / 9.0)).round() as usize
    }
}

/// Covariance estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcovKind {
    Homoskedastic,
    HeteroskedasticRobust,
    ClusteredByUnit,
}

/// Which bias terms are added to the corrected estimator.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionSet {
    pub b: bool,
    pub c1: bool,
    pub c2: bool,
}

impl CorrectionSet {
    pub fn all() -> Self {
        Self {
            b: true,
            c1: true,
            c2: true,
        }
    }

    pub fn none() -> Self {
        Self {
            b: false,
            c1: false,
            c2: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub bandwidths: BiasBandwidths,
    pub vcov: VcovKind,
    pub dof_adjust: bool,
    pub corrections: CorrectionSet,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            bandwidths: BiasBandwidths::new(0, 0),
            vcov: VcovKind::Homoskedastic,
            dof_adjust: false,
            corrections: CorrectionSet::all(),
        }
    }
}

/// Bias-corrected coefficients with a covariance estimate.
#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub beta_hat: DVector<f64>,
    /// Correction terms premultiplied by the inverse regressor Gram.
    pub b_hat: DVector<f64>,
    pub c1_hat: DVector<f64>,
    pub c2_hat: DVector<f64>,
    /// Corrected coefficients (only the selected terms are added).
    pub beta_tilde: DVector<f64>,
    pub corrections: CorrectionSet,
    pub d_matrix: DMatrix<f64>,
    pub vcov_kind: VcovKind,
    pub vcov: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    /// z statistics against zero nulls.
    pub z_stats: DVector<f64>,
    pub dof_adjusted: bool,
}

/// Low-rank projector `L (L'L)^-1 (F'F)^-1 F'` used by the correction terms.
pub fn theta_matrix(fit: &IfeFit) -> Result<DMatrix<f64>> {
    let lam = &fit.factor.loadings;
    let f = &fit.factor.factors;
    if fit.factor.r() == 0 {
        return Ok(DMatrix::zeros(lam.nrows(), f.nrows()));
    }
    let ll = (lam.transpose() * lam)
        .pseudo_inverse(1e-12)
        .map_err(|_| Error::SpectrumFailure)?;
    let ff = (f.transpose() * f)
        .pseudo_inverse(1e-12)
        .map_err(|_| Error::SpectrumFailure)?;
    Ok(lam * ll * ff * f.transpose())
}

/// Projection matrix onto the column span of the factors, via the
/// pseudoinverse so rank-deficient factors are handled.
fn factor_projector(fit: &IfeFit) -> Result<DMatrix<f64>> {
    let f = &fit.factor.factors;
    if fit.factor.r() == 0 {
        return Ok(DMatrix::zeros(f.nrows(), f.nrows()));
    }
    let ff = (f.transpose() * f)
        .pseudo_inverse(1e-12)
        .map_err(|_| Error::SpectrumFailure)?;
    Ok(f * ff * f.transpose())
}

fn residualized_x(fit: &IfeFit, d: &PanelData, kind: ResidualKind) -> Result<Vec<DMatrix<f64>>> {
    (0..d.n_regressors())
        .map(|k| map_residualize(d.x(k), &fit.factor, kind, d, MAP_TOL, MAP_MAX_SWEEPS))
        .collect()
}

fn gram_over_observed(d: &PanelData, cols: &[DMatrix<f64>]) -> DMatrix<f64> {
    let k = cols.len();
    let mut g = DMatrix::zeros(k, k);
    for o in d.observed() {
        for a in 0..k {
            let xa = cols[a][(o.unit, o.period)];
            for b in a..k {
                g[(a, b)] += xa * cols[b][(o.unit, o.period)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// Gram matrix of the doubly residualized regressors over the observed cells.
pub fn d_matrix(fit: &IfeFit, d: &PanelData) -> Result<DMatrix<f64>> {
    let x_breve = residualized_x(fit, d, ResidualKind::Breve)?;
    let g = gram_over_observed(d, &x_breve);
    check_rcond(&g)?;
    Ok(g)
}

struct Workspace {
    x_breve: Vec<DMatrix<f64>>,
    d_mat: DMatrix<f64>,
    d_inv: DMatrix<f64>,
}

impl Workspace {
    fn new(fit: &IfeFit, d: &PanelData) -> Result<Self> {
        let x_breve = residualized_x(fit, d, ResidualKind::Breve)?;
        let d_mat = gram_over_observed(d, &x_breve);
        check_rcond(&d_mat)?;
        let d_inv = nalgebra::Cholesky::new(d_mat.clone())
            .ok_or(Error::Collinear { rcond: 0.0 })?
            .inverse();
        Ok(Self {
            x_breve,
            d_mat,
            d_inv,
        })
    }
}

fn raw_bias_terms(
    fit: &IfeFit,
    d: &PanelData,
    bw: BiasBandwidths,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let k = d.n_regressors();
    if fit.factor.r() == 0 {
        return Ok((DVector::zeros(k), DVector::zeros(k), DVector::zeros(k)));
    }
    let theta = theta_matrix(fit)?;
    let p_f = factor_projector(fit)?;
    let e = &fit.residuals;

    // Squared-residual sums along rows and columns of the observed set.
    let mut e2_row = vec![0.0; d.n_units()];
    let mut e2_col = vec![0.0; d.n_periods()];
    for o in d.observed() {
        let e2 = e[(o.unit, o.period)] * e[(o.unit, o.period)];
        e2_row[o.unit] += e2;
        e2_col[o.period] += e2;
    }

    let x_grave = residualized_x(fit, d, ResidualKind::Grave)?;
    let x_acute = residualized_x(fit, d, ResidualKind::Acute)?;

    let mut b_raw = DVector::zeros(k);
    let mut c1_raw = DVector::zeros(k);
    let mut c2_raw = DVector::zeros(k);

    for c in 0..k {
        // Diagonal of P_D(grave x) theta' weighted by row residual mass.
        let mut b = 0.0;
        for (i, periods) in d.unit_rows().iter().enumerate() {
            let diag: f64 = periods.iter().map(|&s| x_grave[c][(i, s)] * theta[(i, s)]).sum();
            b += e2_row[i] * diag;
        }
        b_raw[c] = b;

        // Weak-exogeneity term: off-diagonals of the factor projector paired
        // with lagged residuals and the raw regressor.
        let mut c1 = 0.0;
        if bw.l > 0 {
            let xk = d.x(c);
            for (i, periods) in d.unit_rows().iter().enumerate() {
                for &t in periods {
                    for l in 1..=bw.l {
                        if t >= l && d.is_observed(i, t - l) {
                            c1 += p_f[(t, t - l)] * e[(i, t - l)] * xk[(i, t)];
                        }
                    }
                }
            }
        }
        c1_raw[c] = c1;

        // G = P_D(acute x)' theta, a periods-by-periods matrix.
        let g = x_acute[c].transpose() * &theta;
        let mut c2 = 0.0;
        for (t, _) in d.period_cols().iter().enumerate() {
            c2 += e2_col[t] * g[(t, t)];
        }
        if bw.m > 0 {
            for (i, periods) in d.unit_rows().iter().enumerate() {
                for &t in periods {
                    for m in 1..=bw.m {
                        if t >= m && d.is_observed(i, t - m) {
                            c2 += e[(i, t)] * e[(i, t - m)] * (g[(t, t - m)] + g[(t - m, t)]);
                        }
                    }
                }
            }
        }
        c2_raw[c] = c2;
    }
    Ok((b_raw, c1_raw, c2_raw))
}

/// The three correction terms, premultiplied by the inverse of the
/// residualized regressor Gram matrix.
pub fn bias_terms(
    fit: &IfeFit,
    d: &PanelData,
    bw: BiasBandwidths,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let ws = Workspace::new(fit, d)?;
    let (b_raw, c1_raw, c2_raw) = raw_bias_terms(fit, d, bw)?;
    Ok((&ws.d_inv * b_raw, &ws.d_inv * c1_raw, &ws.d_inv * c2_raw))
}

/// Parameters absorbed by the fit: the slopes plus the free factor-structure
/// dimensions. Reduces to `K` when no factors are estimated.
fn model_dof(fit: &IfeFit, d: &PanelData) -> f64 {
    let r = fit.factor.r() as f64;
    let k = d.n_regressors() as f64;
    let n_units = d.n_units() as f64;
    let n_periods = d.n_periods() as f64;
    k + r * (n_units + n_periods - r)
}

fn covariance_from_ws(
    ws: &Workspace,
    fit: &IfeFit,
    d: &PanelData,
    kind: VcovKind,
    dof_adjust: bool,
) -> DMatrix<f64> {
    let k = d.n_regressors();
    let n = d.n_obs() as f64;
    let p = model_dof(fit, d);
    let residual_dof = (n - p).max(1.0);
    match kind {
        VcovKind::Homoskedastic => {
            let mut v = &ws.d_inv * fit.sigma2;
            if dof_adjust {
                v *= n / residual_dof;
            }
            v
        }
        VcovKind::HeteroskedasticRobust => {
            let mut omega = DMatrix::zeros(k, k);
            for o in d.observed() {
                let e2 = fit.residuals[(o.unit, o.period)].powi(2);
                for a in 0..k {
                    let xa = ws.x_breve[a][(o.unit, o.period)];
                    for b in a..k {
                        omega[(a, b)] += e2 * xa * ws.x_breve[b][(o.unit, o.period)];
                    }
                }
            }
            symmetrize(&mut omega);
            let mut v = &ws.d_inv * omega * &ws.d_inv;
            if dof_adjust {
                v *= n / residual_dof;
            }
            v
        }
        VcovKind::ClusteredByUnit => {
            let mut omega = DMatrix::zeros(k, k);
            let mut score = DVector::zeros(k);
            for (i, periods) in d.unit_rows().iter().enumerate() {
                score.fill(0.0);
                for &t in periods {
                    let e = fit.residuals[(i, t)];
                    for a in 0..k {
                        score[a] += e * ws.x_breve[a][(i, t)];
                    }
                }
                for a in 0..k {
                    for b in a..k {
                        omega[(a, b)] += score[a] * score[b];
                    }
                }
            }
            symmetrize(&mut omega);
            let mut v = &ws.d_inv * omega * &ws.d_inv;
            if dof_adjust {
                let nf = d.n_units() as f64;
                v *= (nf / (nf - 1.0)) * ((n - 1.0) / residual_dof);
            }
            v
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
}

/// Covariance estimate of the requested kind.
pub fn covariance(
    fit: &IfeFit,
    d: &PanelData,
    kind: VcovKind,
    dof_adjust: bool,
) -> Result<DMatrix<f64>> {
    let ws = Workspace::new(fit, d)?;
    Ok(covariance_from_ws(&ws, fit, d, kind, dof_adjust))
}

/// Full inference pass: corrections, covariance, standard errors, z stats.
pub fn infer(fit: &IfeFit, d: &PanelData, opts: &InferenceOptions) -> Result<InferenceReport> {
    let ws = Workspace::new(fit, d)?;
    let (b_raw, c1_raw, c2_raw) = raw_bias_terms(fit, d, opts.bandwidths)?;
    let b_hat = &ws.d_inv * b_raw;
    let c1_hat = &ws.d_inv * c1_raw;
    let c2_hat = &ws.d_inv * c2_raw;

    let mut beta_tilde = fit.beta.clone();
    if opts.corrections.b {
        beta_tilde += &b_hat;
    }
    if opts.corrections.c1 {
        beta_tilde += &c1_hat;
    }
    if opts.corrections.c2 {
        beta_tilde += &c2_hat;
    }

    let vcov = covariance_from_ws(&ws, fit, d, opts.vcov, opts.dof_adjust);
    let k = d.n_regressors();
    let std_errors = DVector::from_fn(k, |a, _| vcov[(a, a)].max(0.0).sqrt());
    let z_stats = DVector::from_fn(k, |a, _| {
        if std_errors[a] > 0.0 {
            beta_tilde[a] / std_errors[a]
        } else {
            f64::NAN
        }
    });

    Ok(InferenceReport {
        beta_hat: fit.beta.clone(),
        b_hat,
        c1_hat,
        c2_hat,
        beta_tilde,
        corrections: opts.corrections,
        d_matrix: ws.d_mat,
        vcov_kind: opts.vcov,
        vcov,
        std_errors,
        z_stats,
        dof_adjusted: opts.dof_adjust,
    })
}

/// Two-sided z-test of each coefficient against its null value.
pub fn z_test(
    report: &InferenceReport,
    null_values: &[f64],
    level: f64,
) -> Result<Vec<(f64, bool)>> {
    let k = report.beta_tilde.len();
    assert_eq!(null_values.len(), k, "one null per coefficient");
    let crit = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - level / 2.0);
    let mut out = Vec::with_capacity(k);
    for a in 0..k {
        let se = report.std_errors[a];
        if !(se > 0.0) {
            return Err(Error::ZeroStdErr { index: a });
        }
        let z = (report.beta_tilde[a] - null_values[a]) / se;
        out.push((z, z.abs() > crit));
    }
    Ok(out)
}

/// Long-run effect `beta / (1 - sum of gammas)` with a delta-method standard
/// error from the report's covariance.
pub fn long_run_effect(
    beta_index: usize,
    gamma_indices: &[usize],
    report: &InferenceReport,
) -> Result<(f64, f64)> {
    let beta = report.beta_tilde[beta_index];
    let gamma_sum: f64 = gamma_indices.iter().map(|&j| report.beta_tilde[j]).sum();
    let denom = 1.0 - gamma_sum;
    if denom.abs() < 1e-10 {
        return Err(Error::UnitRoot { value: denom });
    }
    let phi = beta / denom;
    let k = report.beta_tilde.len();
    let mut grad = DVector::zeros(k);
    grad[beta_index] = 1.0 / denom;
    for &j in gamma_indices {
        grad[j] += beta / (denom * denom);
    }
    let var = (grad.transpose() * &report.vcov * &grad)[(0, 0)];
    Ok((phi, var.max(0.0).sqrt()))
}
