//! Outer solver: minimize the profile objective over the common parameters
//! by alternating pooled least squares with factor extraction.
//!
//! Each outer iteration updates the slope coefficients by pooled OLS of the
//! outcome net of the current common component, then refreshes the factor
//! structure (through the EM imputation loop when cells are missing). The
//! objective surface is non-convex, so the solver optionally restarts from
//! perturbed initial values and keeps the best run.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::panel::{two_way_within, PanelData};
use crate::pca::{em_impute_from, em_single_step, FactorStructure, EM_MAX_ITER, EM_TOL};

/// Reciprocal-condition threshold below which the regressor Gram matrix is
/// treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

/// Solver options.
#[derive(Debug, Clone)]
pub struct IfeOptions {
    /// Number of factors used in estimation.
    pub r: usize,
    /// Relative change threshold on the coefficient vector.
    pub beta_tol: f64,
    /// Relative change threshold on the objective.
    pub obj_tol: f64,
    /// Outer iteration cap.
    pub max_outer: usize,
    /// Number of starting points (start 0 is the two-way within OLS fit).
    pub n_starts: usize,
    pub rng_seed: u64,
    /// Run the EM imputation to convergence inside every outer iteration
    /// instead of interleaving single EM steps. Both variants share the same
    /// fixed points.
    pub em_to_convergence: bool,
    pub em_tol: f64,
    pub em_max_iter: usize,
}

impl IfeOptions {
    pub fn new(r: usize) -> Self {
        Self {
            r,
            beta_tol: 1e-8,
            obj_tol: 1e-8,
            max_outer: 10_000,
            n_starts: 1,
            rng_seed: 0,
            em_to_convergence: false,
            em_tol: EM_TOL,
            em_max_iter: EM_MAX_ITER,
        }
    }
}

/// A fitted interactive fixed effects model.
#[derive(Debug, Clone)]
pub struct IfeFit {
    pub beta: DVector<f64>,
    pub factor: FactorStructure,
    /// Residuals on the observed cells, zero elsewhere.
    pub residuals: DMatrix<f64>,
    /// Mean squared residual over the observed cells; equals the profile
    /// objective at the fit.
    pub objective: f64,
    /// Error variance estimate, identical to `objective` by construction.
    pub sigma2: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub start_index_of_best: usize,
    /// Observed-cell SSR / n after each outer iteration of the best start.
    pub objective_path: Vec<f64>,
    /// Units observed for at most `r` periods; their loadings are weakly
    /// identified.
    pub weakly_identified_units: Vec<usize>,
}

/// Pooled OLS machinery shared across outer iterations: the regressor Gram
/// matrix over the observed cells is constant, only the right-hand side
/// changes.
struct PooledOls {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl PooledOls {
    fn new(d: &PanelData) -> Result<Self> {
        let k = d.n_regressors();
        let mut xtx = DMatrix::zeros(k, k);
        for o in d.observed() {
            for a in 0..k {
                let xa = d.x_at(a, *o);
                for b in a..k {
                    xtx[(a, b)] += xa * d.x_at(b, *o);
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        check_rcond(&xtx)?;
        let chol = nalgebra::Cholesky::new(xtx).ok_or(Error::Collinear { rcond: 0.0 })?;
        Ok(Self { chol })
    }

    /// Solve for beta in the regression of `y - common` on x over the
    /// observed cells.
    fn solve(&self, d: &PanelData, common: &DMatrix<f64>) -> DVector<f64> {
        let k = d.n_regressors();
        let mut rhs = DVector::zeros(k);
        for o in d.observed() {
            let resid = d.y_at(*o) - common[(o.unit, o.period)];
            for a in 0..k {
                rhs[a] += d.x_at(a, *o) * resid;
            }
        }
        self.chol.solve(&rhs)
    }
}

pub(crate) fn check_rcond(gram: &DMatrix<f64>) -> Result<()> {
    let eigen = nalgebra::SymmetricEigen::new(gram.clone());
    let max = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if !(rcond > RCOND_MIN) {
        return Err(Error::Collinear { rcond });
    }
    Ok(())
}

/// Profile objective at `beta`: run the EM imputation from zero imputations
/// and sum the trailing eigenvalues of the completed matrix's Gram, scaled
/// by 1/n.
pub fn profile_objective(
    d: &PanelData,
    beta: &DVector<f64>,
    r: usize,
    em_tol: f64,
    em_max_iter: usize,
) -> Result<f64> {
    let w = d.w_matrix(beta);
    let out = em_impute_from(&w, r, em_tol, em_max_iter, None)?;
    let spectrum = crate::pca::gram_spectrum(&out.completed)?;
    let tail: f64 = spectrum.iter().skip(r).sum();
    Ok(tail / d.n_obs() as f64)
}

struct StartOutcome {
    fit: IfeFit,
}

fn run_start(
    d: &PanelData,
    start_beta: DVector<f64>,
    start_index: usize,
    ols: &PooledOls,
    opts: &IfeOptions,
) -> Result<StartOutcome> {
    let n = d.n_obs() as f64;
    let r = opts.r;

    let em_phase = |w: &crate::panel::MaskedMatrix,
                    imputed: &DMatrix<f64>|
     -> Result<(FactorStructure, DMatrix<f64>, f64)> {
        if opts.em_to_convergence {
            let out = em_impute_from(w, r, opts.em_tol, opts.em_max_iter, Some(imputed))?;
            let common = out.factor.common_component();
            let ssr = *out.report.objective_path.last().expect("non-empty path");
            Ok((out.factor, common, ssr))
        } else {
            em_single_step(w, r, imputed)
        }
    };

    let mut beta = start_beta;
    let mut w = d.w_matrix(&beta);
    let zeros = DMatrix::zeros(d.n_units(), d.n_periods());
    let (mut fs, mut common, mut ssr) = em_phase(&w, &zeros)?;
    let mut objective = ssr / n;
    let mut path = vec![objective];

    // Scale anchors so the stopping point is exactly equivariant under
    // rescaling of the data.
    let beta_scale = beta.norm();
    let obj_scale = objective;

    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=opts.max_outer {
        iterations = iter;
        let beta_new = ols.solve(d, &common);
        w = d.w_matrix(&beta_new);
        let (fs_new, common_new, ssr_new) = em_phase(&w, &common)?;
        let objective_new = ssr_new / n;
        path.push(objective_new);

        let beta_change = (&beta_new - &beta).norm();
        let obj_change = (objective - objective_new).abs();
        beta = beta_new;
        fs = fs_new;
        common = common_new;
        ssr = ssr_new;
        objective = objective_new;

        if beta_change <= opts.beta_tol * (beta_scale + beta.norm())
            && obj_change <= opts.obj_tol * (obj_scale + objective)
        {
            converged = true;
            break;
        }
    }

    // With interleaved single steps the imputation may lag the coefficient
    // update; polish with a full EM solve at the final beta. When the EM map
    // is too flat to reach its own tolerance, the capped state is kept: it is
    // a descent state consistent with the outer stopping rule.
    if converged && !opts.em_to_convergence && !d.is_balanced() && r > 0 {
        let out = match em_impute_from(&w, r, opts.em_tol, opts.em_max_iter, Some(&common)) {
            Ok(out) => out,
            Err(Error::EmNoConvergence { partial, .. }) => *partial,
            Err(other) => return Err(other),
        };
        fs = out.factor;
        common = fs.common_component();
        ssr = *out.report.objective_path.last().expect("non-empty path");
        objective = ssr / n;
        path.push(objective);
    }

    let mut residuals = DMatrix::zeros(d.n_units(), d.n_periods());
    let mut ssr_check = 0.0;
    for o in d.observed() {
        let e = d.y_at(*o)
            - (0..d.n_regressors()).map(|k| d.x_at(k, *o) * beta[k]).sum::<f64>()
            - common[(o.unit, o.period)];
        residuals[(o.unit, o.period)] = e;
        ssr_check += e * e;
    }
    debug_assert!((ssr_check - ssr).abs() <= 1e-8 * (1.0 + ssr));
    let sigma2 = ssr_check / n;

    let weakly_identified_units = d
        .unit_rows()
        .iter()
        .enumerate()
        .filter(|(_, row)| row.len() <= r)
        .map(|(i, _)| i)
        .collect();

    Ok(StartOutcome {
        fit: IfeFit {
            beta,
            factor: fs,
            residuals,
            objective: sigma2,
            sigma2,
            converged,
            outer_iterations: iterations,
            start_index_of_best: start_index,
            objective_path: path,
            weakly_identified_units,
        },
    })
}

/// Two-way within OLS: coefficient vector and homoskedastic standard errors.
pub(crate) fn within_ols(d: &PanelData) -> Result<(DVector<f64>, DVector<f64>)> {
    let within = two_way_within(d)?;
    let k = d.n_regressors();
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for o in within.observed() {
        for a in 0..k {
            let xa = within.x_at(a, *o);
            xty[a] += xa * within.y_at(*o);
            for b in a..k {
                xtx[(a, b)] += xa * within.x_at(b, *o);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    check_rcond(&xtx)?;
    let chol = nalgebra::Cholesky::new(xtx.clone()).ok_or(Error::Collinear { rcond: 0.0 })?;
    let beta = chol.solve(&xty);
    let mut ssr = 0.0;
    for o in within.observed() {
        let fitted: f64 = (0..k).map(|a| within.x_at(a, *o) * beta[a]).sum();
        let e = within.y_at(*o) - fitted;
        ssr += e * e;
    }
    let dof = (within.n_obs().saturating_sub(k)).max(1) as f64;
    let sigma2 = ssr / dof;
    let inv = chol.inverse();
    let se = DVector::from_fn(k, |a, _| (sigma2 * inv[(a, a)]).max(0.0).sqrt());
    Ok((beta, se))
}

/// Fit the interactive fixed effects model.
///
/// Start 0 is the two-way within OLS coefficient vector; additional starts
/// perturb it with seeded Gaussian noise scaled by twice each coefficient's
/// OLS standard error. The start with the smallest objective wins.
pub fn fit(d: &PanelData, opts: &IfeOptions) -> Result<IfeFit> {
    if d.n_regressors() == 0 {
        return Err(Error::InvalidConfig("fit requires at least one regressor".into()));
    }
    if opts.n_starts == 0 {
        return Err(Error::InvalidConfig("n_starts must be at least 1".into()));
    }
    if opts.r > d.n_units().min(d.n_periods()) {
        return Err(Error::RankTooLarge {
            r: opts.r,
            n: d.n_units(),
            t: d.n_periods(),
        });
    }

    let (beta0, se0) = within_ols(d)?;
    let ols = PooledOls::new(d)?;

    let mut best: Option<StartOutcome> = None;
    for s in 0..opts.n_starts {
        let start_beta = if s == 0 {
            beta0.clone()
        } else {
            let mut rng = crate::rng::rng(opts.rng_seed, &[0xF17, s as u64]);
            DVector::from_fn(d.n_regressors(), |k, _| {
                let z: f64 = rng.sample(StandardNormal);
                beta0[k] + 2.0 * se0[k] * z
            })
        };
        let outcome = run_start(d, start_beta, s, &ols, opts)?;
        let better = match &best {
            None => true,
            Some(b) => outcome.fit.objective < b.fit.objective,
        };
        if better {
            best = Some(outcome);
        }
    }

    let winner = best.expect("at least one start").fit;
    if winner.converged {
        Ok(winner)
    } else {
        Err(Error::FitNoConvergence {
            iterations: winner.outer_iterations,
            best: Box::new(winner),
        })
    }
}

/// Self-consistency diagnostics for a converged fit.
#[derive(Debug, Clone)]
pub struct ObjectiveConsistency {
    pub fit_objective: f64,
    pub recomputed: f64,
    /// |recomputed - fit_objective| / (1 + |fit_objective|).
    pub relative_discrepancy: f64,
    /// True when the discrepancy exceeds 1e-6.
    pub stale: bool,
}

/// Recompute the profile objective at the fitted coefficients and compare it
/// with the objective stored in the fit.
pub fn objective_at_convergence_consistency(
    fit: &IfeFit,
    d: &PanelData,
    opts: &IfeOptions,
) -> Result<ObjectiveConsistency> {
    let recomputed = profile_objective(d, &fit.beta, opts.r, opts.em_tol, opts.em_max_iter)?;
    let relative_discrepancy =
        (recomputed - fit.objective).abs() / (1.0 + fit.objective.abs());
    Ok(ObjectiveConsistency {
        fit_objective: fit.objective,
        recomputed,
        relative_discrepancy,
        stale: relative_discrepancy > 1e-6,
    })
}
