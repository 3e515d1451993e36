//! Convex nuclear-norm estimator and its iterative post-estimation
//! refinement.
//!
//! The rank constraint of the factor model is relaxed to a nuclear-norm
//! objective, which is convex in the common parameters and is minimized here
//! by subgradient descent with diminishing steps. A finite number of
//! refinement iterations afterwards recovers the efficiency of the
//! rank-constrained estimator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::{check_rcond, within_ols, IfeFit};
use crate::panel::PanelData;
use crate::pca::{em_impute, EM_MAX_ITER, EM_TOL};
use crate::residualize::{map_residualize, ResidualKind, MAP_MAX_SWEEPS, MAP_TOL};

/// Subgradient solver settings.
#[derive(Debug, Clone)]
pub struct NnOptions {
    pub max_iter: usize,
    /// Relative improvement of the best objective below which the solver is
    /// considered converged (checked over a patience window).
    pub tol: f64,
    /// Step size multiplier: iteration `k` moves by `step_scale / sqrt(k)`
    /// along the normalized subgradient.
    pub step_scale: f64,
    /// Iterations without material improvement before stopping.
    pub patience: usize,
}

impl Default for NnOptions {
    fn default() -> Self {
        Self {
            max_iter: 5_000,
            tol: 1e-7,
            step_scale: 0.5,
            patience: 200,
        }
    }
}

/// Result of the nuclear-norm minimization.
#[derive(Debug, Clone)]
pub struct NnFit {
    pub beta_star: DVector<f64>,
    /// Scaled singular-value sum at `beta_star`.
    pub nuclear_objective: f64,
    /// Best objective found up to each iteration (non-increasing).
    pub solver_path: Vec<f64>,
    pub iterations: usize,
}

/// Scaled nuclear norm of the zero-filled residual matrix at `beta`.
pub fn nuclear_objective(d: &PanelData, beta: &DVector<f64>) -> Result<f64> {
    let w = d.w_matrix(beta);
    let svd = nalgebra::SVD::new(w.values, false, false);
    let sum: f64 = svd.singular_values.iter().sum();
    Ok(sum / (2.0 * d.n_obs() as f64))
}

/// Minimize the scaled nuclear norm of the zero-filled residual matrix over
/// the common parameters by subgradient descent, starting from the two-way
/// within OLS fit. Returns the best iterate.
pub fn fit_nuclear(d: &PanelData, opts: &NnOptions) -> Result<NnFit> {
    if d.n_regressors() == 0 {
        return Err(Error::InvalidConfig(
            "nuclear-norm fit requires at least one regressor".into(),
        ));
    }
    let k = d.n_regressors();
    let two_n = 2.0 * d.n_obs() as f64;
    let (start, _) = within_ols(d)?;

    let mut beta = start;
    let mut best_beta = beta.clone();
    let mut best_obj = f64::INFINITY;
    let mut path = Vec::with_capacity(opts.max_iter);
    let mut since_improvement = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let w = d.w_matrix(&beta);
        let svd = nalgebra::SVD::new(w.values.clone(), true, true);
        let obj: f64 = svd.singular_values.iter().sum::<f64>() / two_n;

        if obj < best_obj - opts.tol * (1.0 + obj) {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        if obj < best_obj {
            best_obj = obj;
            best_beta = beta.clone();
        }
        path.push(best_obj);
        if since_improvement >= opts.patience {
            converged = true;
            break;
        }

        // Subgradient of the nuclear norm through the SVD: d||A||_* = U V'.
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let uv = u * vt;
        let mut grad = DVector::zeros(k);
        for c in 0..k {
            let xk = d.x(c);
            let mut acc = 0.0;
            for o in d.observed() {
                acc += uv[(o.unit, o.period)] * xk[(o.unit, o.period)];
            }
            grad[c] = -acc / two_n;
        }
        let gnorm = grad.norm();
        if gnorm == 0.0 {
            converged = true;
            break;
        }
        let step = opts.step_scale / (iter as f64).sqrt();
        beta -= grad * (step / gnorm);
    }

    let fit = NnFit {
        beta_star: best_beta,
        nuclear_objective: best_obj,
        solver_path: path,
        iterations,
    };
    if converged {
        Ok(fit)
    } else {
        Err(Error::NnNoConvergence {
            iterations,
            best: Box::new(fit),
        })
    }
}

/// Refine a nuclear-norm estimate with a fixed number of factor-extraction /
/// residual-regression iterations at rank `r`.
pub fn post_estimate(
    beta_star: &DVector<f64>,
    d: &PanelData,
    r: usize,
    n_iters: usize,
) -> Result<IfeFit> {
    if n_iters == 0 {
        return Err(Error::InvalidConfig("post estimation needs n_iters >= 1".into()));
    }
    let n = d.n_obs() as f64;
    let k = d.n_regressors();
    let mut beta = beta_star.clone();
    let mut path = Vec::with_capacity(n_iters);

    let extract = |beta: &DVector<f64>| -> Result<crate::pca::FactorStructure> {
        let w = d.w_matrix(beta);
        match em_impute(&w, r, EM_TOL, EM_MAX_ITER) {
            Ok(out) => Ok(out.factor),
            // A capped EM state is still a usable factor extraction.
            Err(Error::EmNoConvergence { partial, .. }) => Ok(partial.factor),
            Err(other) => Err(other),
        }
    };

    let mut fs = extract(&beta)?;
    for _ in 0..n_iters {
        let y_breve = map_residualize(d.y(), &fs, ResidualKind::Breve, d, MAP_TOL, MAP_MAX_SWEEPS)?;
        let mut x_breve = Vec::with_capacity(k);
        for c in 0..k {
            x_breve.push(map_residualize(
                d.x(c),
                &fs,
                ResidualKind::Breve,
                d,
                MAP_TOL,
                MAP_MAX_SWEEPS,
            )?);
        }

        let mut xtx = DMatrix::zeros(k, k);
        let mut xty = DVector::zeros(k);
        for o in d.observed() {
            for a in 0..k {
                let xa = x_breve[a][(o.unit, o.period)];
                xty[a] += xa * y_breve[(o.unit, o.period)];
                for b in a..k {
                    xtx[(a, b)] += xa * x_breve[b][(o.unit, o.period)];
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
        beta = chol.solve(&xty);

        fs = extract(&beta)?;
        let common = fs.common_component();
        let mut ssr = 0.0;
        for o in d.observed() {
            let e = d.y_at(*o)
                - (0..k).map(|c| d.x_at(c, *o) * beta[c]).sum::<f64>()
                - common[(o.unit, o.period)];
            ssr += e * e;
        }
        path.push(ssr / n);
    }

    let common = fs.common_component();
    let mut residuals = DMatrix::zeros(d.n_units(), d.n_periods());
    let mut ssr = 0.0;
    for o in d.observed() {
        let e = d.y_at(*o)
            - (0..k).map(|c| d.x_at(c, *o) * beta[c]).sum::<f64>()
            - common[(o.unit, o.period)];
        residuals[(o.unit, o.period)] = e;
        ssr += e * e;
    }
    let sigma2 = ssr / n;
    let weakly_identified_units = d
        .unit_rows()
        .iter()
        .enumerate()
        .filter(|(_, row)| row.len() <= r)
        .map(|(i, _)| i)
        .collect();

    Ok(IfeFit {
        beta,
        factor: fs,
        residuals,
        objective: sigma2,
        sigma2,
        converged: true,
        outer_iterations: n_iters,
        start_index_of_best: 0,
        objective_path: path,
        weakly_identified_units,
    })
}
