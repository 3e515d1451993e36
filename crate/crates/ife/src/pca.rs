//! Principal-components factor extraction and EM imputation.
//!
//! For a complete `N x T` matrix the factors are the leading eigenvectors of
//! the smaller Gram matrix, scaled so that either `F'F/T = I` (factor side)
//! or `L'L/N = I` (loading side). Incomplete matrices are handled by an EM
//! loop that alternates between low-rank fitting and refilling the missing
//! cells with the current fit.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::panel::MaskedMatrix;

/// Default EM convergence tolerance (relative Frobenius change of the
/// imputed block).
pub const EM_TOL: f64 = 1e-8;
/// Default EM iteration cap.
pub const EM_MAX_ITER: usize = 1_000;

/// Which side carries the orthonormality restriction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationSide {
    /// `F'F/T = I_R`, `L'L` diagonal.
    FactorSide,
    /// `L'L/N = I_R`, `F'F` diagonal.
    LoadingSide,
}

/// Estimated loadings (`N x R`) and factors (`T x R`).
#[derive(Debug, Clone)]
pub struct FactorStructure {
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub side: NormalizationSide,
}

impl FactorStructure {
    pub fn r(&self) -> usize {
        self.factors.ncols()
    }

    pub fn n_units(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.factors.nrows()
    }

    /// Rank-`R` common component `L F'`.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.loadings * self.factors.transpose()
    }

    /// Empty structure of rank zero.
    pub fn empty(n: usize, t: usize) -> Self {
        Self {
            loadings: DMatrix::zeros(n, 0),
            factors: DMatrix::zeros(t, 0),
            side: NormalizationSide::FactorSide,
        }
    }
}

/// Progress record of one EM run.
#[derive(Debug, Clone)]
pub struct EmReport {
    pub iterations: usize,
    /// Frobenius change of the imputed block at the last step.
    pub final_delta: f64,
    /// Observed-cell sum of squared residuals after each iteration.
    pub objective_path: Vec<f64>,
}

/// Result of an EM imputation run: factor structure, completed matrix, and
/// the progress report.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub factor: FactorStructure,
    pub completed: DMatrix<f64>,
    pub report: EmReport,
}

fn sorted_eigenpairs(eigen: SymmetricEigen<f64, nalgebra::Dyn>) -> (Vec<f64>, DMatrix<f64>) {
    let dim = eigen.eigenvalues.len();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap()
    });
    let values: Vec<f64> = order.iter().map(|&j| eigen.eigenvalues[j]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (pos, &j) in order.iter().enumerate() {
        vectors.set_column(pos, &eigen.eigenvectors.column(j));
    }
    (values, vectors)
}

/// Flip each column so that its largest-magnitude entry is positive.
fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn symmetric_eigen(g: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let dim = g.nrows().max(1);
    SymmetricEigen::try_new(g, f64::EPSILON, 200 * dim).ok_or(Error::EigenFailure)
}

/// Eigenvalues of the smaller Gram matrix of `w`, in descending order.
/// These are the leading `min(N, T)` eigenvalues of `W'W`.
pub fn gram_spectrum(w: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (n, t) = w.shape();
    if n.min(t) == 0 {
        return Ok(Vec::new());
    }
    let gram = if t <= n {
        w.transpose() * w
    } else {
        w * w.transpose()
    };
    let eigen = symmetric_eigen(gram)?;
    let mut values: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(values)
}

/// Extract the leading `r` factors of a complete matrix, choosing the
/// normalization side that puts the eigenproblem on the smaller Gram matrix.
pub fn pca_factors(w: &DMatrix<f64>, r: usize) -> Result<FactorStructure> {
    let side = if w.ncols() <= w.nrows() {
        NormalizationSide::FactorSide
    } else {
        NormalizationSide::LoadingSide
    };
    pca_factors_with_side(w, r, side)
}

/// Extract the leading `r` factors under an explicit normalization side.
pub fn pca_factors_with_side(
    w: &DMatrix<f64>,
    r: usize,
    side: NormalizationSide,
) -> Result<FactorStructure> {
    let (n, t) = w.shape();
    if r > n.min(t) {
        return Err(Error::RankTooLarge { r, n, t });
    }
    if r == 0 {
        let mut fs = FactorStructure::empty(n, t);
        fs.side = side;
        return Ok(fs);
    }
    match side {
        NormalizationSide::FactorSide => {
            let gram = w.transpose() * w;
            let (_, mut vectors) = sorted_eigenpairs(symmetric_eigen(gram)?);
            let mut top = vectors.columns_mut(0, r).into_owned();
            fix_signs(&mut top);
            let factors = top * (t as f64).sqrt();
            let loadings = w * &factors / t as f64;
            Ok(FactorStructure {
                loadings,
                factors,
                side,
            })
        }
        NormalizationSide::LoadingSide => {
            let gram = w * w.transpose();
            let (_, mut vectors) = sorted_eigenpairs(symmetric_eigen(gram)?);
            let mut top = vectors.columns_mut(0, r).into_owned();
            fix_signs(&mut top);
            let loadings = top * (n as f64).sqrt();
            let factors = w.transpose() * &loadings / n as f64;
            Ok(FactorStructure {
                loadings,
                factors,
                side,
            })
        }
    }
}

/// One EM pass: complete the matrix with the current imputations, extract
/// factors, and report the observed-cell SSR of the new fit.
fn em_iterate(
    w: &MaskedMatrix,
    r: usize,
    imputed: &DMatrix<f64>,
) -> Result<(FactorStructure, DMatrix<f64>, f64)> {
    let (n, t) = w.values.shape();
    let mut w_tilde = w.values.clone();
    for i in 0..n {
        for s in 0..t {
            if !w.mask[i * t + s] {
                w_tilde[(i, s)] = imputed[(i, s)];
            }
        }
    }
    let fs = pca_factors(&w_tilde, r)?;
    let common = fs.common_component();
    let mut obs_ssr = 0.0;
    for i in 0..n {
        for s in 0..t {
            if w.mask[i * t + s] {
                let e = w.values[(i, s)] - common[(i, s)];
                obs_ssr += e * e;
            }
        }
    }
    Ok((fs, common, obs_ssr))
}

/// EM imputation started from zero imputations.
pub fn em_impute(w: &MaskedMatrix, r: usize, tol: f64, max_iter: usize) -> Result<EmOutcome> {
    em_impute_from(w, r, tol, max_iter, None)
}

/// EM imputation with an optional warm start for the imputed block.
pub fn em_impute_from(
    w: &MaskedMatrix,
    r: usize,
    tol: f64,
    max_iter: usize,
    warm: Option<&DMatrix<f64>>,
) -> Result<EmOutcome> {
    let (n, t) = w.values.shape();
    if r > n.min(t) {
        return Err(Error::RankTooLarge { r, n, t });
    }
    let mut imputed = match warm {
        Some(m) => m.clone(),
        None => DMatrix::zeros(n, t),
    };
    let mut path = Vec::new();
    let mut last: Option<(FactorStructure, DMatrix<f64>)> = None;
    let mut final_delta = f64::INFINITY;

    for iter in 1..=max_iter {
        let (fs, common, obs_ssr) = em_iterate(w, r, &imputed)?;
        path.push(obs_ssr);

        let mut delta_sq = 0.0;
        let mut norm_sq = 0.0;
        for i in 0..n {
            for s in 0..t {
                if !w.mask[i * t + s] {
                    let d = common[(i, s)] - imputed[(i, s)];
                    delta_sq += d * d;
                    norm_sq += common[(i, s)] * common[(i, s)];
                }
            }
        }
        final_delta = delta_sq.sqrt();
        imputed = common.clone();
        last = Some((fs, common));

        if final_delta < tol * (1.0 + norm_sq.sqrt()) {
            let (fs, common) = last.unwrap();
            let completed = complete(w, &common);
            return Ok(EmOutcome {
                factor: fs,
                completed,
                report: EmReport {
                    iterations: iter,
                    final_delta,
                    objective_path: path,
                },
            });
        }
    }

    let (fs, common) = last.expect("max_iter >= 1");
    let completed = complete(w, &common);
    Err(Error::EmNoConvergence {
        iterations: max_iter,
        partial: Box::new(EmOutcome {
            factor: fs,
            completed,
            report: EmReport {
                iterations: max_iter,
                final_delta,
                objective_path: path,
            },
        }),
    })
}

/// Observed values where observed, `common` elsewhere.
fn complete(w: &MaskedMatrix, common: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = w.values.shape();
    let mut out = w.values.clone();
    for i in 0..n {
        for s in 0..t {
            if !w.mask[i * t + s] {
                out[(i, s)] = common[(i, s)];
            }
        }
    }
    out
}

/// Single EM step for interleaved use inside the outer estimator loop.
pub(crate) fn em_single_step(
    w: &MaskedMatrix,
    r: usize,
    imputed: &DMatrix<f64>,
) -> Result<(FactorStructure, DMatrix<f64>, f64)> {
    em_iterate(w, r, imputed)
}
