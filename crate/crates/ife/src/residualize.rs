//! Residuals against estimated loadings and factors on unbalanced data,
//! computed by the method of alternating projections.
//!
//! Three residual types are supported: projecting out loadings interacted
//! with free period coefficients, factors interacted with free unit
//! coefficients, or both. On balanced data these reduce to the closed forms
//! `M_L V M_F`, `M_L V`, and `V M_F`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::pca::FactorStructure;

/// Default l2 tolerance on the change per full sweep.
pub const MAP_TOL: f64 = 1e-10;
/// Default sweep cap.
pub const MAP_MAX_SWEEPS: usize = 100_000;

/// Which spans to project out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// Project out both loadings and factors.
    Breve,
    /// Project out loadings only.
    Grave,
    /// Project out factors only.
    Acute,
}

/// True when the rows of `basis` restricted to `slice` span the whole
/// slice subspace, so the projection residual there is exactly zero.
fn slice_saturated(basis: &DMatrix<f64>, slice: &[usize], r: usize) -> bool {
    let m = slice.len();
    if m == 0 || m > r {
        return false;
    }
    let mut gram = DMatrix::zeros(m, m);
    for (a, &ia) in slice.iter().enumerate() {
        for (b, &ib) in slice.iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..r {
                acc += basis[(ia, c)] * basis[(ib, c)];
            }
            gram[(a, b)] = acc;
        }
    }
    let eigen = nalgebra::SymmetricEigen::new(gram);
    let max = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    min > 1e-10 * max.max(1e-300)
}

/// Residualize `v` (values on the observed cells of `d`, zero elsewhere)
/// against the spans of the estimated loadings and/or factors.
///
/// Each sweep applies, for every factor column `r`, the scalar projector
/// that removes the loading direction within each period slice and/or the
/// factor direction within each unit slice, repeating until the l2 norm of
/// the per-sweep change falls below `tol`.
///
/// Slices with at most `R` observed cells whose restricted basis spans the
/// whole slice are residualized to exactly zero up front and taken out of
/// the cycle: the free per-slice coefficients absorb them completely, and
/// leaving them in makes the alternating projections arbitrarily slow.
pub fn map_residualize(
    v: &DMatrix<f64>,
    fs: &FactorStructure,
    kind: ResidualKind,
    d: &PanelData,
    tol: f64,
    max_sweeps: usize,
) -> Result<DMatrix<f64>> {
    let (n, t) = (d.n_units(), d.n_periods());
    if v.shape() != (n, t) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", n, t),
            got: format!("{}x{}", v.nrows(), v.ncols()),
        });
    }
    let r = fs.r();
    if r == 0 {
        return Ok(v.clone());
    }
    let project_loadings = matches!(kind, ResidualKind::Breve | ResidualKind::Grave);
    let project_factors = matches!(kind, ResidualKind::Breve | ResidualKind::Acute);

    // Working copies of the observed slices; saturated slices are zeroed and
    // removed, which can cascade when both sides are projected out.
    let mut unit_rows: Vec<Vec<usize>> = d.unit_rows().to_vec();
    let mut period_cols: Vec<Vec<usize>> = d.period_cols().to_vec();
    let mut out = v.clone();
    loop {
        let mut changed = false;
        if project_factors {
            for i in 0..n {
                if !unit_rows[i].is_empty() && slice_saturated(&fs.factors, &unit_rows[i], r) {
                    for &s in &unit_rows[i] {
                        out[(i, s)] = 0.0;
                        period_cols[s].retain(|&u| u != i);
                    }
                    unit_rows[i].clear();
                    changed = true;
                }
            }
        }
        if project_loadings {
            for s in 0..t {
                if !period_cols[s].is_empty() && slice_saturated(&fs.loadings, &period_cols[s], r) {
                    for &i in &period_cols[s] {
                        out[(i, s)] = 0.0;
                        unit_rows[i].retain(|&u| u != s);
                    }
                    period_cols[s].clear();
                    changed = true;
                }
            }
        }
        if !(changed && project_loadings && project_factors) {
            break;
        }
    }

    let mut prev = out.clone();
    for _ in 0..max_sweeps {
        if project_loadings {
            for col in 0..r {
                for (s, units) in period_cols.iter().enumerate() {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for &i in units {
                        let l = fs.loadings[(i, col)];
                        num += l * out[(i, s)];
                        den += l * l;
                    }
                    if den == 0.0 {
                        continue; // projection onto a zero vector is the identity
                    }
                    if den < 1e-300 {
                        return Err(Error::DegenerateProjector { value: den });
                    }
                    let coef = num / den;
                    for &i in units {
                        out[(i, s)] -= fs.loadings[(i, col)] * coef;
                    }
                }
            }
        }

        if project_factors {
            for col in 0..r {
                for (i, periods) in unit_rows.iter().enumerate() {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for &s in periods {
                        let f = fs.factors[(s, col)];
                        num += f * out[(i, s)];
                        den += f * f;
                    }
                    if den == 0.0 {
                        continue;
                    }
                    if den < 1e-300 {
                        return Err(Error::DegenerateProjector { value: den });
                    }
                    let coef = num / den;
                    for &s in periods {
                        out[(i, s)] -= fs.factors[(s, col)] * coef;
                    }
                }
            }
        }

        let mut change_sq = 0.0;
        for (i, periods) in unit_rows.iter().enumerate() {
            for &s in periods {
                let delta = out[(i, s)] - prev[(i, s)];
                change_sq += delta * delta;
            }
        }
        if change_sq.sqrt() < tol {
            return Ok(out);
        }
        prev.copy_from(&out);
    }
    Err(Error::NoConvergence {
        what: "alternating projections".into(),
        iterations: max_sweeps,
    })
}
