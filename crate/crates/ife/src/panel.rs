//! Unbalanced panel data model.
//!
//! Owns the observation index set, the masking/projection operators, and the
//! two-way (unit and time) within transformation. A panel stores the outcome
//! and regressors as zero-filled dense `N x T` matrices plus an observation
//! mask; all estimation code sums over observed cells only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Maximum absolute per-entry change per sweep before the within
/// transformation is considered converged.
pub const WITHIN_TOL: f64 = 1e-10;
/// Sweep cap for the within transformation.
pub const WITHIN_MAX_SWEEPS: usize = 100_000;

/// Index of a single observation: unit `i`, period `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObsIndex {
    pub unit: usize,
    pub period: usize,
}

/// A dense `N x T` matrix together with an observation mask. Entries at
/// unobserved cells are exactly zero.
#[derive(Debug, Clone)]
pub struct MaskedMatrix {
    pub values: DMatrix<f64>,
    /// Row-major: `mask[i * T + t]` is true iff `(i, t)` is observed.
    pub mask: Vec<bool>,
}

impl MaskedMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.values.ncols() + t]
    }

    /// Number of observed cells.
    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Record of what construction dropped or flagged.
#[derive(Debug, Clone, Default)]
pub struct ConstructionReport {
    /// Keys of units dropped because they had no observations.
    pub dropped_units: Vec<String>,
    /// Keys of periods dropped because they had no observations.
    pub dropped_periods: Vec<String>,
    /// Non-fatal warnings (e.g. regressors absorbed by the factor structure).
    pub warnings: Vec<String>,
}

/// An unbalanced panel: outcome, `K` regressors, and the observed index set
/// over an `N x T` frame. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PanelData {
    n_units: usize,
    n_periods: usize,
    n_regressors: usize,
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    mask: Vec<bool>,
    observed: Vec<ObsIndex>,
    unit_rows: Vec<Vec<usize>>,
    period_cols: Vec<Vec<usize>>,
}

impl PanelData {
    /// Build a panel from long-format records `(unit_key, period_key, y, x)`.
    ///
    /// Units and periods are indexed densely in sorted-key order, so the same
    /// records always produce the same panel regardless of input order.
    pub fn from_long_records<U, P>(records: &[(U, P, f64, Vec<f64>)]) -> Result<(Self, ConstructionReport)>
    where
        U: Ord + Clone + std::fmt::Display,
        P: Ord + Clone + std::fmt::Display,
    {
        if records.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let k = records[0].3.len();

        let mut unit_keys: Vec<U> = records.iter().map(|r| r.0.clone()).collect();
        unit_keys.sort();
        unit_keys.dedup();
        let mut period_keys: Vec<P> = records.iter().map(|r| r.1.clone()).collect();
        period_keys.sort();
        period_keys.dedup();

        let n = unit_keys.len();
        let t = period_keys.len();
        let unit_index = |key: &U| unit_keys.binary_search(key).expect("key present");
        let period_index = |key: &P| period_keys.binary_search(key).expect("key present");

        let mut y = DMatrix::zeros(n, t);
        let mut x: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::zeros(n, t)).collect();
        let mut mask = vec![false; n * t];

        for (u, p, yv, xv) in records {
            let i = unit_index(u);
            let s = period_index(p);
            if xv.len() != k {
                return Err(Error::RaggedRow {
                    unit: u.to_string(),
                    period: p.to_string(),
                    expected: k,
                    found: xv.len(),
                });
            }
            if !yv.is_finite() {
                return Err(Error::NonFinite {
                    unit: u.to_string(),
                    period: p.to_string(),
                    field: "y".into(),
                });
            }
            for (j, v) in xv.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        unit: u.to_string(),
                        period: p.to_string(),
                        field: format!("x{}", j + 1),
                    });
                }
            }
            if mask[i * t + s] {
                return Err(Error::DuplicateCell {
                    unit: u.to_string(),
                    period: p.to_string(),
                });
            }
            mask[i * t + s] = true;
            y[(i, s)] = *yv;
            for (j, v) in xv.iter().enumerate() {
                x[j][(i, s)] = *v;
            }
        }

        // Every key came from a record, so no row or column can be empty here.
        let panel = Self::assemble(y, x, mask)?;
        let mut report = ConstructionReport::default();
        panel.warn_low_rank_regressors(&mut report);
        Ok((panel, report))
    }

    /// Build a panel from dense matrices and a mask, dropping units and
    /// periods that have no observations (the frame is renumbered).
    pub fn from_masked(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        mask: Vec<bool>,
    ) -> Result<(Self, ConstructionReport)> {
        let (n, t) = (y.nrows(), y.ncols());
        if mask.len() != n * t {
            return Err(Error::ShapeMismatch {
                expected: format!("mask of length {}", n * t),
                got: format!("{}", mask.len()),
            });
        }
        for (j, xj) in x.iter().enumerate() {
            if xj.shape() != (n, t) {
                return Err(Error::ShapeMismatch {
                    expected: format!("x{} of shape {}x{}", j + 1, n, t),
                    got: format!("{}x{}", xj.nrows(), xj.ncols()),
                });
            }
        }

        let keep_units: Vec<usize> = (0..n)
            .filter(|&i| (0..t).any(|s| mask[i * t + s]))
            .collect();
        let keep_periods: Vec<usize> = (0..t)
            .filter(|&s| (0..n).any(|i| mask[i * t + s]))
            .collect();
        if keep_units.is_empty() {
            return Err(Error::EmptyPanel);
        }

        let mut report = ConstructionReport::default();
        report.dropped_units = (0..n)
            .filter(|i| !keep_units.contains(i))
            .map(|i| i.to_string())
            .collect();
        report.dropped_periods = (0..t)
            .filter(|s| !keep_periods.contains(s))
            .map(|s| s.to_string())
            .collect();
        if !report.dropped_units.is_empty() || !report.dropped_periods.is_empty() {
            report.warnings.push(format!(
                "dropped {} empty unit(s) and {} empty period(s)",
                report.dropped_units.len(),
                report.dropped_periods.len()
            ));
        }

        let (nn, tt) = (keep_units.len(), keep_periods.len());
        let mut y2 = DMatrix::zeros(nn, tt);
        let mut x2: Vec<DMatrix<f64>> = (0..x.len()).map(|_| DMatrix::zeros(nn, tt)).collect();
        let mut mask2 = vec![false; nn * tt];
        for (i2, &i) in keep_units.iter().enumerate() {
            for (t2, &s) in keep_periods.iter().enumerate() {
                if mask[i * t + s] {
                    mask2[i2 * tt + t2] = true;
                    let v = y[(i, s)];
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            unit: i.to_string(),
                            period: s.to_string(),
                            field: "y".into(),
                        });
                    }
                    y2[(i2, t2)] = v;
                    for (j, xj) in x.iter().enumerate() {
                        x2[j][(i2, t2)] = xj[(i, s)];
                    }
                }
            }
        }
        let panel = Self::assemble(y2, x2, mask2)?;
        panel.warn_low_rank_regressors(&mut report);
        Ok((panel, report))
    }

    fn assemble(y: DMatrix<f64>, x: Vec<DMatrix<f64>>, mask: Vec<bool>) -> Result<Self> {
        let (n, t) = (y.nrows(), y.ncols());
        let mut observed = Vec::new();
        let mut unit_rows = vec![Vec::new(); n];
        let mut period_cols = vec![Vec::new(); t];
        for i in 0..n {
            for s in 0..t {
                if mask[i * t + s] {
                    observed.push(ObsIndex { unit: i, period: s });
                    unit_rows[i].push(s);
                    period_cols[s].push(i);
                }
            }
        }
        if observed.is_empty() {
            return Err(Error::EmptyPanel);
        }
        Ok(Self {
            n_units: n,
            n_periods: t,
            n_regressors: x.len(),
            y,
            x,
            mask,
            observed,
            unit_rows,
            period_cols,
        })
    }

    fn warn_low_rank_regressors(&self, report: &mut ConstructionReport) {
        for k in 0..self.n_regressors {
            let xk = &self.x[k];
            let time_invariant = self.unit_rows.iter().enumerate().all(|(i, row)| {
                row.windows(2).all(|w| xk[(i, w[0])] == xk[(i, w[1])])
            });
            if time_invariant && !self.unit_rows.iter().all(|r| r.len() <= 1) {
                report.warnings.push(format!(
                    "regressor x{} is time-invariant; its coefficient is not identified under a factor structure",
                    k + 1
                ));
                continue;
            }
            let common = self.period_cols.iter().enumerate().all(|(s, col)| {
                col.windows(2).all(|w| xk[(w[0], s)] == xk[(w[1], s)])
            });
            if common && !self.period_cols.iter().all(|c| c.len() <= 1) {
                report.warnings.push(format!(
                    "regressor x{} is common across units; its coefficient is not identified under a factor structure",
                    k + 1
                ));
            }
        }
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_regressors(&self) -> usize {
        self.n_regressors
    }

    /// Number of observed cells `n`.
    pub fn n_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn is_balanced(&self) -> bool {
        self.n_obs() == self.n_units * self.n_periods
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.n_periods + t]
    }

    /// Observed index pairs in row-major order.
    pub fn observed(&self) -> &[ObsIndex] {
        &self.observed
    }

    /// Periods observed for each unit.
    pub fn unit_rows(&self) -> &[Vec<usize>] {
        &self.unit_rows
    }

    /// Units observed in each period.
    pub fn period_cols(&self) -> &[Vec<usize>] {
        &self.period_cols
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Outcome matrix, zero-filled at unobserved cells.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Regressor `k` as a zero-filled matrix.
    pub fn x(&self, k: usize) -> &DMatrix<f64> {
        &self.x[k]
    }

    pub fn y_at(&self, idx: ObsIndex) -> f64 {
        self.y[(idx.unit, idx.period)]
    }

    pub fn x_at(&self, k: usize, idx: ObsIndex) -> f64 {
        self.x[k][(idx.unit, idx.period)]
    }

    /// Zero-filled residual matrix `W(beta)` with entries `y - x'beta` on the
    /// observed cells.
    pub fn w_matrix(&self, beta: &DVector<f64>) -> MaskedMatrix {
        assert_eq!(beta.len(), self.n_regressors, "beta length must equal K");
        let mut w = self.y.clone();
        for k in 0..self.n_regressors {
            let b = beta[k];
            if b != 0.0 {
                w.zip_apply(&self.x[k], |wi, xi| *wi -= b * xi);
            }
        }
        // Unobserved cells are zero in y and x, hence zero in w.
        MaskedMatrix {
            values: w,
            mask: self.mask.clone(),
        }
    }

    /// Replace outcome and regressors, keeping the observation structure.
    pub(crate) fn with_values(&self, y: DMatrix<f64>, x: Vec<DMatrix<f64>>) -> Self {
        Self {
            n_units: self.n_units,
            n_periods: self.n_periods,
            n_regressors: x.len(),
            y,
            x,
            mask: self.mask.clone(),
            observed: self.observed.clone(),
            unit_rows: self.unit_rows.clone(),
            period_cols: self.period_cols.clone(),
        }
    }
}

/// Zero out the unobserved entries of `m`.
pub fn projection_d(m: &DMatrix<f64>, d: &PanelData) -> Result<MaskedMatrix> {
    if m.shape() != (d.n_units, d.n_periods) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", d.n_units, d.n_periods),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let mut values = m.clone();
    for i in 0..d.n_units {
        for t in 0..d.n_periods {
            if !d.is_observed(i, t) {
                values[(i, t)] = 0.0;
            }
        }
    }
    Ok(MaskedMatrix {
        values,
        mask: d.mask.clone(),
    })
}

/// Complementary operator: zero out the observed entries of `m`.
pub fn projection_complement(m: &DMatrix<f64>, d: &PanelData) -> Result<MaskedMatrix> {
    if m.shape() != (d.n_units, d.n_periods) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", d.n_units, d.n_periods),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let mut values = m.clone();
    let mut mask = vec![false; d.n_units * d.n_periods];
    for i in 0..d.n_units {
        for t in 0..d.n_periods {
            if d.is_observed(i, t) {
                values[(i, t)] = 0.0;
            } else {
                mask[i * d.n_periods + t] = true;
            }
        }
    }
    Ok(MaskedMatrix { values, mask })
}

/// Residualize the outcome and every regressor against unit and period
/// dummies over the observed cells, by alternating demeaning.
pub fn two_way_within(d: &PanelData) -> Result<PanelData> {
    let mut cols: Vec<DMatrix<f64>> = Vec::with_capacity(d.n_regressors + 1);
    cols.push(d.y.clone());
    for k in 0..d.n_regressors {
        cols.push(d.x[k].clone());
    }

    let mut unit_means = vec![0.0; d.n_units];
    let mut period_means = vec![0.0; d.n_periods];
    for col in cols.iter_mut() {
        let mut converged = false;
        for _ in 0..WITHIN_MAX_SWEEPS {
            for (i, row) in d.unit_rows.iter().enumerate() {
                let m: f64 = row.iter().map(|&t| col[(i, t)]).sum::<f64>() / row.len() as f64;
                for &t in row {
                    col[(i, t)] -= m;
                }
                unit_means[i] = m;
            }
            for (t, units) in d.period_cols.iter().enumerate() {
                let m: f64 = units.iter().map(|&i| col[(i, t)]).sum::<f64>() / units.len() as f64;
                for &i in units {
                    col[(i, t)] -= m;
                }
                period_means[t] = m;
            }
            let max_change = d
                .observed
                .iter()
                .map(|o| (unit_means[o.unit] + period_means[o.period]).abs())
                .fold(0.0_f64, f64::max);
            if max_change < WITHIN_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                what: "two-way within transformation".into(),
                iterations: WITHIN_MAX_SWEEPS,
            });
        }
    }

    let y = cols.remove(0);
    Ok(d.with_values(y, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_records() -> Vec<(u32, u32, f64, Vec<f64>)> {
        vec![
            (0, 0, 1.0, vec![0.5]),
            (0, 1, 2.0, vec![1.5]),
            (1, 0, 3.0, vec![2.5]),
            (1, 1, 4.0, vec![3.5]),
        ]
    }

    #[test]
    fn complete_panel_counts() {
        let (p, rep) = PanelData::from_long_records(&small_records()).unwrap();
        assert_eq!(p.n_units(), 2);
        assert_eq!(p.n_periods(), 2);
        assert_eq!(p.n_obs(), 4);
        assert!(p.is_balanced());
        assert!(rep.dropped_units.is_empty());
    }

    #[test]
    fn single_hole_panel() {
        let mut recs = small_records();
        recs.pop();
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        assert_eq!(p.n_obs(), 3);
        assert!(!p.is_balanced());
        assert!(!p.is_observed(1, 1));
    }

    #[test]
    fn pattern2_like_counts() {
        // 10 units x 4 periods; 4 units observed only the first 2 periods.
        let mut recs = Vec::new();
        for i in 0u32..10 {
            let t_max = if i < 4 { 2 } else { 4 };
            for t in 0u32..t_max {
                recs.push((i, t, 1.0, vec![1.0, 2.0 * (i + t) as f64]));
            }
        }
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        assert_eq!(p.n_units(), 10);
        assert_eq!(p.n_periods(), 4);
        assert_eq!(p.n_obs(), 32); // N*T*(1 - 0.2)
    }

    #[test]
    fn duplicate_cell_rejected() {
        let mut recs = small_records();
        recs.push((0, 0, 9.0, vec![9.0]));
        assert!(matches!(
            PanelData::from_long_records(&recs),
            Err(Error::DuplicateCell { .. })
        ));
    }

    #[test]
    fn ragged_row_rejected() {
        let mut recs = small_records();
        recs.push((2, 0, 1.0, vec![1.0, 2.0]));
        assert!(matches!(
            PanelData::from_long_records(&recs),
            Err(Error::RaggedRow { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut recs = small_records();
        recs[0].2 = f64::NAN;
        assert!(matches!(
            PanelData::from_long_records(&recs),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn sorted_key_canonicalization() {
        let mut recs = small_records();
        recs.reverse();
        let (a, _) = PanelData::from_long_records(&small_records()).unwrap();
        let (b, _) = PanelData::from_long_records(&recs).unwrap();
        assert_eq!(a.y(), b.y());
    }

    #[test]
    fn from_masked_drops_empty_slices() {
        let y = DMatrix::from_row_slice(3, 3, &[1., 2., 3., 0., 0., 0., 7., 8., 9.]);
        let mask = vec![true, true, false, false, false, false, true, true, false];
        let (p, rep) = PanelData::from_masked(y, vec![], mask).unwrap();
        assert_eq!(p.n_units(), 2);
        assert_eq!(p.n_periods(), 2);
        assert_eq!(rep.dropped_units, vec!["1"]);
        assert_eq!(rep.dropped_periods, vec!["2"]);
    }

    #[test]
    fn projection_matches_elementwise_mask() {
        let mut rng = crate::rng::rng(11, &[0]);
        let mut recs = Vec::new();
        for i in 0u32..3 {
            for t in 0u32..3 {
                if (i, t) != (1, 2) && (i, t) != (2, 0) {
                    recs.push((i, t, rng.gen::<f64>(), vec![]));
                }
            }
        }
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        let m = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>());
        let proj = projection_d(&m, &p).unwrap();
        for i in 0..3 {
            for t in 0..3 {
                let want = if p.is_observed(i, t) { m[(i, t)] } else { 0.0 };
                assert_eq!(proj.values[(i, t)], want);
            }
        }
        // Idempotence and complement identity.
        let again = projection_d(&proj.values, &p).unwrap();
        assert_eq!(again.values, proj.values);
        let comp = projection_complement(&m, &p).unwrap();
        assert_eq!(&proj.values + &comp.values, m);
    }

    #[test]
    fn projection_shape_mismatch() {
        let (p, _) = PanelData::from_long_records(&small_records()).unwrap();
        let m = DMatrix::zeros(3, 2);
        assert!(matches!(
            projection_d(&m, &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn balanced_within_is_classic_double_demeaning() {
        let mut rng = crate::rng::rng(5, &[1]);
        let n = 4;
        let t = 3;
        let mut recs = Vec::new();
        for i in 0..n {
            for s in 0..t {
                recs.push((i as u32, s as u32, rng.gen::<f64>(), vec![rng.gen::<f64>()]));
            }
        }
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        let w = two_way_within(&p).unwrap();

        let y = p.y();
        let grand = y.sum() / (n * t) as f64;
        for i in 0..n {
            for s in 0..t {
                let row_mean = y.row(i).sum() / t as f64;
                let col_mean = y.column(s).sum() / n as f64;
                let want = y[(i, s)] - row_mean - col_mean + grand;
                assert!((w.y()[(i, s)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn additive_effects_are_removed_exactly() {
        let mut recs = Vec::new();
        for i in 0..5u32 {
            for t in 0..4u32 {
                if i == 2 && t == 3 {
                    continue;
                }
                let a = 1.5 * i as f64 - 2.0;
                let b = 0.7 * t as f64 + 1.0;
                recs.push((i, t, a + b, vec![]));
            }
        }
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        let w = two_way_within(&p).unwrap();
        for o in w.observed() {
            assert!(w.y_at(*o).abs() < 1e-8, "residual {}", w.y_at(*o));
        }
    }

    /// Dense dummy-variable OLS: residuals of v on unit and period indicators.
    fn dummy_ols_residuals(p: &PanelData, v: &DMatrix<f64>) -> Vec<f64> {
        let n_obs = p.n_obs();
        let cols = p.n_units() + p.n_periods();
        let mut z = DMatrix::zeros(n_obs, cols);
        let mut rhs = DVector::zeros(n_obs);
        for (row, o) in p.observed().iter().enumerate() {
            z[(row, o.unit)] = 1.0;
            z[(row, p.n_units() + o.period)] = 1.0;
            rhs[row] = v[(o.unit, o.period)];
        }
        let svd = z.clone().svd(true, true);
        let sol = svd.solve(&rhs, 1e-12).unwrap();
        let fitted = z * sol;
        (0..n_obs).map(|r| rhs[r] - fitted[r]).collect()
    }

    #[test]
    fn unbalanced_within_matches_dense_dummy_ols() {
        let mut rng = crate::rng::rng(17, &[2]);
        let mut recs = Vec::new();
        for i in 0..5u32 {
            for t in 0..4u32 {
                // Knock out a few cells, keep all rows/cols populated.
                if matches!((i, t), (0, 3) | (2, 1) | (4, 0) | (3, 2)) {
                    continue;
                }
                recs.push((i, t, rng.gen::<f64>() * 4.0 - 2.0, vec![rng.gen::<f64>()]));
            }
        }
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        let w = two_way_within(&p).unwrap();
        let oracle_y = dummy_ols_residuals(&p, p.y());
        let oracle_x = dummy_ols_residuals(&p, p.x(0));
        for (row, o) in p.observed().iter().enumerate() {
            assert!((w.y_at(*o) - oracle_y[row]).abs() < 1e-7);
            assert!((w.x_at(0, *o) - oracle_x[row]).abs() < 1e-7);
        }
    }

    #[test]
    fn within_output_is_orthogonal_to_dummies_and_idempotent() {
        let mut rng = crate::rng::rng(23, &[3]);
        let mut recs = Vec::new();
        for i in 0..6u32 {
            for t in 0..5u32 {
                if rng.gen::<f64>() < 0.25 && !(t == 0 || i == 0) {
                    continue;
                }
                recs.push((i, t, rng.gen::<f64>() * 3.0, vec![]));
            }
        }
        let (p, _) = PanelData::from_long_records(&recs).unwrap();
        let w = two_way_within(&p).unwrap();
        let bound = 10.0 * WITHIN_TOL * (p.n_obs() as f64).sqrt();
        for (i, row) in w.unit_rows().iter().enumerate() {
            let s: f64 = row.iter().map(|&t| w.y()[(i, t)]).sum();
            assert!(s.abs() < bound, "unit sum {}", s);
        }
        for (t, col) in w.period_cols().iter().enumerate() {
            let s: f64 = col.iter().map(|&i| w.y()[(i, t)]).sum();
            assert!(s.abs() < bound, "period sum {}", s);
        }
        let twice = two_way_within(&w).unwrap();
        for o in p.observed() {
            assert!((twice.y_at(*o) - w.y_at(*o)).abs() <= 10.0 * WITHIN_TOL);
        }
    }

    #[test]
    fn time_invariant_regressor_warns() {
        let mut recs = Vec::new();
        for i in 0..3u32 {
            for t in 0..3u32 {
                recs.push((i, t, (i + t) as f64, vec![i as f64, (i * t) as f64]));
            }
        }
        let (_, rep) = PanelData::from_long_records(&recs).unwrap();
        assert!(rep.warnings.iter().any(|w| w.contains("x1")));
        assert!(!rep.warnings.iter().any(|w| w.contains("x2")));
    }
}
