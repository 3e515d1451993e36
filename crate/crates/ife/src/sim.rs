//! Monte Carlo laboratory: data-generating process, missing-data patterns,
//! and the replication study of the estimator's finite-sample properties.
//!
//! The design is a static panel model with one regressor and two factors.
//! The regressor is correlated with the factor structure, the idiosyncratic
//! error comes in four configurations of equal variance, and observations
//! are deleted according to one of three missingness patterns.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, IfeOptions};
use crate::factor_count::{default_rbar, select, SelectionInput, PA_PERMUTATIONS};
use crate::inference::{infer, z_test, BiasBandwidths, CorrectionSet, InferenceOptions, VcovKind};
use crate::panel::{ObsIndex, PanelData};

/// True coefficient of the simulated regressor.
pub const BETA_TRUE: f64 = 1.0;
/// True number of factors in the design.
pub const R_TRUE: usize = 2;

/// Missingness patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingPattern {
    /// Uniformly random holes.
    P1,
    /// A block of units observed only for the first half of the sample.
    P2,
    /// The same block, each with a randomly placed half-length window.
    P3,
}

impl std::str::FromStr for MissingPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" | "1" => Ok(Self::P1),
            "p2" | "2" => Ok(Self::P2),
            "p3" | "3" => Ok(Self::P3),
            other => Err(Error::InvalidConfig(format!("unknown pattern '{other}'"))),
        }
    }
}

/// Idiosyncratic error configurations. All have variance 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorConfig {
    /// i) Gaussian.
    Homoskedastic,
    /// ii) scaled Student t with five degrees of freedom.
    FatTails,
    /// iii) variance 2 for odd units, 6 for even units.
    CrossHet,
    /// iv) AR(1) with coefficient 0.5 on top of the cross-sectional pattern.
    CrossHetSerial,
}

impl std::str::FromStr for ErrorConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" | "homoskedastic" => Ok(Self::Homoskedastic),
            "ii" | "2" | "fat_tails" | "fattails" => Ok(Self::FatTails),
            "iii" | "3" | "cross_het" | "crosshet" => Ok(Self::CrossHet),
            "iv" | "4" | "cross_het_serial" | "crosshetserial" => Ok(Self::CrossHetSerial),
            other => Err(Error::InvalidConfig(format!("unknown error config '{other}'"))),
        }
    }
}

impl ErrorConfig {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Homoskedastic => "i",
            Self::FatTails => "ii",
            Self::CrossHet => "iii",
            Self::CrossHetSerial => "iv",
        }
    }
}

impl MissingPattern {
    pub fn label(&self) -> &'static str {
        match self {
            Self::P1 => "1",
            Self::P2 => "2",
            Self::P3 => "3",
        }
    }
}

/// Design of one simulation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Average number of units.
    pub n_bar: usize,
    /// Average number of periods.
    pub t_bar: usize,
    /// Fraction of missing observations.
    pub psi: f64,
    pub pattern: MissingPattern,
    pub error_config: ErrorConfig,
    pub seed: u64,
}

impl DgpConfig {
    /// Number of units before deletion: `n_bar / (1 - psi)`, rounded.
    pub fn n_units(&self) -> usize {
        (self.n_bar as f64 / (1.0 - self.psi)).round() as usize
    }

    /// Number of periods before deletion.
    pub fn n_periods(&self) -> usize {
        (self.t_bar as f64 / (1.0 - self.psi)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.psi) {
            return Err(Error::InvalidConfig(format!("psi = {} not in [0, 1)", self.psi)));
        }
        if self.n_bar == 0 || self.t_bar == 0 {
            return Err(Error::InvalidConfig("n_bar and t_bar must be positive".into()));
        }
        Ok(())
    }
}

/// What the generator knows about a replication.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub beta: f64,
    pub r0: usize,
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
}

/// Draw an `n x t` error panel for the given configuration. Unit parity
/// follows the one-based convention: the first, third, ... units are the
/// low-variance ones.
pub(crate) fn sample_errors(
    config: ErrorConfig,
    n: usize,
    t: usize,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    match config {
        ErrorConfig::Homoskedastic => DMatrix::from_fn(n, t, |_, _| {
            2.0 * rng.sample::<f64, _>(StandardNormal)
        }),
        ErrorConfig::FatTails => {
            // Scaled so the variance equals 4 like the other configurations:
            // Var(t_5) = 5/3, and (12/5) * (5/3) = 4.
            let t5 = StudentT::new(5.0).expect("valid dof");
            let scale = (12.0_f64 / 5.0).sqrt();
            DMatrix::from_fn(n, t, |_, _| scale * t5.sample(rng))
        }
        ErrorConfig::CrossHet => DMatrix::from_fn(n, t, |i, _| {
            let sd = if i % 2 == 0 { 2.0_f64 } else { 6.0 };
            sd.sqrt() * rng.sample::<f64, _>(StandardNormal)
        }),
        ErrorConfig::CrossHetSerial => {
            const BURN_IN: usize = 1_000;
            let rho = 0.5;
            let mut out = DMatrix::zeros(n, t);
            for i in 0..n {
                let sd = if i % 2 == 0 { 1.5_f64 } else { 4.5 }.sqrt();
                let mut e = 0.0;
                for s in 0..BURN_IN + t {
                    e = rho * e + sd * rng.sample::<f64, _>(StandardNormal);
                    if s >= BURN_IN {
                        out[(i, s - BURN_IN)] = e;
                    }
                }
            }
            out
        }
    }
}

/// Cells to delete for the given pattern. The returned set has exactly
/// `round(N T psi)` elements and never empties a row or a column.
pub fn apply_pattern(
    pattern: MissingPattern,
    psi: f64,
    n: usize,
    t: usize,
    seed: u64,
) -> Result<Vec<ObsIndex>> {
    if psi == 0.0 {
        return Ok(Vec::new());
    }
    if !(0.0..1.0).contains(&psi) {
        return Err(Error::PatternInfeasible {
            reason: format!("psi = {psi} outside [0, 1)"),
        });
    }
    match pattern {
        MissingPattern::P1 => {
            let drop_count = ((n * t) as f64 * psi).round() as usize;
            let mut rng = crate::rng::rng(seed, &[0x9A77E21, 1]);
            for _ in 0..1_000 {
                let chosen = rand::seq::index::sample(&mut rng, n * t, drop_count);
                let mut row_left = vec![0usize; n];
                let mut col_left = vec![0usize; t];
                for i in 0..n {
                    row_left[i] = t;
                }
                for s in 0..t {
                    col_left[s] = n;
                }
                let mut ok = true;
                for idx in chosen.iter() {
                    let (i, s) = (idx / t, idx % t);
                    row_left[i] -= 1;
                    col_left[s] -= 1;
                    if row_left[i] == 0 || col_left[s] == 0 {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    let mut drops: Vec<ObsIndex> = chosen
                        .iter()
                        .map(|idx| ObsIndex {
                            unit: idx / t,
                            period: idx % t,
                        })
                        .collect();
                    drops.sort();
                    return Ok(drops);
                }
            }
            Err(Error::PatternInfeasible {
                reason: format!(
                    "could not draw {drop_count} holes from a {n}x{t} frame without emptying a slice"
                ),
            })
        }
        MissingPattern::P2 | MissingPattern::P3 => {
            if t % 2 != 0 {
                return Err(Error::PatternInfeasible {
                    reason: format!("block patterns need an even number of periods, got {t}"),
                });
            }
            let n1_real = 2.0 * psi * n as f64;
            let n1 = n1_real.round() as usize;
            if (n1_real - n1 as f64).abs() > 1e-9 {
                return Err(Error::PatternInfeasible {
                    reason: format!("2 psi N = {n1_real} is not an integer"),
                });
            }
            if n1 > n {
                return Err(Error::PatternInfeasible {
                    reason: format!("type-1 unit count {n1} exceeds N = {n}"),
                });
            }
            let t1 = t / 2;
            let mut rng = crate::rng::rng(seed, &[0x9A77E21, 3]);
            let mut drops = Vec::with_capacity(n1 * (t - t1));
            for i in 0..n1 {
                let start = match pattern {
                    MissingPattern::P2 => 0,
                    MissingPattern::P3 => rng.gen_range(0..=t - t1),
                    MissingPattern::P1 => unreachable!(),
                };
                for s in 0..t {
                    if s < start || s >= start + t1 {
                        drops.push(ObsIndex { unit: i, period: s });
                    }
                }
            }
            drops.sort();
            Ok(drops)
        }
    }
}

/// Generate one replication of the design.
pub fn generate(config: &DgpConfig, rep: u64) -> Result<(PanelData, GroundTruth)> {
    config.validate()?;
    let n = config.n_units();
    let t = config.n_periods();

    let mut rng_factors = crate::rng::rng(config.seed, &[rep, 0]);
    let mut rng_loadings = crate::rng::rng(config.seed, &[rep, 1]);
    let mut rng_x = crate::rng::rng(config.seed, &[rep, 2]);
    let mut rng_errors = crate::rng::rng(config.seed, &[rep, 3]);
    let pattern_seed = crate::rng::derive(config.seed, &[rep, 4]);

    // Factors for periods -1..t (one pre-sample draw feeds the lag in x).
    let factors_ext = DMatrix::from_fn(t + 1, R_TRUE, |_, _| {
        rng_factors.sample::<f64, _>(StandardNormal)
    });
    let loadings = DMatrix::from_fn(n, R_TRUE, |_, _| {
        1.0 + rng_loadings.sample::<f64, _>(StandardNormal)
    });
    let chi = DMatrix::from_fn(n, R_TRUE, |_, _| {
        1.0 + rng_loadings.sample::<f64, _>(StandardNormal)
    });
    let errors = sample_errors(config.error_config, n, t, &mut rng_errors);

    let mut x = DMatrix::zeros(n, t);
    let mut y = DMatrix::zeros(n, t);
    for i in 0..n {
        for s in 0..t {
            let mut xv = 1.0 + rng_x.sample::<f64, _>(StandardNormal);
            let mut common = 0.0;
            for r in 0..R_TRUE {
                let f_now = factors_ext[(s + 1, r)];
                let f_prev = factors_ext[(s, r)];
                xv += (loadings[(i, r)] + chi[(i, r)]) * (f_now + f_prev);
                common += loadings[(i, r)] * f_now;
            }
            x[(i, s)] = xv;
            y[(i, s)] = BETA_TRUE * xv + common + errors[(i, s)];
        }
    }

    let mut mask = vec![true; n * t];
    for drop in apply_pattern(config.pattern, config.psi, n, t, pattern_seed)? {
        mask[drop.unit * t + drop.period] = false;
    }
    let factors = factors_ext.rows(1, t).into_owned();
    let (panel, report) = PanelData::from_masked(y, vec![x], mask)?;
    debug_assert!(report.dropped_units.is_empty() && report.dropped_periods.is_empty());
    Ok((
        panel,
        GroundTruth {
            beta: BETA_TRUE,
            r0: R_TRUE,
            loadings,
            factors,
        },
    ))
}

/// Mean estimated factor counts per estimator.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RHatMeans {
    pub ic2: f64,
    pub bic3: f64,
    pub er: f64,
    pub gr: f64,
    pub ed: f64,
    pub pa: f64,
}

/// Aggregated results of one simulation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimMetrics {
    /// 100 * (mean corrected estimate - 1).
    pub rel_bias_pct: f64,
    /// Mean standard error over the standard deviation of the estimates.
    pub se_sd_ratio: f64,
    /// Rejection frequency of the 5% z-test of the true null.
    pub size_at_5pct: f64,
    pub mean_r_hat: RHatMeans,
    /// Replications that entered the aggregates.
    pub n_reps: usize,
    pub failures: usize,
}

/// Study-level options.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    /// Rank used for the inference fit (the true rank by default).
    pub r: usize,
    /// Estimate factor counts from a fit at the rule-of-thumb upper bound.
    pub select_factors: bool,
    pub pa_permutations: usize,
    /// Override for the serial-correlation bandwidth; the rule of thumb on
    /// `t_bar` applies when unset.
    pub bandwidth_m: Option<usize>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            r: R_TRUE,
            select_factors: true,
            pa_permutations: PA_PERMUTATIONS,
            bandwidth_m: None,
        }
    }
}

struct RepOutcome {
    beta_tilde: f64,
    std_error: f64,
    reject: bool,
    r_hats: Option<[usize; 6]>,
}

fn inference_options(config: &DgpConfig, opts: &StudyOptions) -> InferenceOptions {
    let m_rule = BiasBandwidths::newey_west_m(config.t_bar as f64);
    match config.error_config {
        ErrorConfig::Homoskedastic | ErrorConfig::FatTails => InferenceOptions {
            bandwidths: BiasBandwidths::new(0, 0),
            vcov: VcovKind::Homoskedastic,
            dof_adjust: true,
            corrections: CorrectionSet::none(),
        },
        ErrorConfig::CrossHet => InferenceOptions {
            bandwidths: BiasBandwidths::new(0, 0),
            vcov: VcovKind::HeteroskedasticRobust,
            dof_adjust: true,
            corrections: CorrectionSet {
                b: true,
                c1: false,
                c2: false,
            },
        },
        ErrorConfig::CrossHetSerial => InferenceOptions {
            bandwidths: BiasBandwidths::new(0, opts.bandwidth_m.unwrap_or(m_rule)),
            vcov: VcovKind::ClusteredByUnit,
            dof_adjust: true,
            corrections: CorrectionSet {
                b: true,
                c1: false,
                c2: true,
            },
        },
    }
}

fn run_rep(config: &DgpConfig, opts: &StudyOptions, rep: u64) -> Result<RepOutcome> {
    let (panel, truth) = generate(config, rep)?;
    let mut fit_opts = IfeOptions::new(opts.r);
    fit_opts.rng_seed = crate::rng::derive(config.seed, &[rep, 10]);
    let fitted = fit(&panel, &fit_opts)?;

    let inf_opts = inference_options(config, opts);
    let report = infer(&fitted, &panel, &inf_opts)?;
    let tests = z_test(&report, &[truth.beta], 0.05)?;

    let r_hats = if opts.select_factors {
        let min_nt = panel.n_units().min(panel.n_periods());
        let rbar = default_rbar(config.n_bar as f64, config.t_bar as f64)
            .min(min_nt.saturating_sub(1))
            .max(1);
        let mut rbar_opts = IfeOptions::new(rbar);
        rbar_opts.rng_seed = crate::rng::derive(config.seed, &[rep, 11]);
        // The upper-bound fit only feeds the residual factor model; a looser
        // stopping rule leaves the selected counts unchanged while avoiding
        // the very flat EM tail at high rank under block missingness.
        rbar_opts.beta_tol = 1e-6;
        rbar_opts.obj_tol = 1e-6;
        let fit_rbar = match fit(&panel, &rbar_opts) {
            Ok(f) => f,
            Err(Error::FitNoConvergence { best, .. }) => *best,
            Err(other) => return Err(other),
        };
        let w = panel.w_matrix(&fit_rbar.beta);
        let mut input = SelectionInput::new(w, rbar);
        input.pa_permutations = opts.pa_permutations;
        input.pa_seed = crate::rng::derive(config.seed, &[rep, 12]);
        let sel = select(&input)?;
        Some([sel.ic2, sel.bic3, sel.er, sel.gr, sel.ed, sel.pa])
    } else {
        None
    };

    Ok(RepOutcome {
        beta_tilde: report.beta_tilde[0],
        std_error: report.std_errors[0],
        reject: tests[0].1,
        r_hats,
    })
}

/// Compensated (Kahan) summation so aggregates do not depend on the order
/// replication results arrive in.
#[derive(Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

fn kahan_mean<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, usize) {
    let mut s = KahanSum::default();
    let mut n = 0usize;
    for v in values {
        s.add(*v);
        n += 1;
    }
    (s.sum / n as f64, n)
}

/// Run `n_reps` replications of a simulation cell and aggregate.
pub fn run_study(config: &DgpConfig, n_reps: usize, opts: &StudyOptions) -> Result<SimMetrics> {
    if n_reps == 0 {
        return Err(Error::InvalidConfig("n_reps must be at least 1".into()));
    }
    config.validate()?;

    let outcomes: Vec<Result<RepOutcome>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(config, opts, rep))
        .collect();

    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures * 100 >= n_reps {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: n_reps,
        });
    }
    let ok: Vec<RepOutcome> = outcomes.into_iter().flatten().collect();

    let betas: Vec<f64> = ok.iter().map(|o| o.beta_tilde).collect();
    let (mean_beta, n_ok) = kahan_mean(betas.iter());
    let mut var = KahanSum::default();
    for b in &betas {
        var.add((b - mean_beta) * (b - mean_beta));
    }
    let sd = (var.sum / (n_ok.saturating_sub(1).max(1)) as f64).sqrt();
    let (mean_se, _) = kahan_mean(ok.iter().map(|o| &o.std_error));

    let mut rejects = KahanSum::default();
    for o in &ok {
        rejects.add(if o.reject { 1.0 } else { 0.0 });
    }

    let mut r_means = [KahanSum::default(); 6];
    let mut r_count = 0usize;
    for o in &ok {
        if let Some(hats) = o.r_hats {
            for (slot, h) in r_means.iter_mut().zip(hats.iter()) {
                slot.add(*h as f64);
            }
            r_count += 1;
        }
    }
    let r_div = r_count.max(1) as f64;
    let mean_r_hat = RHatMeans {
        ic2: r_means[0].sum / r_div,
        bic3: r_means[1].sum / r_div,
        er: r_means[2].sum / r_div,
        gr: r_means[3].sum / r_div,
        ed: r_means[4].sum / r_div,
        pa: r_means[5].sum / r_div,
    };

    Ok(SimMetrics {
        rel_bias_pct: 100.0 * (mean_beta - BETA_TRUE) / BETA_TRUE,
        se_sd_ratio: if sd > 0.0 { mean_se / sd } else { f64::NAN },
        size_at_5pct: rejects.sum / n_ok as f64,
        mean_r_hat,
        n_reps: n_ok,
        failures,
    })
}
