//! Command-line workflows: ingestion, estimation, factor selection, the
//! nuclear-norm route, and the simulation grid.
//!
//! Every run writes a `manifest.ini` echoing the fully resolved
//! configuration; re-running with `--config manifest.ini` reproduces the
//! output files byte for byte. Exit codes: 0 on success, 2 on data errors,
//! 3 on numeric or convergence errors (a partial report is still written
//! when estimation fails to converge).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{fit, IfeFit, IfeOptions};
use crate::factor_count::{default_rbar, permuted_spectrum, select, SelectionInput, PA_PERMUTATIONS};
use crate::inference::{
    infer, long_run_effect, z_test, BiasBandwidths, CorrectionSet, InferenceOptions,
    InferenceReport, VcovKind,
};
use crate::nuclear::{fit_nuclear, post_estimate, NnFit, NnOptions};
use crate::panel::{two_way_within, ConstructionReport, MaskedMatrix, PanelData};
use crate::sim::{run_study, DgpConfig, ErrorConfig, MissingPattern, SimMetrics, StudyOptions};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Interactive fixed effects estimation for unbalanced panels.
#[derive(Parser, Debug)]
#[command(name = "ife", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the model from a long-format CSV and write an inference report.
    Estimate(EstimateArgs),
    /// Estimate the number of factors of the residual factor model.
    SelectFactors(SelectArgs),
    /// Run a Monte Carlo grid and write table-shaped results.
    Simulate(SimulateArgs),
    /// Nuclear-norm estimation followed by iterative refinement.
    NnEstimate(NnArgs),
}

/// Flags shared by the CSV-consuming subcommands.
#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Flat key=value configuration file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with header `unit,period,y,x1,...,xK`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of lagged outcomes to add as regressors.
    #[arg(long)]
    lags: Option<usize>,
    /// Project unit and period effects out of the outcome and regressors.
    #[arg(long)]
    two_way: Option<bool>,
    /// Master seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of factors.
    #[arg(long)]
    r: Option<usize>,
    /// Bandwidth for the weak-exogeneity correction.
    #[arg(long)]
    bandwidth_l: Option<usize>,
    /// Bandwidth for the serial-correlation correction (rule of thumb on the
    /// effective average period count when unset).
    #[arg(long)]
    bandwidth_m: Option<usize>,
    /// Covariance estimator: homoskedastic | hc | cluster.
    #[arg(long)]
    vcov: Option<String>,
    /// Degrees-of-freedom adjustment for the covariance.
    #[arg(long)]
    dof_adjust: Option<bool>,
    /// Number of starting points (5 is a sensible choice for empirical work;
    /// the objective is non-convex).
    #[arg(long)]
    n_starts: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
struct SelectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Upper bound on the number of factors (rule of thumb when unset).
    #[arg(long)]
    r_max: Option<usize>,
    /// Permutation resamples for the parallel analysis.
    #[arg(long)]
    pa_permutations: Option<usize>,
    /// Build the pure factor model from the residuals `y - fitted` instead
    /// of the fitted systematic part.
    #[arg(long)]
    residual_model: Option<bool>,
    #[arg(long)]
    n_starts: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
struct SimulateArgs {
    /// Flat key=value configuration file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated average unit counts.
    #[arg(long)]
    n_bar: Option<String>,
    /// Comma-separated average period counts.
    #[arg(long)]
    t_bar: Option<String>,
    /// Comma-separated missing fractions.
    #[arg(long)]
    psi: Option<String>,
    /// Comma-separated patterns (1, 2, 3).
    #[arg(long)]
    pattern: Option<String>,
    /// Comma-separated error configurations (i, ii, iii, iv).
    #[arg(long)]
    error_config: Option<String>,
    /// Replications per cell.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    pa_permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone)]
struct NnArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fix the refinement rank instead of selecting it.
    #[arg(long)]
    r: Option<usize>,
    /// Estimator whose selection drives the refinement rank:
    /// ic2 | bic3 | er | gr | ed | pa.
    #[arg(long)]
    pick: Option<String>,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long)]
    pa_permutations: Option<usize>,
    /// Refinement iterations.
    #[arg(long)]
    post_iters: Option<usize>,
    /// Subgradient iteration cap.
    #[arg(long)]
    nn_max_iter: Option<usize>,
    /// Subgradient step scale.
    #[arg(long)]
    nn_step: Option<f64>,
    #[arg(long)]
    bandwidth_l: Option<usize>,
    #[arg(long)]
    bandwidth_m: Option<usize>,
    #[arg(long)]
    vcov: Option<String>,
    #[arg(long)]
    dof_adjust: Option<bool>,
}

/// Entry point used by the binary. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Estimate(args) => cmd_estimate_from_args(args),
        Command::SelectFactors(args) => cmd_select_factors_from_args(args),
        Command::Simulate(args) => cmd_simulate_from_args(args),
        Command::NnEstimate(args) => cmd_nn_estimate_from_args(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

/// 2 for data problems, 3 for numeric/convergence problems.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::DuplicateCell { .. }
        | Error::RaggedRow { .. }
        | Error::NonFinite { .. }
        | Error::EmptyPanel
        | Error::ShapeMismatch { .. }
        | Error::RankTooLarge { .. }
        | Error::PatternInfeasible { .. }
        | Error::InvalidConfig(_)
        | Error::Data(_)
        | Error::Io(_) => 2,
        Error::EigenFailure
        | Error::SpectrumFailure
        | Error::NoConvergence { .. }
        | Error::EmNoConvergence { .. }
        | Error::FitNoConvergence { .. }
        | Error::NnNoConvergence { .. }
        | Error::Collinear { .. }
        | Error::DegenerateProjector { .. }
        | Error::ZeroStdErr { .. }
        | Error::UnitRoot { .. }
        | Error::TooManyFailures { .. } => 3,
    }
}

// ---------------------------------------------------------------------------
// Configuration files
// ---------------------------------------------------------------------------

/// Parse a flat `key = value` file. `#` and `;` start comments, `[section]`
/// headers are ignored.
pub fn parse_ini(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = match line.find(['#', ';']) {
            Some(pos) => &line[..pos],
            None => line,
        }
        .trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    map
}

fn load_config(path: &Option<PathBuf>) -> Result<BTreeMap<String, String>> {
    match path {
        Some(p) => Ok(parse_ini(&std::fs::read_to_string(p)?)),
        None => Ok(BTreeMap::new()),
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::InvalidConfig(format!("expected a boolean, got '{other}'"))),
    }
}

fn cfg_parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|e| Error::InvalidConfig(format!("bad value for {key}: {e}"))),
        None => Ok(None),
    }
}

fn cfg_bool(map: &BTreeMap<String, String>, key: &str) -> Result<Option<bool>> {
    map.get(key).map(|raw| parse_bool(raw)).transpose()
}

fn parse_vcov(s: &str) -> Result<VcovKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "homoskedastic" | "homo" | "v" => Ok(VcovKind::Homoskedastic),
        "hc" | "robust" | "heteroskedastic" => Ok(VcovKind::HeteroskedasticRobust),
        "cluster" | "clustered" => Ok(VcovKind::ClusteredByUnit),
        other => Err(Error::InvalidConfig(format!("unknown vcov kind '{other}'"))),
    }
}

fn vcov_label(kind: VcovKind) -> &'static str {
    match kind {
        VcovKind::Homoskedastic => "homoskedastic",
        VcovKind::HeteroskedasticRobust => "hc",
        VcovKind::ClusteredByUnit => "cluster",
    }
}

/// Write a manifest with a fixed key order so outputs are reproducible.
fn write_manifest(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in entries {
        writeln!(text, "{key} = {value}").expect("string write");
    }
    std::fs::write(dir.join("manifest.ini"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Key that sorts numerically when every key in the column parses as an
/// integer, lexicographically otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum SortKey {
    Int(i64),
    Text(String),
}

impl std::fmt::Display for SortKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SortKey::Int(v) => write!(f, "{v}"),
            SortKey::Text(s) => write!(f, "{s}"),
        }
    }
}

fn sort_keys(raw: Vec<String>) -> Vec<SortKey> {
    let all_int = raw.iter().all(|s| s.trim().parse::<i64>().is_ok());
    raw.into_iter()
        .map(|s| {
            if all_int {
                SortKey::Int(s.trim().parse().expect("checked"))
            } else {
                SortKey::Text(s)
            }
        })
        .collect()
}

/// Read a long-format panel CSV. Missing cells are absent rows; no NA
/// sentinel is accepted. Returns the panel, the construction report, and
/// the regressor names from the header.
pub fn read_panel_csv(path: &Path) -> Result<(PanelData, ConstructionReport, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header: {e}")))?
        .clone();
    if headers.len() < 3 {
        return Err(Error::Data(
            "header must be `unit,period,y,x1,...` with at least three columns".into(),
        ));
    }
    for (idx, want) in ["unit", "period", "y"].iter().enumerate() {
        if !headers[idx].eq_ignore_ascii_case(want) {
            return Err(Error::Data(format!(
                "column {} must be named `{want}`, found `{}`",
                idx + 1,
                &headers[idx]
            )));
        }
    }
    let x_names: Vec<String> = headers.iter().skip(3).map(|s| s.to_string()).collect();
    let k = x_names.len();

    let mut units = Vec::new();
    let mut periods = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("bad row: {e}")))?;
        if record.len() != 3 + k {
            return Err(Error::RaggedRow {
                unit: record.get(0).unwrap_or("?").to_string(),
                period: record.get(1).unwrap_or("?").to_string(),
                expected: k,
                found: record.len().saturating_sub(3),
            });
        }
        let parse_f = |field: &str, name: &str| -> Result<f64> {
            field.parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "cannot parse {name}='{field}' at (unit={}, period={})",
                    &record[0], &record[1]
                ))
            })
        };
        let y = parse_f(&record[2], "y")?;
        let mut x = Vec::with_capacity(k);
        for j in 0..k {
            x.push(parse_f(&record[3 + j], &x_names[j])?);
        }
        units.push(record[0].to_string());
        periods.push(record[1].to_string());
        values.push((y, x));
    }
    if values.is_empty() {
        return Err(Error::EmptyPanel);
    }

    let unit_keys = sort_keys(units);
    let period_keys = sort_keys(periods);
    let records: Vec<(SortKey, SortKey, f64, Vec<f64>)> = unit_keys
        .into_iter()
        .zip(period_keys)
        .zip(values)
        .map(|((u, p), (y, x))| (u, p, y, x))
        .collect();
    let (panel, report) = PanelData::from_long_records(&records)?;
    Ok((panel, report, x_names))
}

/// Write a panel to the long CSV format.
pub fn write_panel_csv(path: &Path, d: &PanelData, x_names: &[String]) -> Result<()> {
    let mut out = String::from("unit,period,y");
    for name in x_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for o in d.observed() {
        write!(out, "{},{},{}", o.unit, o.period, d.y_at(*o)).expect("string write");
        for k in 0..d.n_regressors() {
            write!(out, ",{}", d.x_at(k, *o)).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Lag construction
// ---------------------------------------------------------------------------

/// Append `p` lagged outcomes as regressors. Unit `i` contributes period `t`
/// only when `t-1..t-p` are all observed for that unit; period indices are
/// taken as consecutive time.
pub fn build_lags(d: &PanelData, p: usize) -> Result<PanelData> {
    if p == 0 {
        return Ok(d.clone());
    }
    let k = d.n_regressors();
    let mut records = Vec::new();
    for o in d.observed() {
        if o.period < p {
            continue;
        }
        let complete = (1..=p).all(|j| d.is_observed(o.unit, o.period - j));
        if !complete {
            continue;
        }
        let mut x: Vec<f64> = (0..k).map(|c| d.x_at(c, *o)).collect();
        for j in 1..=p {
            x.push(d.y()[(o.unit, o.period - j)]);
        }
        records.push((o.unit, o.period, d.y_at(*o), x));
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "lag construction with p = {p} leaves no observations"
        )));
    }
    Ok(PanelData::from_long_records(&records)?.0)
}

fn lag_names(x_names: &[String], p: usize) -> Vec<String> {
    let mut names = x_names.to_vec();
    for j in 1..=p {
        names.push(format!("y_lag{j}"));
    }
    names
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CoefficientEntry {
    name: String,
    beta_hat: f64,
    beta_tilde: f64,
    b_hat: f64,
    c1_hat: f64,
    c2_hat: f64,
    std_error: f64,
    z: f64,
    reject_5pct: bool,
}

#[derive(Serialize)]
struct LongRunEntry {
    name: String,
    estimate: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct EstimateReport {
    command: String,
    version: String,
    seed: u64,
    n_units: usize,
    n_periods: usize,
    n_obs: usize,
    k: usize,
    r: usize,
    lags: usize,
    two_way: bool,
    converged: bool,
    outer_iterations: usize,
    start_index_of_best: usize,
    objective: f64,
    sigma2: f64,
    vcov: String,
    dof_adjusted: bool,
    bandwidth_l: usize,
    bandwidth_m: usize,
    coefficients: Vec<CoefficientEntry>,
    long_run_effects: Vec<LongRunEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nuclear: Option<NuclearSection>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct NuclearSection {
    beta_star: Vec<f64>,
    nuclear_objective: f64,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<SelectionSection>,
    picked_estimator: String,
    post_iterations: usize,
}

#[derive(Serialize)]
struct SelectionSection {
    r_max: usize,
    ic2: usize,
    bic3: usize,
    er: usize,
    gr: usize,
    ed: usize,
    pa: usize,
}

fn build_report(
    command: &str,
    seed: u64,
    d: &PanelData,
    names: &[String],
    lags: usize,
    two_way: bool,
    fit: &IfeFit,
    report: &InferenceReport,
    rejects: &[(f64, bool)],
    bandwidths: BiasBandwidths,
    warnings: Vec<String>,
) -> Result<EstimateReport> {
    let k = d.n_regressors();
    let coefficients = (0..k)
        .map(|a| CoefficientEntry {
            name: names.get(a).cloned().unwrap_or_else(|| format!("x{}", a + 1)),
            beta_hat: report.beta_hat[a],
            beta_tilde: report.beta_tilde[a],
            b_hat: report.b_hat[a],
            c1_hat: report.c1_hat[a],
            c2_hat: report.c2_hat[a],
            std_error: report.std_errors[a],
            z: rejects[a].0,
            reject_5pct: rejects[a].1,
        })
        .collect();

    let mut long_run_effects = Vec::new();
    if lags > 0 {
        let gamma_indices: Vec<usize> = (k - lags..k).collect();
        for a in 0..k - lags {
            let (estimate, std_error) = long_run_effect(a, &gamma_indices, report)?;
            long_run_effects.push(LongRunEntry {
                name: names[a].clone(),
                estimate,
                std_error,
            });
        }
    }

    Ok(EstimateReport {
        command: command.to_string(),
        version: VERSION.to_string(),
        seed,
        n_units: d.n_units(),
        n_periods: d.n_periods(),
        n_obs: d.n_obs(),
        k,
        r: fit.factor.r(),
        lags,
        two_way,
        converged: fit.converged,
        outer_iterations: fit.outer_iterations,
        start_index_of_best: fit.start_index_of_best,
        objective: fit.objective,
        sigma2: fit.sigma2,
        vcov: vcov_label(report.vcov_kind).to_string(),
        dof_adjusted: report.dof_adjusted,
        bandwidth_l: bandwidths.l,
        bandwidth_m: bandwidths.m,
        coefficients,
        long_run_effects,
        nuclear: None,
        warnings,
    })
}

fn write_report_files(dir: &Path, report: &EstimateReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("serializable report");
    std::fs::write(dir.join("report.json"), json + "\n")?;

    let mut table = String::from("name,beta_hat,beta_tilde,std_error,z,reject_5pct\n");
    for c in &report.coefficients {
        writeln!(
            table,
            "{},{},{},{},{},{}",
            c.name, c.beta_hat, c.beta_tilde, c.std_error, c.z, c.reject_5pct
        )
        .expect("string write");
    }
    for lr in &report.long_run_effects {
        writeln!(
            table,
            "long_run({}),,{},{},,",
            lr.name, lr.estimate, lr.std_error
        )
        .expect("string write");
    }
    std::fs::write(dir.join("table.csv"), table)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

struct PreparedPanel {
    panel: PanelData,
    names: Vec<String>,
    warnings: Vec<String>,
    lags: usize,
    two_way: bool,
}

fn prepare_panel(
    input: &Path,
    lags: usize,
    two_way: bool,
) -> Result<PreparedPanel> {
    let (raw, report, x_names) = read_panel_csv(input)?;
    let mut warnings = report.warnings.clone();
    let lagged = build_lags(&raw, lags)?;
    if lags > 0 {
        warnings.push(format!(
            "lag construction kept {} of {} observations",
            lagged.n_obs(),
            raw.n_obs()
        ));
    }
    let panel = if two_way {
        two_way_within(&lagged)?
    } else {
        lagged
    };
    Ok(PreparedPanel {
        panel,
        names: lag_names(&x_names, lags),
        warnings,
        lags,
        two_way,
    })
}

struct EstimateConfig {
    input: PathBuf,
    out: PathBuf,
    r: usize,
    lags: usize,
    two_way: bool,
    bandwidth_l: usize,
    bandwidth_m: Option<usize>,
    vcov: VcovKind,
    dof_adjust: bool,
    n_starts: usize,
    seed: u64,
}

fn resolve_estimate(args: &EstimateArgs) -> Result<EstimateConfig> {
    let file = load_config(&args.common.config)?;
    let input = args
        .common
        .input
        .clone()
        .or_else(|| file.get("input").map(PathBuf::from))
        .ok_or_else(|| Error::InvalidConfig("missing --input".into()))?;
    Ok(EstimateConfig {
        input,
        out: args
            .common
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(".")),
        r: args.r.or(cfg_parse(&file, "r")?).unwrap_or(0),
        lags: args.common.lags.or(cfg_parse(&file, "lags")?).unwrap_or(0),
        two_way: args
            .common
            .two_way
            .or(cfg_bool(&file, "two_way")?)
            .unwrap_or(false),
        bandwidth_l: args
            .bandwidth_l
            .or(cfg_parse(&file, "bandwidth_l")?)
            .unwrap_or(5),
        bandwidth_m: args.bandwidth_m.or(cfg_parse(&file, "bandwidth_m")?),
        vcov: match (&args.vcov, file.get("vcov")) {
            (Some(s), _) => parse_vcov(s)?,
            (None, Some(s)) => parse_vcov(s)?,
            (None, None) => VcovKind::ClusteredByUnit,
        },
        dof_adjust: args
            .dof_adjust
            .or(cfg_bool(&file, "dof_adjust")?)
            .unwrap_or(true),
        n_starts: args.n_starts.or(cfg_parse(&file, "n_starts")?).unwrap_or(1),
        seed: args.common.seed.or(cfg_parse(&file, "seed")?).unwrap_or(0),
    })
}

fn cmd_estimate_from_args(args: EstimateArgs) -> Result<i32> {
    let cfg = resolve_estimate(&args)?;
    cmd_estimate(&cfg)
}

fn effective_t_bar(d: &PanelData) -> f64 {
    d.n_obs() as f64 / d.n_units() as f64
}

fn cmd_estimate(cfg: &EstimateConfig) -> Result<i32> {
    std::fs::create_dir_all(&cfg.out)?;
    let prepared = prepare_panel(&cfg.input, cfg.lags, cfg.two_way)?;
    let d = &prepared.panel;

    let mut opts = IfeOptions::new(cfg.r);
    opts.n_starts = cfg.n_starts;
    opts.rng_seed = cfg.seed;
    let (fit_result, converged) = match fit(d, &opts) {
        Ok(f) => (f, true),
        Err(Error::FitNoConvergence { best, .. }) => (*best, false),
        Err(other) => return Err(other),
    };

    let bandwidths = BiasBandwidths::new(
        cfg.bandwidth_l,
        cfg.bandwidth_m
            .unwrap_or_else(|| BiasBandwidths::newey_west_m(effective_t_bar(d))),
    );
    let inf = infer(
        &fit_result,
        d,
        &InferenceOptions {
            bandwidths,
            vcov: cfg.vcov,
            dof_adjust: cfg.dof_adjust,
            corrections: CorrectionSet::all(),
        },
    )?;
    let tests = z_test(&inf, &vec![0.0; d.n_regressors()], 0.05)?;

    let mut warnings = prepared.warnings.clone();
    if !fit_result.weakly_identified_units.is_empty() {
        warnings.push(format!(
            "{} unit(s) observed for at most r periods; their loadings are weakly identified",
            fit_result.weakly_identified_units.len()
        ));
    }
    let report = build_report(
        "estimate",
        cfg.seed,
        d,
        &prepared.names,
        prepared.lags,
        prepared.two_way,
        &fit_result,
        &inf,
        &tests,
        bandwidths,
        warnings,
    )?;
    write_report_files(&cfg.out, &report)?;
    write_manifest(
        &cfg.out,
        &[
            ("command", "estimate".into()),
            ("version", VERSION.into()),
            ("input", cfg.input.display().to_string()),
            ("out", cfg.out.display().to_string()),
            ("r", cfg.r.to_string()),
            ("lags", cfg.lags.to_string()),
            ("two_way", cfg.two_way.to_string()),
            ("bandwidth_l", bandwidths.l.to_string()),
            ("bandwidth_m", bandwidths.m.to_string()),
            ("vcov", vcov_label(cfg.vcov).into()),
            ("dof_adjust", cfg.dof_adjust.to_string()),
            ("n_starts", cfg.n_starts.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    Ok(if converged { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// select-factors
// ---------------------------------------------------------------------------

struct SelectConfig {
    input: PathBuf,
    out: PathBuf,
    r_max: Option<usize>,
    lags: usize,
    two_way: bool,
    pa_permutations: usize,
    residual_model: bool,
    n_starts: usize,
    seed: u64,
}

fn resolve_select(args: &SelectArgs) -> Result<SelectConfig> {
    let file = load_config(&args.common.config)?;
    let input = args
        .common
        .input
        .clone()
        .or_else(|| file.get("input").map(PathBuf::from))
        .ok_or_else(|| Error::InvalidConfig("missing --input".into()))?;
    Ok(SelectConfig {
        input,
        out: args
            .common
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(".")),
        r_max: args.r_max.or(cfg_parse(&file, "r_max")?),
        lags: args.common.lags.or(cfg_parse(&file, "lags")?).unwrap_or(0),
        two_way: args
            .common
            .two_way
            .or(cfg_bool(&file, "two_way")?)
            .unwrap_or(false),
        pa_permutations: args
            .pa_permutations
            .or(cfg_parse(&file, "pa_permutations")?)
            .unwrap_or(PA_PERMUTATIONS),
        residual_model: args
            .residual_model
            .or(cfg_bool(&file, "residual_model")?)
            .unwrap_or(false),
        n_starts: args.n_starts.or(cfg_parse(&file, "n_starts")?).unwrap_or(1),
        seed: args.common.seed.or(cfg_parse(&file, "seed")?).unwrap_or(0),
    })
}

fn cmd_select_factors_from_args(args: SelectArgs) -> Result<i32> {
    let cfg = resolve_select(&args)?;
    cmd_select_factors(&cfg)
}

#[derive(Serialize)]
struct SelectReport {
    command: String,
    version: String,
    seed: u64,
    n_units: usize,
    n_periods: usize,
    n_obs: usize,
    converged: bool,
    r_max: usize,
    residual_model: bool,
    ic2: usize,
    bic3: usize,
    er: usize,
    gr: usize,
    ed: usize,
    pa: usize,
    pa_permutations: usize,
    pa_thresholds: Vec<f64>,
    eigenvalue_spectrum: Vec<f64>,
    warnings: Vec<String>,
}

/// The fitted systematic part of the model, zero-filled off the observed
/// set; with `residual_model` the outcome minus that part instead.
fn pure_factor_matrix(d: &PanelData, fit: &IfeFit, residual_model: bool) -> MaskedMatrix {
    let (n, t) = (d.n_units(), d.n_periods());
    let mut values = DMatrix::zeros(n, t);
    for o in d.observed() {
        let fitted: f64 = (0..d.n_regressors())
            .map(|k| fit.beta[k] * d.x_at(k, *o))
            .sum();
        values[(o.unit, o.period)] = if residual_model {
            d.y_at(*o) - fitted
        } else {
            fitted
        };
    }
    MaskedMatrix {
        values,
        mask: d.mask().to_vec(),
    }
}

fn cmd_select_factors(cfg: &SelectConfig) -> Result<i32> {
    std::fs::create_dir_all(&cfg.out)?;
    let prepared = prepare_panel(&cfg.input, cfg.lags, cfg.two_way)?;
    let d = &prepared.panel;
    let min_nt = d.n_units().min(d.n_periods());
    let r_max = cfg
        .r_max
        .unwrap_or_else(|| {
            default_rbar(
                d.n_obs() as f64 / d.n_periods() as f64,
                d.n_obs() as f64 / d.n_units() as f64,
            )
        })
        .min(min_nt.saturating_sub(1))
        .max(1);

    let mut opts = IfeOptions::new(r_max);
    opts.n_starts = cfg.n_starts;
    opts.rng_seed = cfg.seed;
    // The first-stage fit only feeds the residual factor model; the selected
    // counts are insensitive to the last decimals of beta, and the EM tail is
    // very flat at the upper-bound rank.
    opts.beta_tol = 1e-6;
    opts.obj_tol = 1e-6;
    let (fit_result, converged) = match fit(d, &opts) {
        Ok(f) => (f, true),
        Err(Error::FitNoConvergence { best, .. }) => (*best, false),
        Err(other) => return Err(other),
    };

    let w = pure_factor_matrix(d, &fit_result, cfg.residual_model);
    let mut input = SelectionInput::new(w.clone(), r_max);
    input.pa_permutations = cfg.pa_permutations;
    input.pa_seed = crate::rng::derive(cfg.seed, &[0x5E7EC7]);
    let sel = select(&input)?;

    // Spectrum file: descending singular values of the scaled matrix next to
    // the permutation maxima, for plotting.
    let nt_sqrt = ((d.n_units() * d.n_periods()) as f64).sqrt();
    let sample_sv: Vec<f64> = sel
        .eigenvalue_spectrum
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    let permuted = permuted_spectrum(&w, cfg.pa_permutations, input.pa_seed)?;
    let keep = 20.min(sample_sv.len());
    let mut spectrum = String::from("rank,singular_value,permuted_max\n");
    for r in 0..keep {
        writeln!(
            spectrum,
            "{},{},{}",
            r + 1,
            sample_sv[r],
            permuted[r] / nt_sqrt
        )
        .expect("string write");
    }
    std::fs::write(cfg.out.join("spectrum.csv"), spectrum)?;

    let report = SelectReport {
        command: "select-factors".into(),
        version: VERSION.into(),
        seed: cfg.seed,
        n_units: d.n_units(),
        n_periods: d.n_periods(),
        n_obs: d.n_obs(),
        converged,
        r_max,
        residual_model: cfg.residual_model,
        ic2: sel.ic2,
        bic3: sel.bic3,
        er: sel.er,
        gr: sel.gr,
        ed: sel.ed,
        pa: sel.pa,
        pa_permutations: cfg.pa_permutations,
        pa_thresholds: sel.pa_thresholds.clone(),
        eigenvalue_spectrum: sel.eigenvalue_spectrum.iter().take(keep).copied().collect(),
        warnings: prepared.warnings.clone(),
    };
    let json = serde_json::to_string_pretty(&report).expect("serializable report");
    std::fs::write(cfg.out.join("report.json"), json + "\n")?;

    write_manifest(
        &cfg.out,
        &[
            ("command", "select-factors".into()),
            ("version", VERSION.into()),
            ("input", cfg.input.display().to_string()),
            ("out", cfg.out.display().to_string()),
            ("r_max", r_max.to_string()),
            ("lags", cfg.lags.to_string()),
            ("two_way", cfg.two_way.to_string()),
            ("pa_permutations", cfg.pa_permutations.to_string()),
            ("residual_model", cfg.residual_model.to_string()),
            ("n_starts", cfg.n_starts.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    Ok(if converged { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateConfig {
    out: PathBuf,
    n_bar: Vec<usize>,
    t_bar: Vec<usize>,
    psi: Vec<f64>,
    patterns: Vec<MissingPattern>,
    error_configs: Vec<ErrorConfig>,
    reps: usize,
    pa_permutations: usize,
    seed: u64,
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::InvalidConfig(format!("bad {what} entry '{s}': {e}")))
        })
        .collect()
}

fn resolve_simulate(args: &SimulateArgs) -> Result<SimulateConfig> {
    let file = load_config(&args.config)?;
    let pick = |cli: &Option<String>, key: &str, default: &str| -> String {
        cli.clone()
            .or_else(|| file.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    };
    Ok(SimulateConfig {
        out: args
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(".")),
        n_bar: parse_list(&pick(&args.n_bar, "n_bar", "120"), "n_bar")?,
        t_bar: parse_list(&pick(&args.t_bar, "t_bar", "24"), "t_bar")?,
        psi: parse_list(&pick(&args.psi, "psi", "0"), "psi")?,
        patterns: parse_list(&pick(&args.pattern, "pattern", "1"), "pattern")?,
        error_configs: parse_list(&pick(&args.error_config, "error_config", "i"), "error_config")?,
        reps: args.reps.or(cfg_parse(&file, "reps")?).unwrap_or(100),
        pa_permutations: args
            .pa_permutations
            .or(cfg_parse(&file, "pa_permutations")?)
            .unwrap_or(PA_PERMUTATIONS),
        seed: args.seed.or(cfg_parse(&file, "seed")?).unwrap_or(0),
    })
}

fn cmd_simulate_from_args(args: SimulateArgs) -> Result<i32> {
    let cfg = resolve_simulate(&args)?;
    cmd_simulate(&cfg)
}

#[derive(Serialize)]
struct SimulateCell {
    n_bar: usize,
    t_bar: usize,
    psi: f64,
    pattern: String,
    error_config: String,
    metrics: SimMetrics,
}

#[derive(Serialize)]
struct SimulateReport {
    command: String,
    version: String,
    seed: u64,
    reps: usize,
    pa_permutations: usize,
    cells: Vec<SimulateCell>,
}

fn cmd_simulate(cfg: &SimulateConfig) -> Result<i32> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut table = String::from("nbar,tbar,psi,pattern,config,bias,ratio,size,ic2,bic3,er,gr,ed,pa,reps\n");
    let mut cells = Vec::new();
    for &error_config in &cfg.error_configs {
        for &pattern in &cfg.patterns {
            for &n_bar in &cfg.n_bar {
                for &t_bar in &cfg.t_bar {
                    for &psi in &cfg.psi {
                        let dgp = DgpConfig {
                            n_bar,
                            t_bar,
                            psi,
                            pattern,
                            error_config,
                            seed: cfg.seed,
                        };
                        let mut study = StudyOptions::default();
                        study.pa_permutations = cfg.pa_permutations;
                        let metrics = run_study(&dgp, cfg.reps, &study)?;
                        writeln!(
                            table,
                            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                            n_bar,
                            t_bar,
                            psi,
                            pattern.label(),
                            error_config.label(),
                            metrics.rel_bias_pct,
                            metrics.se_sd_ratio,
                            metrics.size_at_5pct,
                            metrics.mean_r_hat.ic2,
                            metrics.mean_r_hat.bic3,
                            metrics.mean_r_hat.er,
                            metrics.mean_r_hat.gr,
                            metrics.mean_r_hat.ed,
                            metrics.mean_r_hat.pa,
                            metrics.n_reps
                        )
                        .expect("string write");
                        cells.push(SimulateCell {
                            n_bar,
                            t_bar,
                            psi,
                            pattern: pattern.label().to_string(),
                            error_config: error_config.label().to_string(),
                            metrics,
                        });
                    }
                }
            }
        }
    }
    std::fs::write(cfg.out.join("table.csv"), table)?;
    let report = SimulateReport {
        command: "simulate".into(),
        version: VERSION.into(),
        seed: cfg.seed,
        reps: cfg.reps,
        pa_permutations: cfg.pa_permutations,
        cells,
    };
    let json = serde_json::to_string_pretty(&report).expect("serializable report");
    std::fs::write(cfg.out.join("report.json"), json + "\n")?;
    write_manifest(
        &cfg.out,
        &[
            ("command", "simulate".into()),
            ("version", VERSION.into()),
            ("out", cfg.out.display().to_string()),
            ("n_bar", join(&cfg.n_bar)),
            ("t_bar", join(&cfg.t_bar)),
            ("psi", join(&cfg.psi)),
            (
                "pattern",
                cfg.patterns.iter().map(|p| p.label()).collect::<Vec<_>>().join(","),
            ),
            (
                "error_config",
                cfg.error_configs
                    .iter()
                    .map(|c| c.label())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("reps", cfg.reps.to_string()),
            ("pa_permutations", cfg.pa_permutations.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    Ok(0)
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

// ---------------------------------------------------------------------------
// nn-estimate
// ---------------------------------------------------------------------------

struct NnConfig {
    input: PathBuf,
    out: PathBuf,
    r: Option<usize>,
    pick: String,
    r_max: Option<usize>,
    lags: usize,
    two_way: bool,
    pa_permutations: usize,
    post_iters: usize,
    nn_max_iter: usize,
    nn_step: f64,
    bandwidth_l: usize,
    bandwidth_m: Option<usize>,
    vcov: VcovKind,
    dof_adjust: bool,
    seed: u64,
}

fn resolve_nn(args: &NnArgs) -> Result<NnConfig> {
    let file = load_config(&args.common.config)?;
    let defaults = NnOptions::default();
    let input = args
        .common
        .input
        .clone()
        .or_else(|| file.get("input").map(PathBuf::from))
        .ok_or_else(|| Error::InvalidConfig("missing --input".into()))?;
    Ok(NnConfig {
        input,
        out: args
            .common
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(".")),
        r: args.r.or(cfg_parse(&file, "r")?),
        pick: args
            .pick
            .clone()
            .or_else(|| file.get("pick").cloned())
            .unwrap_or_else(|| "pa".to_string()),
        r_max: args.r_max.or(cfg_parse(&file, "r_max")?),
        lags: args.common.lags.or(cfg_parse(&file, "lags")?).unwrap_or(0),
        two_way: args
            .common
            .two_way
            .or(cfg_bool(&file, "two_way")?)
            .unwrap_or(false),
        pa_permutations: args
            .pa_permutations
            .or(cfg_parse(&file, "pa_permutations")?)
            .unwrap_or(PA_PERMUTATIONS),
        post_iters: args.post_iters.or(cfg_parse(&file, "post_iters")?).unwrap_or(4),
        nn_max_iter: args
            .nn_max_iter
            .or(cfg_parse(&file, "nn_max_iter")?)
            .unwrap_or(defaults.max_iter),
        nn_step: args.nn_step.or(cfg_parse(&file, "nn_step")?).unwrap_or(defaults.step_scale),
        bandwidth_l: args
            .bandwidth_l
            .or(cfg_parse(&file, "bandwidth_l")?)
            .unwrap_or(5),
        bandwidth_m: args.bandwidth_m.or(cfg_parse(&file, "bandwidth_m")?),
        vcov: match (&args.vcov, file.get("vcov")) {
            (Some(s), _) => parse_vcov(s)?,
            (None, Some(s)) => parse_vcov(s)?,
            (None, None) => VcovKind::ClusteredByUnit,
        },
        dof_adjust: args
            .dof_adjust
            .or(cfg_bool(&file, "dof_adjust")?)
            .unwrap_or(true),
        seed: args.common.seed.or(cfg_parse(&file, "seed")?).unwrap_or(0),
    })
}

fn cmd_nn_estimate_from_args(args: NnArgs) -> Result<i32> {
    let cfg = resolve_nn(&args)?;
    cmd_nn_estimate(&cfg)
}

fn picked_rank(sel: &crate::factor_count::SelectionResult, pick: &str) -> Result<usize> {
    Ok(match pick.to_ascii_lowercase().as_str() {
        "ic2" => sel.ic2,
        "bic3" => sel.bic3,
        "er" => sel.er,
        "gr" => sel.gr,
        "ed" => sel.ed,
        "pa" => sel.pa,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown estimator '{other}' (expected ic2|bic3|er|gr|ed|pa)"
            )))
        }
    })
}

fn cmd_nn_estimate(cfg: &NnConfig) -> Result<i32> {
    std::fs::create_dir_all(&cfg.out)?;
    let prepared = prepare_panel(&cfg.input, cfg.lags, cfg.two_way)?;
    let d = &prepared.panel;

    let nn_opts = NnOptions {
        max_iter: cfg.nn_max_iter,
        step_scale: cfg.nn_step,
        ..NnOptions::default()
    };
    let (nn, nn_converged): (NnFit, bool) = match fit_nuclear(d, &nn_opts) {
        Ok(f) => (f, true),
        Err(Error::NnNoConvergence { best, .. }) => (*best, false),
        Err(other) => return Err(other),
    };

    // Rank for the refinement: fixed, or selected from the residual factor
    // model at the convex estimate.
    let min_nt = d.n_units().min(d.n_periods());
    let (r, selection) = match cfg.r {
        Some(r) => (r, None),
        None => {
            let r_max = cfg
                .r_max
                .unwrap_or_else(|| {
                    default_rbar(
                        d.n_obs() as f64 / d.n_periods() as f64,
                        d.n_obs() as f64 / d.n_units() as f64,
                    )
                })
                .min(min_nt.saturating_sub(1))
                .max(1);
            let w = d.w_matrix(&nn.beta_star);
            let mut input = SelectionInput::new(w, r_max);
            input.pa_permutations = cfg.pa_permutations;
            input.pa_seed = crate::rng::derive(cfg.seed, &[0x55E1EC7]);
            let sel = select(&input)?;
            let r = picked_rank(&sel, &cfg.pick)?;
            (
                r,
                Some(SelectionSection {
                    r_max,
                    ic2: sel.ic2,
                    bic3: sel.bic3,
                    er: sel.er,
                    gr: sel.gr,
                    ed: sel.ed,
                    pa: sel.pa,
                }),
            )
        }
    };

    let post = post_estimate(&nn.beta_star, d, r, cfg.post_iters)?;
    let bandwidths = BiasBandwidths::new(
        cfg.bandwidth_l,
        cfg.bandwidth_m
            .unwrap_or_else(|| BiasBandwidths::newey_west_m(effective_t_bar(d))),
    );
    let inf = infer(
        &post,
        d,
        &InferenceOptions {
            bandwidths,
            vcov: cfg.vcov,
            dof_adjust: cfg.dof_adjust,
            corrections: CorrectionSet::all(),
        },
    )?;
    let tests = z_test(&inf, &vec![0.0; d.n_regressors()], 0.05)?;

    let mut report = build_report(
        "nn-estimate",
        cfg.seed,
        d,
        &prepared.names,
        prepared.lags,
        prepared.two_way,
        &post,
        &inf,
        &tests,
        bandwidths,
        prepared.warnings.clone(),
    )?;
    report.nuclear = Some(NuclearSection {
        beta_star: nn.beta_star.iter().copied().collect(),
        nuclear_objective: nn.nuclear_objective,
        iterations: nn.iterations,
        selection,
        picked_estimator: if cfg.r.is_some() {
            "fixed".to_string()
        } else {
            cfg.pick.to_ascii_lowercase()
        },
        post_iterations: cfg.post_iters,
    });
    write_report_files(&cfg.out, &report)?;
    write_manifest(
        &cfg.out,
        &[
            ("command", "nn-estimate".into()),
            ("version", VERSION.into()),
            ("input", cfg.input.display().to_string()),
            ("out", cfg.out.display().to_string()),
            (
                "r",
                cfg.r.map(|r| r.to_string()).unwrap_or_else(|| "auto".into()),
            ),
            ("pick", cfg.pick.clone()),
            ("lags", cfg.lags.to_string()),
            ("two_way", cfg.two_way.to_string()),
            ("pa_permutations", cfg.pa_permutations.to_string()),
            ("post_iters", cfg.post_iters.to_string()),
            ("nn_max_iter", cfg.nn_max_iter.to_string()),
            ("nn_step", cfg.nn_step.to_string()),
            ("bandwidth_l", bandwidths.l.to_string()),
            ("bandwidth_m", bandwidths.m.to_string()),
            ("vcov", vcov_label(cfg.vcov).into()),
            ("dof_adjust", cfg.dof_adjust.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    Ok(if nn_converged { 0 } else { 3 })
}
