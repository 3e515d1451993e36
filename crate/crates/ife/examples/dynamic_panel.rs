//! Dynamic panel workflow: lagged outcomes as regressors, two-way within
//! projection, bias corrections, and the long-run effect.
//!
//! Run with: `cargo run --release --example dynamic_panel`

use ife::cli::build_lags;
use ife::estimator::{fit, IfeOptions};
use ife::inference::{
    infer, long_run_effect, BiasBandwidths, CorrectionSet, InferenceOptions, VcovKind,
};
use ife::panel::{two_way_within, PanelData};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() {
    // y_it = 0.6 d_it + 0.5 y_{t-1} + 0.25 y_{t-2} + unit/time effects
    //        + factor structure + noise; persistence 0.75.
    let (n, t, burn) = (120, 60, 50);
    let gammas = [0.5, 0.25];
    let beta = 0.6;
    let mut rng = ife::rng::rng(2024, &[0]);
    let mut records = Vec::new();
    for i in 0..n {
        let alpha: f64 = rng.sample::<f64, _>(StandardNormal);
        let lambda: f64 = rng.sample::<f64, _>(StandardNormal);
        let mut lag1 = 0.0;
        let mut lag2 = 0.0;
        for s in 0..burn + t {
            let f: f64 = rng.sample::<f64, _>(StandardNormal);
            let d = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let y = beta * d
                + gammas[0] * lag1
                + gammas[1] * lag2
                + alpha
                + 0.3 * lambda * f
                + 0.2 * rng.sample::<f64, _>(StandardNormal);
            if s >= burn {
                records.push((i as u32, (s - burn) as u32, y, vec![d]));
            }
            lag2 = lag1;
            lag1 = y;
        }
    }
    let (raw, _) = PanelData::from_long_records(&records).expect("panel");

    let lagged = build_lags(&raw, 2).expect("lags");
    let within = two_way_within(&lagged).expect("within");
    println!(
        "estimation sample: {} observations, {} regressors (d + 2 lags)",
        within.n_obs(),
        within.n_regressors()
    );

    let fitted = fit(&within, &IfeOptions::new(1)).expect("fit");
    let report = infer(
        &fitted,
        &within,
        &InferenceOptions {
            bandwidths: BiasBandwidths::new(5, 3),
            vcov: VcovKind::ClusteredByUnit,
            dof_adjust: true,
            corrections: CorrectionSet::all(),
        },
    )
    .expect("inference");

    println!(
        "short-run effect: {:.4} (se {:.4}), persistence: {:.4}",
        report.beta_tilde[0],
        report.std_errors[0],
        report.beta_tilde[1] + report.beta_tilde[2]
    );
    let (phi, phi_se) = long_run_effect(0, &[1, 2], &report).expect("long run");
    println!(
        "long-run effect: {:.4} (se {:.4}); truth {:.4}",
        phi,
        phi_se,
        beta / (1.0 - gammas.iter().sum::<f64>())
    );
}
