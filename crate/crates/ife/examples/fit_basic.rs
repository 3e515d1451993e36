//! Fit an interactive fixed effects model on a simulated unbalanced panel
//! and print the inference report.
//!
//! Run with: `cargo run --release --example fit_basic`

use ife::estimator::{fit, IfeOptions};
use ife::inference::{infer, z_test, InferenceOptions};
use ife::sim::{generate, DgpConfig, ErrorConfig, MissingPattern};

fn main() {
    // One regressor, two factors, 20% of the cells missing at random.
    let config = DgpConfig {
        n_bar: 100,
        t_bar: 30,
        psi: 0.2,
        pattern: MissingPattern::P1,
        error_config: ErrorConfig::Homoskedastic,
        seed: 7,
    };
    let (panel, truth) = generate(&config, 0).expect("generate");
    println!(
        "panel: {} units x {} periods, {} observed cells ({:.0}% missing)",
        panel.n_units(),
        panel.n_periods(),
        panel.n_obs(),
        100.0 * (1.0 - panel.n_obs() as f64 / (panel.n_units() * panel.n_periods()) as f64)
    );

    let fit = fit(&panel, &IfeOptions::new(truth.r0)).expect("fit");
    println!(
        "converged in {} outer iterations, objective {:.6}",
        fit.outer_iterations, fit.objective
    );

    let report = infer(&fit, &panel, &InferenceOptions::default()).expect("inference");
    let tests = z_test(&report, &[0.0], 0.05).expect("z test");
    println!(
        "beta_hat = {:.4} (true {}), se = {:.4}, z = {:.2}",
        report.beta_hat[0], truth.beta, report.std_errors[0], tests[0].0
    );
}
