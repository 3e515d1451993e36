//! Estimate the number of factors of a simulated panel with all six
//! selectors and print the singular-value spectrum next to the permutation
//! thresholds.
//!
//! Run with: `cargo run --release --example factor_selection`

use ife::estimator::{fit, IfeOptions};
use ife::factor_count::{default_rbar, permuted_spectrum, select, SelectionInput};
use ife::sim::{generate, DgpConfig, ErrorConfig, MissingPattern};

fn main() {
    let config = DgpConfig {
        n_bar: 120,
        t_bar: 48,
        psi: 0.2,
        pattern: MissingPattern::P1,
        error_config: ErrorConfig::Homoskedastic,
        seed: 11,
    };
    let (panel, truth) = generate(&config, 0).expect("generate");

    // First-stage fit at the rule-of-thumb upper bound.
    let r_max = default_rbar(config.n_bar as f64, config.t_bar as f64);
    let mut opts = IfeOptions::new(r_max);
    opts.beta_tol = 1e-6;
    opts.obj_tol = 1e-6;
    let first_stage = fit(&panel, &opts).expect("first-stage fit");
    println!("first-stage fit with r = {r_max}: beta = {:.4}", first_stage.beta[0]);

    let w = panel.w_matrix(&first_stage.beta);
    let mut input = SelectionInput::new(w.clone(), r_max);
    input.pa_seed = 42;
    let sel = select(&input).expect("selection");
    println!(
        "estimates (true = {}): IC2 {} | BIC3 {} | ER {} | GR {} | ED {} | PA {}",
        truth.r0, sel.ic2, sel.bic3, sel.er, sel.gr, sel.ed, sel.pa
    );

    let scale = ((panel.n_units() * panel.n_periods()) as f64).sqrt();
    let permuted = permuted_spectrum(&w, 199, 42).expect("permutations");
    println!("rank  singular value   permuted max");
    for r in 0..8 {
        println!(
            "{:>4}  {:>13.4}  {:>13.4}",
            r + 1,
            sel.eigenvalue_spectrum[r].sqrt(),
            permuted[r] / scale
        );
    }
}
