//! Run a small Monte Carlo cell and print the aggregated metrics.
//!
//! Run with: `cargo run --release --example monte_carlo`

use ife::sim::{run_study, DgpConfig, ErrorConfig, MissingPattern, StudyOptions};
use std::time::Instant;

fn main() {
    let config = DgpConfig {
        n_bar: 120,
        t_bar: 24,
        psi: 0.2,
        pattern: MissingPattern::P1,
        error_config: ErrorConfig::Homoskedastic,
        seed: 1,
    };
    let mut opts = StudyOptions::default();
    opts.pa_permutations = 99;

    let reps = 50;
    let start = Instant::now();
    let metrics = run_study(&config, reps, &opts).expect("study");
    println!("{reps} replications in {:.1?}", start.elapsed());
    println!(
        "bias {:+.3}%  se/sd ratio {:.3}  size at 5% {:.3}  ({} failures)",
        metrics.rel_bias_pct, metrics.se_sd_ratio, metrics.size_at_5pct, metrics.failures
    );
    let r = &metrics.mean_r_hat;
    println!(
        "mean factor counts (true 2): IC2 {:.2} | BIC3 {:.2} | ER {:.2} | GR {:.2} | ED {:.2} | PA {:.2}",
        r.ic2, r.bic3, r.er, r.gr, r.ed, r.pa
    );
}
