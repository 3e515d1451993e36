//! Recover a low-rank matrix with missing cells through the EM imputation
//! loop, and watch the observed-cell objective descend.
//!
//! Run with: `cargo run --release --example em_imputation`

use ife::panel::MaskedMatrix;
use ife::pca::{em_impute, EM_MAX_ITER, EM_TOL};
use nalgebra::DMatrix;
use rand::Rng;

fn main() {
    let (n, t) = (40, 30);
    let mut rng = ife::rng::rng(123, &[0]);
    let loadings = DMatrix::<f64>::from_fn(n, 2, |_, _| rng.gen::<f64>() + 0.5);
    let factors = DMatrix::<f64>::from_fn(t, 2, |_, _| rng.gen::<f64>() - 0.5);
    let truth = &loadings * factors.transpose();

    // Punch out 25% of the cells.
    let mask: Vec<bool> = (0..n * t).map(|_| rng.gen::<f64>() > 0.25).collect();
    let mut observed = truth.clone();
    for i in 0..n {
        for s in 0..t {
            if !mask[i * t + s] {
                observed[(i, s)] = 0.0;
            }
        }
    }
    let masked = MaskedMatrix {
        values: observed,
        mask,
    };

    let out = em_impute(&masked, 2, EM_TOL, EM_MAX_ITER).expect("em");
    println!(
        "converged in {} iterations (last imputation change {:.2e})",
        out.report.iterations, out.report.final_delta
    );
    for (i, ssr) in out.report.objective_path.iter().enumerate().take(8) {
        println!("  iteration {:>2}: observed-cell SSR {:.6e}", i + 1, ssr);
    }
    let err = (&out.completed - &truth).amax();
    println!("max reconstruction error on the full matrix: {:.2e}", err);
}
