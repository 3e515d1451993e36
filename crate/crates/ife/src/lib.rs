//! Interactive fixed effects estimation for balanced and unbalanced panels.
//!
//! The crate estimates linear panel models whose unobserved heterogeneity is
//! a low-rank factor structure, on panels with randomly missing cells. It
//! provides:
//!
//! - the panel data model with masking/projection operators and the two-way
//!   within transformation ([`panel`]);
//! - principal-components factor extraction and EM imputation for missing
//!   cells ([`pca`]);
//! - the alternating outer solver for the common parameters ([`estimator`]);
//! - residualization against estimated loadings/factors by alternating
//!   projections ([`residualize`]);
//! - analytic bias corrections and covariance estimators ([`inference`]);
//! - six estimators of the number of factors ([`factor_count`]);
//! - a convex nuclear-norm estimator with post-estimation refinement
//!   ([`nuclear`]);
//! - a Monte Carlo laboratory for the estimator's finite-sample properties
//!   ([`sim`]).
//!
//! See the `examples/` directory for runnable walkthroughs of each
//! capability, and the `ife` binary for the command-line workflow.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod factor_count;
pub mod inference;
pub mod nuclear;
pub mod panel;
pub mod pca;
pub mod residualize;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
