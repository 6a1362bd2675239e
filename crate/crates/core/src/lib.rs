//! Tree-informed mixed models for clustered data.
//!
//! A CART regression tree partitions the predictor space into `M` regions. Each
//! region gets its own linear fixed effect, fitted by mini-batch stochastic
//! gradient ascent on a Laplace-approximated quasi-likelihood, and a single
//! random effect shared across regions is predicted in closed form by BLUP:
//!
//! ```text
//! g(E[y_i | b]) = x_i' beta^(region(i)) + z_i' b,      b ~ N(0, sigma_b2 I)
//! ```
//!
//! The crate also ships the comparison models (linear mixed model, single tree,
//! bagged forest), the simulation generator used to study the method, and the
//! evaluation harness (MSPE benchmarks, CV leaf selection, MSPE-gap scaling).

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fit;
pub mod mixedmodel;
pub mod modelfile;
pub mod tree;

mod linalg;
mod rng;

pub use baselines::{fit_forest, fit_lmm, ForestConfig, ForestModel, LmmModel, Predictor};
pub use dataset::{simulate_gtimm, Dataset, SimTruth, StandardizationParams};
pub use error::{Error, Result};
pub use fit::{fit_gtimm, predict, FitConfig, LeafSpec};
pub use mixedmodel::{blup, quasi_loglik, GtimmModel, LinkFamily};
pub use tree::{assign_regions, fit_tree, RegionAssignment, RegressionTree};
