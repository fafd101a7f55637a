//! SIMEX estimation for parametric modal regression when covariates are
//! observed with additive normal measurement error.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: regression functions `m(x, θ)` with analytic gradients.
//! - [`kernel`]: the Gaussian kernel, its scaled form and derivatives.
//! - [`optim`]: Nelder–Mead and damped Gauss–Newton solvers.
//! - [`estimators`]: modal EM, least squares, Huber and L1 fits.
//! - [`simex`]: the simulation / estimation / extrapolation engine.
//! - [`simstudy`]: Monte Carlo study runner and table output.
//!
//! Parallel loops go through [`exec`], which uses rayon when the `parallel`
//! feature is enabled (the default) and plain iteration otherwise. Every
//! random draw comes from a keyed stream in [`rng`], so results never depend
//! on scheduling.

pub mod error;
pub mod estimators;
pub mod exec;
pub mod kernel;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod simex;
pub mod simstudy;

pub use error::{Error, Result};

pub use kernel::Bandwidth;
pub use matrix::RowMatrix;
pub use model::RegressionModel;
pub use optim::{OptimResult, Termination};

pub use estimators::{Dataset, EmDiagnostics, Estimator, Fit};
pub use simex::{Extrapolant, ExtrapolationFit, LambdaTrace, SimexConfig, SimexOutput};
pub use simstudy::{ErrorMixture, Method, Scenario, ScenarioResult};
