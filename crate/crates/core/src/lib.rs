//! Nonparametric maximum likelihood estimation for the stratified
//! proportional hazards model when the stratum is missing for some
//! subjects.
//!
//! The stratum is modelled by a multinomial logistic regression on
//! surrogate covariates `W`; the baseline cumulative hazards are step
//! functions and the whole parameter is fitted by EM. Plug-in variance
//! estimators for the regression coefficients, the logistic coefficients
//! and the baseline hazards are provided, together with a simulator and a
//! Monte Carlo harness.

pub mod cox;
pub mod em;
pub mod error;
pub mod io;
pub mod mc;
pub mod model;
pub mod optim;
pub mod sim;
pub mod variance;

pub use error::{Error, Result};
pub use model::{
    jump_support, observed_log_likelihood, stratum_probs, Dataset, DatasetOptions, Observation,
    Params, StepFunction,
};
