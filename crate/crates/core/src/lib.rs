//! Dual bounds for partially identified causal estimands.
//!
//! The sharp lower bound on `E[f(Y(0), Y(1), X)]` is the value of a
//! conditional optimal-transport problem. Any dual-feasible pair of
//! functions `(nu_0, nu_1)` gives a lower bound whose mean is estimable by
//! inverse propensity weighting, so a working model of `Y | X, W` only
//! affects the tightness of the bound, never its validity.
//!
//! The crate is organised bottom-up:
//!
//! * [`lp`]: dense revised simplex, transportation simplex, minimum-norm refinement.
//! * [`dual`]: discretisation of conditional laws, conditional dual solves, feasibility repair.
//! * [`models`]: ridge / logistic working models, conditional quantile functions, folds.
//! * [`estimands`]: built-in cost functions and constraint sets.
//! * [`estimators`]: IPW / AIPW summands, one-sided bounds, delta method, quasilinear search.
//! * [`bootstrap`]: Gaussian multiplier bootstrap for model selection.
//! * [`pipeline`]: cross-fitted end-to-end estimation.
//! * [`sim`]: synthetic data generating processes and coverage studies.

pub mod bootstrap;
pub mod dual;
pub mod error;
pub mod estimands;
pub mod estimators;
pub mod lp;
pub mod models;
pub mod pipeline;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
