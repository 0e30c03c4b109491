//! # frailfit
//!
//! Univariate proportional hazards frailty regression fitted by profile
//! nonparametric maximum likelihood.
//!
//! The hazard given covariates `Z` and an unobserved frailty `W` (mean 1) is
//! `W · exp(β'Z(t)) · a(t)`. After integrating `W` out, the survival function is
//! `S(t|z) = Λ_γ(∫₀ᵗ exp(β'z(s)) dA(s))` where `Λ_γ` is the frailty's Laplace
//! transform. `γ = 0` recovers the Cox model.
//!
//! - [`frailty`]: Laplace transforms and their derivatives per family.
//! - [`data`]: right-censored data with fixed or piecewise-constant covariates.
//! - [`baseline`]: the profiled step baseline hazard and the log-likelihood.
//! - [`fitter`]: random-search + simplex maximisation of the profile likelihood.
//! - [`inference`]: weighted bootstrap, Wald tables, score test for `γ = 0`,
//!   survival prediction with simultaneous bands, Kaplan–Meier.
//! - [`sim`]: data generation and misspecification studies.

pub mod baseline;
pub mod data;
pub mod error;
pub mod fitter;
pub mod frailty;
pub mod inference;
pub mod optim;
pub mod quadrature;
pub mod sim;

pub use baseline::{
    cumulative_h, log_likelihood, solve_baseline, weighted_j, Psi, SolverOptions, StepHazard, Theta,
    Weights,
};
pub use data::{failure_grid, load_long_csv, load_wide_csv, CovariatePath, Dataset, FailureGrid, Subject};
pub use error::{Error, Result};
pub use fitter::{fit, fit_cox, profile_loglik, ConstraintMode, FitOptions, FitResult};
pub use frailty::{
    domain_check, frailty_variance, laplace, transform_bundle, FamilyKind, FrailtyFamily,
    TransformBundle,
};
pub use inference::{
    bootstrap, kaplan_meier, make_weights, marginal_survival, predict_survival, score_test_gamma,
    simultaneous_band, wald_table, BandResult, BootstrapRun, ScoreTestResult, SurvivalCurve,
    WaldRow, WeightKind,
};
pub use sim::{generate, Baseline, Censoring, CovariateLaw, TruthSpec};
