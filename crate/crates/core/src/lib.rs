//! Dynamic spatiotemporal ARCH models at desk scale: panel simulation,
//! moment-based (GMM) estimation with optimal weighting and best
//! instruments, fixed-effect recovery, residual diagnostics, and a
//! deterministic Monte Carlo harness for bias/MAE experiments.
//!
//! The model: an outcome `y_it = h_it^{1/2} e_it` whose log-volatility
//! depends on the contemporaneous spatial lags of `log y^2`, its own
//! temporal lag, spatial lags of that temporal lag, exogenous regressors,
//! and two-way fixed effects. Taking logs of squares turns this into a
//! linear dynamic panel in `log y_it^2`, which is what everything here
//! operates on after the forward-orthogonal (Helmert) and cross-sectional
//! demeaning transformations wipe out the fixed effects.

pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod model;
pub mod moments;
pub mod montecarlo;
pub mod solver;
pub mod transforms;
pub mod weights;

pub use dgp::{draw_errors, simulate, DgpConfig, ErrorDist, Panel, SimulatedPanel};
pub use diagnostics::{residual_diagnostics, Diagnostics};
pub use error::{Error, Result};
pub use estimators::{
    best_instruments, fit_2sls, fit_best_gmm, fit_initial_gmm, fit_optimal_gmm, fit_stage,
    recover_effects, FitOptions, FitStage, GmmFit, VcovForm,
};
pub use model::{
    build_operators, check_stationarity, ModelSpec, Operators, StationarityCheck, Theta,
};
pub use moments::{
    default_iv, default_quadratic, identification_diagnostic, mu4_hat, omega_hat, sigma2_hat,
    GmmData, MomentSet, OmegaHat, Projection,
};
pub use montecarlo::{
    emit_table, run_experiment, run_experiment_with, Design, ExperimentConfig, ExperimentResult,
    TableFormat,
};
pub use weights::{
    build_queen_contiguity, build_second_order_contiguity, load_weights, save_weights,
    SpatialWeightSet,
};
