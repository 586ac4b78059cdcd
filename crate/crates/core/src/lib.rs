//! State estimation for linear systems with an epsilon-insensitive loss on
//! the measurement residuals.
//!
//! Residuals inside a tube of half-width `eps` cost nothing and larger ones
//! are penalised quadratically beyond the tube. Every estimator solves a
//! nonnegative dual QP and recovers states through costate recursions, which
//! also admits linear inequality constraints on states and disturbances.
//!
//! ```
//! use epsmooth::{eps_smooth, model::benchmark};
//!
//! let run = benchmark::replay(0, benchmark::HORIZON);
//! let est = eps_smooth(&benchmark::model(), &benchmark::weights(), &run.measurements).unwrap();
//! assert_eq!(est.xhat.len(), benchmark::HORIZON + 1);
//! ```

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod qp;
pub mod rng;
pub mod verify;

pub use error::{EstimateError, ModelError, QpError, VerifyError, WeightName};
pub use estimators::{
    eps_predict, eps_smooth, eps_smooth_constrained, h2_smooth, moving_horizon, DualSolution,
    EpsEstimator, EstimateResult, EstimatorOptions, Method, MovingHorizonOptions,
    MovingHorizonStep, SolveDiagnostics,
};
pub use model::{
    simulate, simulate_saturated, sinusoidal_gaussian_noise, validate_model, NoiseSpec,
    Saturation, SystemModel, Trajectory,
};
pub use operators::{
    encode_constraint_family, ConstraintFamily, ConstraintSet, MeasurementAffine,
    StackedOperators, WeightSpec,
};
pub use qp::{solve_ineq_qp, solve_nonneg_qp, QpProblem, QpSolution, QpStatus};
pub use rng::NormalStream;
pub use verify::{check_kkt, objective_value, primal_brute_force, random_instance, KktReport};
