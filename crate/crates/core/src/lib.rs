//! Planar multibody kinematics and dynamics posed as sparse factor-graph
//! optimization.
//!
//! A [`Mechanism`] (natural coordinates plus optional absolute angles) is
//! turned into per-timestep factors: constraint factors built from
//! [`constraints`], closed-form dynamics from [`dynamics`], and integrator
//! factors linking consecutive states. [`solver`] minimizes the weighted
//! squared errors with Levenberg-Marquardt, either in batch or as a
//! fixed-lag smoother, and [`pipelines`] assembles the forward and inverse
//! problems together with a classical reference integrator.

pub mod checks;
pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod factors;
pub mod linalg;
pub mod mechanism;
pub mod pipelines;
pub mod reference;
pub mod solver;

pub use error::{Error, Result};
pub use factors::{Factor, FactorKind, NoiseModel, VarKind, VariableKey};
pub use mechanism::{CoordinateLayout, Mechanism, MechanismDef};
pub use pipelines::{
    oracle_forward, rmse, run_forward, run_inverse, Field, Formulation, ForwardConfig, ForwardRun,
    InverseConfig, InverseRun, NoiseConfig, OracleConfig, Trajectory, TrajectoryRow,
};
pub use solver::{
    optimize_lm, FactorGraph, FixedLagSmoother, LinearSolver, LmConfig, LmResult, Values,
};
