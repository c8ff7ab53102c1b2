//! Feasibility-repaired neural solvers for parametric constrained problems.
//!
//! A network predicts `ŷ`; a Levenberg–Marquardt repair layer pulls `ŷ`
//! into `{y : ℓ ≤ g(y) ≤ u}` and stays differentiable, so training runs
//! end to end through it. Training relaxes the bounds at first and tightens
//! them to zero over a decay horizon.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`). The
//! aliases below fix it to `f64`, which is what the problem families,
//! training, evaluation and control code use.

pub mod autodiff;
pub mod constraints;
pub mod control;
pub mod error;
pub mod evaluation;
pub mod files;
pub mod linalg;
pub mod models;
pub mod problems;
pub mod repair;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Expr, Real};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Var<'t> = autodiff::Var<'t, f64>;
pub type Bounds = constraints::Bounds<f64>;
pub type Slack = constraints::Slack<f64>;
pub type ConstraintSet = constraints::ConstraintSet<f64>;
pub type RepairConfig = repair::RepairConfig<f64>;
pub type RepairTrace = repair::RepairTrace<f64>;
pub type HardNetLayer = repair::HardNetLayer<f64>;
pub type Mlp = models::Mlp<f64>;
