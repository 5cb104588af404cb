//! Helmholtz metrics and Lagrangian neural ODEs.
//!
//! A Helmholtz metric measures how far a second-order ODE `ẍ = f(t, x, ẋ)`
//! is from being an Euler-Lagrange equation. It trains a symmetric matrix
//! field `g(t, x, ẋ)` to satisfy the three Helmholtz conditions and reports
//! the remaining residual, normalized by the smallest absolute eigenvalue of
//! `g`. Used as a regularizer on a second-order neural ODE it yields a
//! Lagrangian neural ODE.
//!
//! Module map:
//! - [`numcore`]: small dense linear algebra, forward-mode [`numcore::Dual2`]
//!   scalars and the reverse-mode [`numcore::Tape`].
//! - [`nets`]: MLPs, the symmetric matrix head, RAdam, clipping, plateau LR.
//! - [`odesolve`]: batched fixed-step RK4 for the second-order system.
//! - [`systems`]: analytic test systems and dataset generation.
//! - [`odeparse`]: expression language for user-supplied right-hand sides.
//! - [`helmholtz`]: Φ, the residuals and the loss `L_H`.
//! - [`training`]: metric-only and Lagrangian neural ODE training loops.
//! - [`evalstats`]: Hessian recovery errors, MSEs and Welch statistics.

pub mod error;
pub mod evalstats;
pub mod helmholtz;
pub mod nets;
pub mod numcore;
pub mod odeparse;
pub mod odesolve;
pub mod rng;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
