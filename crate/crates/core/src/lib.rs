//! Partial-information linear-quadratic control with a general initial law.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`] and [`density`]: problem data and the unnormalized initial law q₀.
//! - [`offline`]: deterministic Riccati paths Σ, Φ, S, π and the Gaussian bundle.
//! - [`stats`]: tilted moments b(ρ,t), B(ρ,t) and the conditional covariance Γ.
//! - [`filter`]: the sufficient-statistics filter (x̂, ρ, log ν).
//! - [`zakai`]: grid and particle solutions of the Zakai equation (oracles).
//! - [`control`]: optimal feedback, Z and μ fields, value-function evaluation.
//! - [`harness`]: scenarios, closed-loop simulation, Monte Carlo cost estimates,
//!   config parsing and file output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod density;
pub mod error;
pub mod filter;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod offline;
pub mod stats;
pub mod zakai;

pub use density::{InitialDensity, Moments};
pub use error::{Error, Result};
pub use filter::{init_filter, step_filter, FilterState, SufficientStatFilter};

pub use model::{LinearModel, ModelMatrices, TimeGrid};
pub use offline::{solve_gaussian_offline, solve_offline, GaussianOffline, OfflineSolution};
pub use stats::{gamma_mat, tilted_moments, TiltedMoments};
