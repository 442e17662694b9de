//! Policy-gradient actor-critic methods and model-based baselines for the
//! chance-constrained linear-quadratic regulator.
//!
//! The plant is `x⁺ = A x + B u + w` with Gaussian noise, the policy is
//! linear-Gaussian `u = −K x + σ`, and the constraint bounds the long-run
//! probability that `qᵀ x⁺ ≥ ε`. The constraint is handled through the
//! Lagrangian `L(K, λ) = J(K) + λ (J_c(K) − δ)`.

pub mod baselines;
pub mod benchmarks;
pub mod ddpg;
pub mod error;
pub mod evaluation;
pub mod exact_pg;
pub mod linalg;
pub mod lti;
pub mod nn;
pub mod primal_dual;
pub mod risk;
pub mod rng;
pub mod sample_pg;

pub use error::{Error, Result, Traced};
pub use linalg::{Mat, Vector};
pub use lti::{LinearGaussianPolicy, LtiSystem, Trajectory, Transition};
pub use risk::{ChanceSpec, GradientBundle};
