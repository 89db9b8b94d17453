//! Zero-order online mirror descent.
//!
//! Online convex optimization on simplex and ball domains where the learner
//! only observes noisy (and possibly adversarially biased) function values at
//! one or two points per step. The crate provides:
//!
//! - [`geometry`]: prox functions, Bregman divergences and mirror steps for
//!   the entropy/simplex, Euclidean/ball and `ℓ_a`/`ℓ₁`-ball pairings;
//! - [`estimators`]: sphere/ball sampling and the one- and two-point
//!   randomized gradient estimators;
//! - [`environments`]: loss families, noise models and adversaries;
//! - [`solver`]: the online mirror-descent loop in first-order and bandit modes;
//! - [`tuning`]: the smoothing radius / admissible bias / horizon calculator;
//! - [`regret`]: pseudo-regret measurement and Monte-Carlo aggregation;
//! - [`cli`]: the batch experiment driver behind the `zomd` binary.

pub mod cli;
pub mod environments;
mod error;
pub mod estimators;
pub mod geometry;
pub mod regret;
pub mod rng;
pub mod solver;
pub mod tuning;

pub use error::{Error, Result};
pub use geometry::{DualVector, GeometrySpec, Point};
