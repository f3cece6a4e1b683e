//! Hierarchical variational policies for reward-guided diffusion sampling.
//!
//! The crate pairs a discrete-time diffusion prior that has a closed-form
//! denoiser (a Gaussian mixture) with amortized policies that steer the
//! reverse chain towards measurements `y`:
//!
//! * an initial-noise policy `x_T = eps + E(y, eps)`,
//! * a per-step Gaussian controller whose control `u_t` is added to the
//!   denoiser input, `x_t + gamma * u_t`,
//! * a four-term variational bound (reward plus three KL regularizers) with
//!   exact and surrogate forms,
//! * two-stage training and semi-amortized test-time refinement,
//! * oracles (closed-form evidence, posterior, quadrature, Monte-Carlo) that
//!   check all of the above.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod math;
pub mod objective;
pub mod oracle;
pub mod policies;
pub mod rng;
pub mod tasks;
pub mod training;

pub use error::{HvpError, Result};
