//! Discrete diffusion over `R^d` with a tractable mixture prior.

pub mod denoiser;
pub mod gmm;
pub mod schedule;

pub use denoiser::{denoiser_mean, mean_from_tweedie, Denoiser, GmmOracleDenoiser, MlpDenoiser, ReverseSampler};
pub use gmm::{gmm_tweedie, log_sum_exp, GmmPrior};
pub use schedule::{build_schedule, NoiseSchedule};
