//! Exact accelerated sampling for discrete autoregressive models.
//!
//! A sample is a deterministic function of the model and a grid of Gumbel
//! noise. Predictive sampling guesses future tokens, checks every guess with
//! one parallel model pass, and keeps the longest agreeing prefix, so its
//! output is bitwise identical to ancestral sampling under the same noise.

pub mod arm;
pub mod checkpoint;
mod codec;
pub mod data;
pub mod error;
pub mod forecast;
pub mod numeric;
pub mod reparam;
pub mod sampler;

pub use arm::{Arm, ArmConfig, ArmModel, Forward, LogitsGrid, TokenBuffer};
pub use error::{Error, Result};
pub use forecast::{Forecaster, ForecasterConfig};
pub use numeric::Rng;
pub use reparam::NoiseGrid;
pub use sampler::{
    ancestral_sample, batch_sample, fixed_point_sample, predictive_sample, ForecastStrategy, SampleReport,
    StrategyKind,
};
