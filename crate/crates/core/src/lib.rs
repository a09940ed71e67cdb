//! Forecasting sparse, irregular bioprocess time series with Deep Set
//! networks over `(time, channel, value)` triplets, together with the
//! simulators, baselines and scoring used to benchmark them.

pub mod baselines;
pub mod datagen;
mod error;
pub mod eval;
pub mod forecaster;
pub mod mechanistic;
pub mod series;

pub use error::CoreError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
