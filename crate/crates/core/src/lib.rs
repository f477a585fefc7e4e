//! Multi-series demand forecasting with a transformer that attends across
//! related series before modelling each one in time.

pub mod attention;
pub mod autograd;
pub mod backtest;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
