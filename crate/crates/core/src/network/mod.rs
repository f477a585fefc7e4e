//! Network definition, features and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod model;

pub use checkpoint::{load_state, read_state, save_state, write_state};
pub use config::{Activation, NetworkConfig, PositionalEncoding};
pub use features::{build_date_features, sinusoidal_encoding, FeatureSpec, Vocab};
pub use model::{Forecast, LossKind, ModelState};
