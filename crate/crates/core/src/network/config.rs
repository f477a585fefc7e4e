use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::InterSeriesMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    /// Temporal order enters only through the date features.
    #[default]
    None,
    /// Classic additive sine/cosine encoding of the step index.
    Sinusoidal,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl FromStr for PositionalEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sinusoidal" => Ok(Self::Sinusoidal),
            other => Err(Error::Config(format!("unknown positional encoding {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        })
    }
}

impl std::fmt::Display for PositionalEncoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Sinusoidal => "sinusoidal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// Hidden width of the position-wise feed-forward layers.
    pub ff_width: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub embedding_dim: usize,
    /// `None` disables the inter-series layer.
    pub inter_series: Option<InterSeriesMode>,
    pub inter_series_layers: usize,
    pub inter_series_heads: usize,
    pub positional_encoding: PositionalEncoding,
    pub date_features: bool,
    pub activation: Activation,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 2,
            decoder_blocks: 2,
            d_model: 128,
            num_heads: 8,
            ff_width: 512,
            context_len: 24,
            horizon: 24,
            embedding_dim: 6,
            inter_series: Some(InterSeriesMode::Raw),
            inter_series_layers: 1,
            inter_series_heads: 1,
            positional_encoding: PositionalEncoding::None,
            date_features: true,
            activation: Activation::Relu,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// Small configuration with `ff_width = 4 * d_model`.
    pub fn small(d_model: usize, num_heads: usize, context_len: usize, horizon: usize) -> Self {
        Self {
            d_model,
            num_heads,
            ff_width: 4 * d_model,
            context_len,
            horizon,
            ..Self::default()
        }
    }

    pub fn inter_series_enabled(&self) -> bool {
        self.inter_series.is_some() && self.inter_series_layers > 0
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("ff_width", self.ff_width),
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("embedding_dim", self.embedding_dim),
            ("inter_series_heads", self.inter_series_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}
