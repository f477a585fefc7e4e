//! The full forecaster: inter-series attention, per-step embedding, encoder
//! and decoder stacks, and a linear output head.
//!
//! One [`ModelState`] serves every series; nothing in the parameter set is
//! specific to a series except the rows of the identifier embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, NetworkConfig, PositionalEncoding};
use super::features::{build_date_features, sinusoidal_encoding, FeatureSpec};
use crate::attention::{inter_series_attention, multi_head, MultiHeadConfig, MultiHeadVars};
use crate::autograd::{Graph, Var};
use crate::data::{ScalerState, WindowBatch};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Mae => "mae",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub features: FeatureSpec,
    pub scaler: ScalerState,
    /// Year mapped to age feature `ln(1) = 0`.
    pub base_year: i32,
    pub params: ParamStore,
}

/// Output of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Forecast in scaled space, one value per horizon step.
    pub scaled: Vec<f64>,
    /// Inter-series weights over the panel rows, one vector per layer.
    pub inter_series_weights: Vec<Vec<f64>>,
    /// `[block][head]` self-attention maps of the encoder (`L x L`).
    pub encoder_attention: Vec<Vec<Tensor>>,
    /// `[block][head]` causal self-attention maps of the decoder (`h x h`).
    pub decoder_self_attention: Vec<Vec<Tensor>>,
    /// `[block][head]` encoder-decoder attention maps (`h x L`).
    pub decoder_cross_attention: Vec<Vec<Tensor>>,
}

struct Traced {
    forecast: Var,
    inter_series: Vec<Var>,
    encoder: Vec<Vec<Var>>,
    decoder_self: Vec<Vec<Var>>,
    decoder_cross: Vec<Vec<Var>>,
}

fn ones(d: usize) -> Tensor {
    Tensor::full(&[d], 1.0).with_grad()
}

fn zeros(d: usize) -> Tensor {
    Tensor::zeros(&[d]).with_grad()
}

impl ModelState {
    pub fn init(
        config: NetworkConfig,
        features: FeatureSpec,
        scaler: ScalerState,
        base_year: i32,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if features.d_model != config.d_model
            || features.embedding_dim != config.embedding_dim
            || features.date_features != config.date_features
            || features.inter_series != config.inter_series_enabled()
        {
            return Err(Error::Config("feature spec disagrees with the network config".into()));
        }
        if features.continuous.len() != scaler.covariates.len() {
            return Err(Error::Schema(format!(
                "{} covariates in the feature spec but {} in the scaler",
                features.continuous.len(),
                scaler.covariates.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::fresh_params(&config, &features, &mut rng)?;
        Ok(Self {
            config,
            features,
            scaler,
            base_year,
            params,
        })
    }

    /// Parameter set implied by `config` and `features`.
    pub(crate) fn fresh_params<R: Rng + ?Sized>(
        config: &NetworkConfig,
        features: &FeatureSpec,
        rng: &mut R,
    ) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let d = config.d_model;
        features.init_params(&mut store, rng)?;
        if config.inter_series_enabled() && config.inter_series == Some(crate::attention::InterSeriesMode::Projected) {
            let is_cfg = MultiHeadConfig::square(config.context_len, config.inter_series_heads)?;
            for l in 0..config.inter_series_layers {
                is_cfg.init_params(&format!("inter_series.{l}"), &mut store, rng)?;
            }
        }
        let mh = MultiHeadConfig::new(d, config.num_heads)?;
        let ff = |store: &mut ParamStore, prefix: &str, rng: &mut R| -> Result<()> {
            store.insert(format!("{prefix}.w1"), Tensor::xavier_uniform(d, config.ff_width, rng))?;
            store.insert(format!("{prefix}.b1"), zeros(config.ff_width))?;
            store.insert(format!("{prefix}.w2"), Tensor::xavier_uniform(config.ff_width, d, rng))?;
            store.insert(format!("{prefix}.b2"), zeros(d))
        };
        let ln = |store: &mut ParamStore, prefix: &str| -> Result<()> {
            store.insert(format!("{prefix}.g"), ones(d))?;
            store.insert(format!("{prefix}.b"), zeros(d))
        };
        for b in 0..config.encoder_blocks {
            let p = format!("encoder.{b}");
            mh.init_params(&format!("{p}.attn"), &mut store, rng)?;
            ln(&mut store, &format!("{p}.ln1"))?;
            ff(&mut store, &format!("{p}.ff"), rng)?;
            ln(&mut store, &format!("{p}.ln2"))?;
        }
        for b in 0..config.decoder_blocks {
            let p = format!("decoder.{b}");
            mh.init_params(&format!("{p}.self"), &mut store, rng)?;
            ln(&mut store, &format!("{p}.ln1"))?;
            mh.init_params(&format!("{p}.cross"), &mut store, rng)?;
            ln(&mut store, &format!("{p}.ln2"))?;
            ff(&mut store, &format!("{p}.ff"), rng)?;
            ln(&mut store, &format!("{p}.ln3"))?;
        }
        store.insert("head.w", Tensor::xavier_uniform(d, 1, rng))?;
        store.insert("head.b", zeros(1))?;
        Ok(store)
    }

    /// Embeds a single step. `continuous` holds every continuous feature
    /// after the target: covariates, date features, then the inter-series
    /// value when that layer is enabled.
    pub fn embed_step(
        &self,
        target_value: f64,
        continuous: &[f64],
        product_id: &str,
        location_id: &str,
    ) -> Result<Tensor> {
        let width = self.features.continuous_width();
        if continuous.len() + 1 != width {
            return Err(Error::Schema(format!(
                "{} continuous features given, the model expects {}",
                continuous.len(),
                width - 1
            )));
        }
        let mut row = Vec::with_capacity(width);
        row.push(target_value);
        row.extend_from_slice(continuous);
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let cont = g.constant(Tensor::new(vec![1, width], row)?);
        let out = self.features.embed(
            &mut g,
            &mut binder,
            cont,
            self.features.products.index(product_id),
            self.features.locations.index(location_id),
        )?;
        g.value(out).clone().reshape(vec![self.config.d_model])
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        if batch.context_len() != self.config.context_len {
            return Err(Error::Shape(format!(
                "window context length {} but the model expects {}",
                batch.context_len(),
                self.config.context_len
            )));
        }
        if batch.horizon() != self.config.horizon {
            return Err(Error::Shape(format!(
                "window horizon {} but the model forecasts {}",
                batch.horizon(),
                self.config.horizon
            )));
        }
        if batch.num_covariates != self.features.continuous.len() {
            return Err(Error::Schema(format!(
                "window has {} covariates, the model expects {}",
                batch.num_covariates,
                self.features.continuous.len()
            )));
        }
        Ok(())
    }

    fn continuous_block<'a>(
        &self,
        g: &mut Graph<'a>,
        target: Option<Var>,
        steps: usize,
        covariates: &[f64],
        dates: &[crate::data::YearMonth],
        x_is: Option<Var>,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        parts.push(match target {
            Some(t) => t,
            None => g.constant(Tensor::zeros(&[steps, 1])),
        });
        let f = self.features.continuous.len();
        if f > 0 {
            parts.push(g.constant(Tensor::new(vec![steps, f], covariates.to_vec())?));
        }
        if self.config.date_features {
            parts.push(g.constant(build_date_features(dates, self.base_year)?));
        }
        if self.config.inter_series_enabled() {
            parts.push(match x_is {
                Some(x) => x,
                None => g.constant(Tensor::zeros(&[steps, 1])),
            });
        }
        g.concat(&parts)
    }

    fn trace<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder<'a>,
        batch: &WindowBatch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Traced> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (l, h) = (cfg.context_len, cfg.horizon);
        let p_q = g.constant(batch.target_context());

        // inter-series attention over the whole panel
        let mut inter_series = Vec::new();
        let x_is = if cfg.inter_series_enabled() {
            let mode = cfg.inter_series.expect("enabled");
            let panel = g.constant(batch.context.clone());
            let is_cfg = MultiHeadConfig::square(l, cfg.inter_series_heads)?;
            let mut x = p_q;
            for layer in 0..cfg.inter_series_layers {
                let vars = match mode {
                    crate::attention::InterSeriesMode::Projected => Some(MultiHeadVars::bind(
                        g,
                        binder,
                        &format!("inter_series.{layer}"),
                        &is_cfg,
                    )?),
                    crate::attention::InterSeriesMode::Raw => None,
                };
                let (out, w) = inter_series_attention(
                    g,
                    x,
                    panel,
                    &batch.series_mask,
                    mode,
                    vars.as_ref().map(|v| (&is_cfg, v)),
                )?;
                inter_series.push(w);
                x = out;
            }
            Some(g.transpose(x)?)
        } else {
            None
        };

        let product = self.features.products.index(&batch.product_id);
        let location = self.features.locations.index(&batch.location_id);

        let target_col = g.transpose(p_q)?;
        let enc_in = self.continuous_block(g, Some(target_col), l, &batch.covariates, &batch.context_dates, x_is)?;
        let mut x = self.features.embed(g, binder, enc_in, product, location)?;
        let dec_in = self.continuous_block(g, None, h, &batch.future_covariates, &batch.future_dates, None)?;
        let mut y = self.features.embed(g, binder, dec_in, product, location)?;

        if cfg.positional_encoding == PositionalEncoding::Sinusoidal {
            let pe = g.constant(sinusoidal_encoding(l, 0, cfg.d_model));
            x = g.add(x, pe)?;
            let pe = g.constant(sinusoidal_encoding(h, l, cfg.d_model));
            y = g.add(y, pe)?;
        }

        let mh = MultiHeadConfig::new(cfg.d_model, cfg.num_heads)?;
        let mut encoder = Vec::with_capacity(cfg.encoder_blocks);
        for b in 0..cfg.encoder_blocks {
            let p = format!("encoder.{b}");
            let vars = MultiHeadVars::bind(g, binder, &format!("{p}.attn"), &mh)?;
            let (a, w) = multi_head(g, x, x, x, &mh, &vars, None)?;
            let a = self.dropout(g, a, dropout.as_deref_mut());
            let r = g.add(x, a)?;
            x = self.norm(g, binder, &format!("{p}.ln1"), r)?;
            let f = self.feed_forward(g, binder, &format!("{p}.ff"), x)?;
            let f = self.dropout(g, f, dropout.as_deref_mut());
            let r = g.add(x, f)?;
            x = self.norm(g, binder, &format!("{p}.ln2"), r)?;
            encoder.push(w);
        }

        let causal: Vec<bool> = (0..h * h).map(|k| k % h <= k / h).collect();
        let mut decoder_self = Vec::with_capacity(cfg.decoder_blocks);
        let mut decoder_cross = Vec::with_capacity(cfg.decoder_blocks);
        for b in 0..cfg.decoder_blocks {
            let p = format!("decoder.{b}");
            let vars = MultiHeadVars::bind(g, binder, &format!("{p}.self"), &mh)?;
            let (a, ws) = multi_head(g, y, y, y, &mh, &vars, Some(&causal))?;
            let a = self.dropout(g, a, dropout.as_deref_mut());
            let r = g.add(y, a)?;
            y = self.norm(g, binder, &format!("{p}.ln1"), r)?;
            let vars = MultiHeadVars::bind(g, binder, &format!("{p}.cross"), &mh)?;
            let (c, wc) = multi_head(g, y, x, x, &mh, &vars, None)?;
            let c = self.dropout(g, c, dropout.as_deref_mut());
            let r = g.add(y, c)?;
            y = self.norm(g, binder, &format!("{p}.ln2"), r)?;
            let f = self.feed_forward(g, binder, &format!("{p}.ff"), y)?;
            let f = self.dropout(g, f, dropout.as_deref_mut());
            let r = g.add(y, f)?;
            y = self.norm(g, binder, &format!("{p}.ln3"), r)?;
            decoder_self.push(ws);
            decoder_cross.push(wc);
        }

        let w = binder.var(g, "head.w")?;
        let b = binder.var(g, "head.b")?;
        let out = g.matmul(y, w)?;
        let forecast = g.add(out, b)?;
        Ok(Traced {
            forecast,
            inter_series,
            encoder,
            decoder_self,
            decoder_cross,
        })
    }

    fn norm<'a>(&self, g: &mut Graph<'a>, binder: &mut Binder<'a>, prefix: &str, x: Var) -> Result<Var> {
        let gain = binder.var(g, &format!("{prefix}.g"))?;
        let bias = binder.var(g, &format!("{prefix}.b"))?;
        g.layer_norm(x, gain, bias, self.config.layer_norm_eps)
    }

    fn feed_forward<'a>(&self, g: &mut Graph<'a>, binder: &mut Binder<'a>, prefix: &str, x: Var) -> Result<Var> {
        let w1 = binder.var(g, &format!("{prefix}.w1"))?;
        let b1 = binder.var(g, &format!("{prefix}.b1"))?;
        let w2 = binder.var(g, &format!("{prefix}.w2"))?;
        let b2 = binder.var(g, &format!("{prefix}.b2"))?;
        let hdn = g.matmul(x, w1)?;
        let hdn = g.add(hdn, b1)?;
        let hdn = match self.config.activation {
            Activation::Relu => g.relu(hdn),
            Activation::Gelu => g.gelu(hdn),
        };
        let out = g.matmul(hdn, w2)?;
        g.add(out, b2)
    }

    fn dropout(&self, g: &mut Graph<'_>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask).expect("same shape"));
        g.mul(x, m).expect("same shape")
    }

    /// Inference pass; the forecast is in scaled space.
    pub fn forward(&self, batch: &WindowBatch) -> Result<Forecast> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let t = self.trace(&mut g, &mut binder, batch, None)?;
        let maps = |blocks: &[Vec<Var>]| -> Vec<Vec<Tensor>> {
            blocks
                .iter()
                .map(|heads| heads.iter().map(|&v| g.value(v).clone()).collect())
                .collect()
        };
        Ok(Forecast {
            scaled: g.value(t.forecast).data().to_vec(),
            inter_series_weights: t.inter_series.iter().map(|&w| g.value(w).data().to_vec()).collect(),
            encoder_attention: maps(&t.encoder),
            decoder_self_attention: maps(&t.decoder_self),
            decoder_cross_attention: maps(&t.decoder_cross),
        })
    }

    /// Forecast mapped back to the original units of the target series.
    pub fn forecast_unscaled(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let f = self.forward(batch)?;
        Ok(f.scaled
            .iter()
            .map(|&z| self.scaler.invert(&batch.series_id, z))
            .collect())
    }

    fn loss_var<'a>(&self, g: &mut Graph<'a>, forecast: Var, batch: &WindowBatch, loss: LossKind) -> Result<Var> {
        let observed = batch.label_mask.iter().filter(|&&m| m).count();
        if observed == 0 {
            return Err(Error::Contract("window has no observed label".into()));
        }
        let h = batch.horizon();
        let labels = g.constant(Tensor::new(vec![h, 1], batch.labels.clone())?);
        let mask = g.constant(Tensor::new(
            vec![h, 1],
            batch.label_mask.iter().map(|&m| m as u8 as f64).collect(),
        )?);
        let diff = g.sub(forecast, labels)?;
        let diff = g.mul(diff, mask)?;
        let per = match loss {
            LossKind::Mse => g.mul(diff, diff)?,
            LossKind::Mae => g.abs(diff),
        };
        let total = g.sum(per);
        Ok(g.scale(total, 1.0 / observed as f64))
    }

    /// Loss of one window without gradient tracking.
    pub fn loss(&self, batch: &WindowBatch, loss: LossKind) -> Result<f64> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let t = self.trace(&mut g, &mut binder, batch, None)?;
        let l = self.loss_var(&mut g, t.forecast, batch, loss)?;
        Ok(g.value(l).item())
    }

    /// Loss of one window and its gradient for every parameter, indexed like
    /// `self.params`. Parameters the pass did not touch get `None`.
    /// `dropout_seed` enables dropout with a per-window random stream.
    pub fn loss_and_gradients(
        &self,
        batch: &WindowBatch,
        loss: LossKind,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, true);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let t = self.trace(&mut g, &mut binder, batch, rng.as_mut())?;
        let l = self.loss_var(&mut g, t.forecast, batch, loss)?;
        let value = g.value(l).item();
        let mut grads = g.backward(l)?;
        Ok((value, binder.collect(&mut grads)))
    }

    /// Names of the parameters one forward pass over `batch` reads.
    pub fn touched_parameters(&self, batch: &WindowBatch) -> Result<Vec<String>> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        self.trace(&mut g, &mut binder, batch, None)?;
        Ok(binder.touched().map(|i| self.params.names()[i].clone()).collect())
    }
}
