//! Training loop and inference helpers.
//!
//! Every (series, origin) window of the panel is one example for a single
//! shared model. Windows of a mini-batch are evaluated in parallel and their
//! gradients reduced in window order, so a run is bit-reproducible for a
//! given seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{
    build_window, fit_scaler, make_windows, ScalerMode, SeriesPanel, Split, WindowBatch, WindowSpec, YearMonth,
};
use crate::error::{Error, Result};
use crate::network::{FeatureSpec, LossKind, ModelState, NetworkConfig};
use crate::optim::{adam_step, AdamState, PlateauScheduler};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Fraction of training windows held out for monitoring; 0 disables.
    pub holdout_fraction: f64,
    /// Step between consecutive training origins.
    pub stride: usize,
    /// Last month whose observations may be used; defaults to the panel end.
    pub train_end: Option<YearMonth>,
    pub scaler: ScalerMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0015,
            plateau_factor: 0.95,
            plateau_patience: 25,
            min_delta: 1e-5,
            batch_size: 64,
            epochs: 1000,
            seed: 0,
            loss: LossKind::Mse,
            holdout_fraction: 0.0,
            stride: 1,
            train_end: None,
            scaler: ScalerMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch size and stride must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        PlateauScheduler::new(
            self.learning_rate,
            self.plateau_factor,
            self.plateau_patience,
            self.min_delta,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-window loss over the epoch's updates.
    pub loss: f64,
    pub holdout_loss: Option<f64>,
    /// Learning rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub history: Vec<EpochRecord>,
    /// Loss of the untrained model over the training windows.
    pub initial_loss: f64,
    pub train_windows: usize,
    /// Latest label date over every window used for training.
    pub last_label_date: YearMonth,
}

/// Mean loss over `windows`, evaluated in parallel.
pub fn mean_loss(model: &ModelState, windows: &[WindowBatch], loss: LossKind) -> Result<f64> {
    let losses: Vec<f64> = windows.par_iter().map(|w| model.loss(w, loss)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Training windows of `panel` under `cfg`, with the fitted scaler.
pub fn training_windows(
    panel: &SeriesPanel,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(crate::data::ScalerState, Vec<WindowBatch>, YearMonth)> {
    let end = cfg.train_end.map_or(panel.end(), |e| e.min(panel.end()));
    let scaler = fit_scaler(panel, end, cfg.scaler)?;
    let spec = WindowSpec::new(net.context_len, net.horizon, cfg.stride)?;
    let windows = make_windows(panel, &scaler, spec, &Split::Train { end })?;
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no training windows: need {} months of context and an observed label on or before {end}",
            net.context_len
        )));
    }
    Ok((scaler, windows, end))
}

pub fn train(panel: &SeriesPanel, net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    let (scaler, mut windows, _) = training_windows(panel, net, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let holdout = if cfg.holdout_fraction > 0.0 {
        let n = ((windows.len() as f64) * cfg.holdout_fraction).floor() as usize;
        if n == 0 || n == windows.len() {
            Vec::new()
        } else {
            windows.shuffle(&mut rng);
            let rest = windows.split_off(windows.len() - n);
            windows.sort_by(|a, b| (&a.series_id, a.origin).cmp(&(&b.series_id, b.origin)));
            rest
        }
    } else {
        Vec::new()
    };

    let features = FeatureSpec::from_panel(
        panel,
        net.embedding_dim,
        net.d_model,
        net.date_features,
        net.inter_series_enabled(),
    )?;
    let mut model = ModelState::init(net.clone(), features, scaler, panel.start().year(), cfg.seed)?;
    let last_label_date = windows
        .iter()
        .flat_map(|w| {
            w.future_dates
                .iter()
                .zip(&w.label_mask)
                .filter(|(_, &m)| m)
                .map(|(d, _)| *d)
        })
        .max()
        .expect("every window has an observed label");

    let initial_loss = mean_loss(&model, &windows, cfg.loss)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let mut scheduler = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_delta,
    )?
    .with_baseline(initial_loss);
    let mut adam = AdamState::for_params(model.params.tensors(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let dropout = model.config.dropout > 0.0;

    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr();
        adam.iter_mut().for_each(|s| s.lr = lr);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = cfg.seed ^ ((epoch as u64) << 32) ^ batch_no as u64;
            let results: Vec<(f64, Vec<Option<Vec<f64>>>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let seed = dropout.then(|| batch_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k as u64);
                    model.loss_and_gradients(&windows[i], cfg.loss, seed)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            for (l, g) in &results {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no + 1,
                    });
                }
                epoch_loss += l;
                for (acc, g) in grads.iter_mut().zip(g) {
                    if let Some(g) = g {
                        acc.iter_mut().zip(g).for_each(|(a, x)| *a += x * scale);
                    }
                }
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no + 1,
                });
            }
            for (t, g) in model.params.tensors_mut().iter_mut().zip(grads) {
                t.grad = Some(g);
            }
            adam_step(model.params.tensors_mut(), &mut adam)?;
        }
        let loss = epoch_loss / windows.len() as f64;
        let holdout_loss = if holdout.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &holdout, cfg.loss)?)
        };
        scheduler.observe(loss);
        log::info!("epoch {epoch}: loss {loss:.6} lr {lr:.6e}");
        history.push(EpochRecord {
            epoch,
            loss,
            holdout_loss,
            learning_rate: lr,
        });
    }
    for t in model.params.tensors_mut() {
        t.grad = None;
    }
    Ok(TrainOutcome {
        model,
        history,
        initial_loss,
        train_windows: windows.len(),
        last_label_date,
    })
}

/// Unscaled forecast of one series from one origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesForecast {
    pub series_id: String,
    pub origin: YearMonth,
    pub dates: Vec<YearMonth>,
    pub values: Vec<f64>,
}

/// Checks that `panel` can be fed to `model`; warns about identifiers the
/// model has never seen.
pub fn check_compatible(model: &ModelState, panel: &SeriesPanel) -> Result<()> {
    if panel.covariate_names() != model.features.continuous.as_slice() {
        return Err(Error::Schema(format!(
            "panel covariates {:?} do not match the model's {:?}",
            panel.covariate_names(),
            model.features.continuous
        )));
    }
    if panel.start().year() < model.base_year {
        return Err(Error::Schema(format!(
            "panel starts in {} before the model's base year {}",
            panel.start(),
            model.base_year
        )));
    }
    for s in panel.series() {
        if model.features.products.get(&s.product_id).is_none() {
            log::warn!(
                "unseen product {} for series {}, using the reserved embedding",
                s.product_id,
                s.series_id
            );
        }
        if model.features.locations.get(&s.location_id).is_none() {
            log::warn!(
                "unseen location {} for series {}, using the reserved embedding",
                s.location_id,
                s.series_id
            );
        }
    }
    Ok(())
}

/// Windows for forecasting every series from `origin`, which may lie one
/// month past the panel end. Series with no observation in their context
/// are skipped.
pub fn inference_windows(model: &ModelState, panel: &SeriesPanel, origin: YearMonth) -> Result<Vec<WindowBatch>> {
    check_compatible(model, panel)?;
    let l = model.config.context_len;
    let o = panel.offset_of(origin);
    if o < l as i64 || o > panel.len() as i64 {
        return Err(Error::Config(format!(
            "origin {origin} needs {l} months of history within {}..{}",
            panel.start(),
            panel.end()
        )));
    }
    let mut out = Vec::new();
    for q in 0..panel.num_series() {
        let w = build_window(panel, &model.scaler, q, o as usize, l, model.config.horizon)?;
        if w.target_observed_in_context() {
            out.push(w);
        }
    }
    Ok(out)
}

pub fn forecast(
    model: &ModelState,
    panel: &SeriesPanel,
    origin: YearMonth,
    clip_nonnegative: bool,
) -> Result<Vec<SeriesForecast>> {
    let windows = inference_windows(model, panel, origin)?;
    windows
        .par_iter()
        .map(|w| {
            let mut values = model.forecast_unscaled(w)?;
            if clip_nonnegative {
                values.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Ok(SeriesForecast {
                series_id: w.series_id.clone(),
                origin,
                dates: w.future_dates.clone(),
                values,
            })
        })
        .collect()
}
