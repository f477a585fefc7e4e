//! Sliding-origin evaluation, horizon buckets and attention export.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{SeriesPanel, YearMonth};
use crate::error::{Error, Result};
use crate::metrics::{panel_rmsse, rmse, wbias, wmape};
use crate::network::{ModelState, NetworkConfig};
use crate::tensor::Tensor;
use crate::train::{forecast, inference_windows, train, SeriesForecast, TrainConfig};

/// Inclusive range of forecast steps, counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bucket {
    pub first: usize,
    pub last: usize,
}

impl Bucket {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 || first > last {
            return Err(Error::Config(format!("invalid bucket {first}-{last}")));
        }
        Ok(Self { first, last })
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.first..=self.last).contains(&step)
    }
}

impl std::fmt::Display for Bucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bucket {s:?} is not of the form a-b"));
        let (a, b) = s.trim().split_once('-').ok_or_else(bad)?;
        Self::new(
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        )
    }
}

/// Parses `"1-3,4-12"` and checks the buckets are disjoint and within
/// `1..=horizon`.
pub fn parse_buckets(s: &str, horizon: usize) -> Result<Vec<Bucket>> {
    let buckets = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Bucket::from_str)
        .collect::<Result<Vec<_>>>()?;
    validate_buckets(&buckets, horizon)?;
    Ok(buckets)
}

pub fn validate_buckets(buckets: &[Bucket], horizon: usize) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::Config("at least one bucket is required".into()));
    }
    for (i, b) in buckets.iter().enumerate() {
        if b.last > horizon {
            return Err(Error::Config(format!("bucket {b} exceeds the horizon {horizon}")));
        }
        if buckets[..i].iter().any(|o| o.first <= b.last && b.first <= o.last) {
            return Err(Error::Config(format!("bucket {b} overlaps another bucket")));
        }
    }
    Ok(())
}

/// 1-3, 4-12 and 13-24 months ahead, clipped to `horizon`.
pub fn default_buckets(horizon: usize) -> Vec<Bucket> {
    [(1, 3), (4, 12), (13, 24)]
        .into_iter()
        .filter(|&(a, _)| a <= horizon)
        .map(|(a, b)| Bucket {
            first: a,
            last: b.min(horizon),
        })
        .collect()
}

/// Scores of one bucket; `None` where the metric is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketScore {
    pub bucket: Bucket,
    pub wmape: Option<f64>,
    pub rmse: Option<f64>,
    pub rmsse: Option<f64>,
    pub wbias: Option<f64>,
}

impl BucketScore {
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("wmape", self.wmape),
            ("rmse", self.rmse),
            ("rmsse", self.rmsse),
            ("wbias", self.wbias),
        ]
    }
}

/// Dates seen by training and inference at one origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeakageAudit {
    pub origin: YearMonth,
    pub last_training_date: YearMonth,
    pub last_context_date: YearMonth,
}

impl LeakageAudit {
    pub fn passed(&self) -> bool {
        self.last_training_date < self.origin && self.last_context_date < self.origin
    }
}

#[derive(Debug, Clone)]
pub struct OriginReport {
    pub origin: YearMonth,
    pub scores: Vec<BucketScore>,
    pub forecasts: Vec<SeriesForecast>,
    /// `m x m` inter-series weights, `None` when the layer is disabled.
    pub attention: Option<Tensor>,
    pub audit: LeakageAudit,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub origins: Vec<OriginReport>,
    /// Per-bucket mean over origins of each defined metric.
    pub average: Vec<BucketScore>,
    /// Mean of the per-origin attention matrices.
    pub attention: Option<Tensor>,
    /// Origins that could not be evaluated, with the reason.
    pub skipped: Vec<(YearMonth, String)>,
}

/// Scores forecasts against the panel's observed values. `history_end` is
/// the last month usable as in-sample history (RMSSE scale, wBias volume).
pub fn score(
    panel: &SeriesPanel,
    forecasts: &[SeriesForecast],
    buckets: &[Bucket],
    history_end: YearMonth,
) -> Result<Vec<BucketScore>> {
    let hist_len = (panel.offset_of(history_end) + 1).clamp(0, panel.len() as i64) as usize;
    let mut out = Vec::with_capacity(buckets.len());
    for &bucket in buckets {
        let (mut a_all, mut f_all) = (Vec::new(), Vec::new());
        let mut rmsse_inputs = Vec::new();
        let (mut a_means, mut f_means, mut volumes) = (Vec::new(), Vec::new(), Vec::new());
        for fc in forecasts {
            let q = panel
                .series_index(&fc.series_id)
                .ok_or_else(|| Error::Data(format!("forecast for unknown series {}", fc.series_id)))?;
            let s = &panel.series()[q];
            let (mut a, mut f) = (Vec::new(), Vec::new());
            for (k, (d, &v)) in fc.dates.iter().zip(&fc.values).enumerate() {
                if !bucket.contains(k + 1) {
                    continue;
                }
                if let Some(t) = panel.index_of(*d) {
                    if s.mask[t] {
                        a.push(s.values[t]);
                        f.push(v);
                    }
                }
            }
            if a.is_empty() {
                continue;
            }
            let history: Vec<f64> = s.observed().filter(|(t, _)| *t < hist_len).map(|(_, v)| v).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            a_means.push(mean(&a));
            f_means.push(mean(&f));
            volumes.push(history.iter().sum::<f64>());
            a_all.extend_from_slice(&a);
            f_all.extend_from_slice(&f);
            rmsse_inputs.push((history, a, f));
        }
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(m)) => {
                log::warn!("bucket {bucket}: {m}");
                Ok(None)
            }
            Err(e) => Err(e),
        };
        out.push(BucketScore {
            bucket,
            wmape: defined(wmape(&a_all, &f_all, None))?,
            rmse: defined(rmse(&a_all, &f_all, None))?,
            rmsse: defined(
                panel_rmsse(rmsse_inputs.iter().map(|(h, a, f)| (&h[..], &a[..], &f[..]))).map(|p| p.value),
            )?,
            wbias: defined(wbias(&a_means, &f_means, &volumes))?,
        });
    }
    Ok(out)
}

/// Inter-series weights of the first inter-series layer when forecasting
/// each series from `origin`: row `q` holds the weights used for series `q`.
pub fn export_attention(model: &ModelState, panel: &SeriesPanel, origin: YearMonth) -> Result<Tensor> {
    if !model.config.inter_series_enabled() {
        return Err(Error::Config("the model has no inter-series layer".into()));
    }
    crate::train::check_compatible(model, panel)?;
    let l = model.config.context_len;
    let o = panel.offset_of(origin);
    if o < l as i64 || o > panel.len() as i64 {
        return Err(Error::Config(format!(
            "origin {origin} needs {l} months of history within the panel"
        )));
    }
    let m = panel.num_series();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|q| {
            let w = crate::data::build_window(panel, &model.scaler, q, o as usize, l, model.config.horizon)?;
            let f = model.forward(&w)?;
            Ok(f.inter_series_weights[0].clone())
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

pub fn write_attention_csv<W: Write>(panel: &SeriesPanel, weights: &Tensor, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ids: Vec<&str> = panel.series().iter().map(|s| s.series_id.as_str()).collect();
    out.write_record(&ids).map_err(csv_err)?;
    for q in 0..ids.len() {
        out.write_record(weights.row(q).iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Data(format!("write failed: {e}")))
}

pub fn write_forecast_csv<W: Write>(forecasts: &[SeriesForecast], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["series_id", "origin", "step", "target_date", "forecast"])
        .map_err(csv_err)?;
    for f in forecasts {
        for (k, (d, v)) in f.dates.iter().zip(&f.values).enumerate() {
            out.write_record([
                f.series_id.clone(),
                f.origin.to_string(),
                (k + 1).to_string(),
                d.to_string(),
                v.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::Data(format!("write failed: {e}")))
}

/// `origin` is written verbatim (a date, or e.g. `average`). Undefined
/// metrics are omitted.
pub fn write_report_csv<W: Write>(origin: &str, scores: &[BucketScore], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["origin", "bucket", "metric", "value"])
        .map_err(csv_err)?;
    for s in scores {
        for (name, v) in s.metrics() {
            if let Some(v) = v {
                out.write_record([
                    origin.to_string(),
                    s.bucket.to_string(),
                    name.to_string(),
                    v.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::Data(format!("write failed: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("CSV write failed: {e}"))
}

/// Trains a fresh model on the data strictly before each origin and scores
/// its forecasts from that origin.
pub fn backtest(
    panel: &SeriesPanel,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    origins: &[YearMonth],
    buckets: &[Bucket],
    clip_nonnegative: bool,
) -> Result<EvalReport> {
    validate_buckets(buckets, net.horizon)?;
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for &origin in origins {
        let train_end = origin.add_months(-1);
        let history = match panel.truncated(train_end) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping origin {origin}: {e}");
                skipped.push((origin, e.to_string()));
                continue;
            }
        };
        let run_cfg = TrainConfig {
            train_end: Some(train_end),
            ..cfg.clone()
        };
        let outcome = match train(&history, net, &run_cfg) {
            Ok(o) => o,
            Err(e @ (Error::Data(_) | Error::Config(_))) => {
                log::warn!("skipping origin {origin}: {e}");
                skipped.push((origin, e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let model = outcome.model;
        let windows = inference_windows(&model, panel, origin)?;
        let last_context_date = windows.iter().map(|w| w.last_context_date()).max().unwrap_or(train_end);
        let forecasts = forecast(&model, panel, origin, clip_nonnegative)?;
        let scores = score(panel, &forecasts, buckets, train_end)?;
        let attention = if model.config.inter_series_enabled() {
            Some(export_attention(&model, panel, origin)?)
        } else {
            None
        };
        let audit = LeakageAudit {
            origin,
            last_training_date: outcome.last_label_date.max(history.end()),
            last_context_date,
        };
        if !audit.passed() {
            return Err(Error::Contract(format!("leakage detected at origin {origin}")));
        }
        reports.push(OriginReport {
            origin,
            scores,
            forecasts,
            attention,
            audit,
            final_loss: outcome.history.last().map_or(outcome.initial_loss, |r| r.loss),
        });
    }
    let average = buckets
        .iter()
        .enumerate()
        .map(|(b, &bucket)| {
            let mean = |f: fn(&BucketScore) -> Option<f64>| {
                let v: Vec<f64> = reports.iter().filter_map(|r| f(&r.scores[b])).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            BucketScore {
                bucket,
                wmape: mean(|s| s.wmape),
                rmse: mean(|s| s.rmse),
                rmsse: mean(|s| s.rmsse),
                wbias: mean(|s| s.wbias),
            }
        })
        .collect();
    let mats: Vec<&Tensor> = reports.iter().filter_map(|r| r.attention.as_ref()).collect();
    let attention = if mats.is_empty() {
        None
    } else {
        let mut acc = Tensor::zeros(mats[0].shape());
        for m in &mats {
            acc.data_mut().iter_mut().zip(m.data()).for_each(|(a, x)| *a += x);
        }
        let n = mats.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        Some(acc)
    };
    Ok(EvalReport {
        origins: reports,
        average,
        attention,
        skipped,
    })
}
