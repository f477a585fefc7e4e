//! Per-series training and evaluation examples cut from a panel.

use crate::attention::SeriesMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::date::YearMonth;
use super::panel::SeriesPanel;
use super::scaler::ScalerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub context_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

/// Which origins to emit.
#[derive(Debug, Clone, PartialEq)]
pub enum Split {
    /// Every `stride`-th origin whose whole label window ends on or before
    /// `end`.
    Train { end: YearMonth },
    /// Exactly these origins.
    Origins(Vec<YearMonth>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// Row of the target series in `context`.
    pub target: usize,
    pub series_id: String,
    pub product_id: String,
    pub location_id: String,
    /// First forecast month.
    pub origin: YearMonth,
    /// Scaled context windows of every series, `m x L`, zero where
    /// unobserved.
    pub context: Tensor,
    /// Row-major `m x L` observation mask of `context`.
    pub context_mask: Vec<bool>,
    /// Series with at least one observation in the context window.
    pub series_mask: SeriesMask,
    /// Scaled covariates of the target, `L x F` row-major.
    pub covariates: Vec<f64>,
    /// Scaled covariates for the forecast months, `h x F` row-major.
    pub future_covariates: Vec<f64>,
    pub num_covariates: usize,
    pub context_dates: Vec<YearMonth>,
    pub future_dates: Vec<YearMonth>,
    /// Scaled labels, 0 where unobserved or beyond the panel.
    pub labels: Vec<f64>,
    pub label_mask: Vec<bool>,
}

impl WindowBatch {
    pub fn context_len(&self) -> usize {
        self.context_dates.len()
    }

    pub fn horizon(&self) -> usize {
        self.future_dates.len()
    }

    /// `1 x L` scaled context of the target series.
    pub fn target_context(&self) -> Tensor {
        Tensor::new(vec![1, self.context_len()], self.context.row(self.target).to_vec())
            .expect("context row is non-empty")
    }

    pub fn target_observed_in_context(&self) -> bool {
        let l = self.context_len();
        self.context_mask[self.target * l..(self.target + 1) * l]
            .iter()
            .any(|&m| m)
    }

    pub fn last_label_date(&self) -> YearMonth {
        *self.future_dates.last().expect("horizon is positive")
    }

    pub fn last_context_date(&self) -> YearMonth {
        *self.context_dates.last().expect("context is non-empty")
    }
}

impl WindowSpec {
    pub fn new(context_len: usize, horizon: usize, stride: usize) -> Result<Self> {
        if context_len == 0 || horizon == 0 || stride == 0 {
            return Err(Error::Config(
                "context length, horizon and stride must be positive".into(),
            ));
        }
        Ok(Self {
            context_len,
            horizon,
            stride,
        })
    }

    /// Training origin offsets on an axis of `len` months whose labels end
    /// at or before axis offset `last_label`.
    pub fn train_origins(&self, len: usize, last_label: i64) -> Vec<usize> {
        let last_origin = (last_label - self.horizon as i64 + 1).min(len as i64 - self.horizon as i64);
        (self.context_len..)
            .step_by(self.stride)
            .take_while(|&o| o as i64 <= last_origin)
            .collect()
    }
}

/// Cuts one window for series `q` whose forecast starts at axis offset
/// `origin`. The origin may equal the axis length (pure forecasting); later
/// months are treated as unobserved.
pub fn build_window(
    panel: &SeriesPanel,
    scaler: &ScalerState,
    q: usize,
    origin: usize,
    context_len: usize,
    horizon: usize,
) -> Result<WindowBatch> {
    if origin < context_len || origin > panel.len() {
        return Err(Error::Config(format!(
            "origin {} needs {context_len} months of history inside the panel {}..{}",
            panel.date(origin),
            panel.start(),
            panel.end()
        )));
    }
    let m = panel.num_series();
    let l = context_len;
    let start = origin - l;
    let mut context = vec![0.0; m * l];
    let mut context_mask = vec![false; m * l];
    let mut series_mask = vec![false; m];
    for (j, s) in panel.series().iter().enumerate() {
        for t in 0..l {
            if s.mask[start + t] {
                context[j * l + t] = scaler.apply(&s.series_id, s.values[start + t]);
                context_mask[j * l + t] = true;
                series_mask[j] = true;
            }
        }
    }
    let series_mask = SeriesMask::new(series_mask).map_err(|_| {
        Error::Data(format!(
            "no series has an observation in the context window before {}",
            panel.date(origin)
        ))
    })?;

    let target = &panel.series()[q];
    let f = panel.covariate_names().len();
    let cov = |t: usize, c: usize| -> f64 {
        if t < panel.len() {
            scaler.apply_covariate(c, target.covariates[c][t])
        } else {
            0.0
        }
    };
    let mut covariates = Vec::with_capacity(l * f);
    for t in start..origin {
        covariates.extend((0..f).map(|c| cov(t, c)));
    }
    let mut future_covariates = Vec::with_capacity(horizon * f);
    let mut labels = vec![0.0; horizon];
    let mut label_mask = vec![false; horizon];
    for k in 0..horizon {
        let t = origin + k;
        future_covariates.extend((0..f).map(|c| cov(t, c)));
        if t < panel.len() && target.mask[t] {
            labels[k] = scaler.apply(&target.series_id, target.values[t]);
            label_mask[k] = true;
        }
    }
    Ok(WindowBatch {
        target: q,
        series_id: target.series_id.clone(),
        product_id: target.product_id.clone(),
        location_id: target.location_id.clone(),
        origin: panel.date(origin),
        context: Tensor::new(vec![m, l], context)?,
        context_mask,
        series_mask,
        covariates,
        future_covariates,
        num_covariates: f,
        context_dates: (start..origin).map(|t| panel.date(t)).collect(),
        future_dates: (origin..origin + horizon).map(|t| panel.date(t)).collect(),
        labels,
        label_mask,
    })
}

/// One window per (series, origin) with at least one observed label,
/// ordered by series id then origin.
pub fn make_windows(
    panel: &SeriesPanel,
    scaler: &ScalerState,
    spec: WindowSpec,
    split: &Split,
) -> Result<Vec<WindowBatch>> {
    if spec.context_len + spec.horizon > panel.len() {
        return Err(Error::Config(format!(
            "context {} plus horizon {} exceeds the {}-month axis",
            spec.context_len,
            spec.horizon,
            panel.len()
        )));
    }
    let origins: Vec<usize> = match split {
        Split::Train { end } => spec.train_origins(panel.len(), panel.offset_of(*end)),
        Split::Origins(dates) => dates
            .iter()
            .map(|d| {
                let o = panel.offset_of(*d);
                if o < spec.context_len as i64 || o >= panel.len() as i64 {
                    Err(Error::Config(format!(
                        "evaluation origin {d} needs {} months of history and a label inside the panel",
                        spec.context_len
                    )))
                } else {
                    Ok(o as usize)
                }
            })
            .collect::<Result<_>>()?,
    };
    let mut out = Vec::new();
    for q in 0..panel.num_series() {
        let s = &panel.series()[q];
        for &o in &origins {
            let labelled = (o..(o + spec.horizon).min(panel.len())).any(|t| s.mask[t]);
            if !labelled {
                continue;
            }
            match build_window(panel, scaler, q, o, spec.context_len, spec.horizon) {
                Ok(w) => out.push(w),
                // nothing observed anywhere in the context: nothing to attend to
                Err(Error::Data(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}
