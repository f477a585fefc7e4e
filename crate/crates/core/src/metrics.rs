//! Forecast accuracy metrics, computed in original units.
//!
//! Sums are accumulated in input order so results are reproducible.

use crate::error::{Error, Result};

fn check_lengths(a: &[f64], f: &[f64], mask: Option<&[bool]>) -> Result<()> {
    if a.len() != f.len() || mask.is_some_and(|m| m.len() != a.len()) {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: {} actuals, {} forecasts",
            a.len(),
            f.len()
        )));
    }
    Ok(())
}

fn observed<'s>(a: &'s [f64], f: &'s [f64], mask: Option<&'s [bool]>) -> impl Iterator<Item = (f64, f64)> + 's {
    a.iter()
        .zip(f)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (&a, &f))| (a, f))
}

/// `sum |a - f| / sum |a|` over observed entries.
pub fn wmape(actuals: &[f64], forecasts: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_lengths(actuals, forecasts, mask)?;
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for (a, f) in observed(actuals, forecasts, mask) {
        num += (a - f).abs();
        den += a.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("wMAPE of an empty set".into()));
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("wMAPE with all-zero actuals".into()));
    }
    Ok(num / den)
}

pub fn rmse(actuals: &[f64], forecasts: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_lengths(actuals, forecasts, mask)?;
    let (mut sq, mut n) = (0.0, 0usize);
    for (a, f) in observed(actuals, forecasts, mask) {
        sq += (a - f) * (a - f);
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("RMSE of an empty set".into()));
    }
    Ok((sq / n as f64).sqrt())
}

/// RMSSE of one series: forecast error scaled by the in-sample one-step
/// naive error of `history`.
pub fn rmsse(history: &[f64], actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    check_lengths(actuals, forecasts, None)?;
    if history.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "RMSSE needs at least 2 history points, got {}",
            history.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::UndefinedMetric("RMSSE over an empty horizon".into()));
    }
    let naive: f64 = history.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (history.len() - 1) as f64;
    if naive == 0.0 {
        return Err(Error::UndefinedMetric("RMSSE with a constant history".into()));
    }
    let err: f64 = actuals.iter().zip(forecasts).map(|(a, f)| (a - f).powi(2)).sum::<f64>() / actuals.len() as f64;
    Ok((err / naive).sqrt())
}

/// Panel RMSSE: unweighted mean over series with a defined score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelRmsse {
    pub value: f64,
    pub scored: usize,
    /// Series skipped because their score was undefined.
    pub excluded: usize,
}

/// `series` holds `(history, actuals, forecasts)` per series.
pub fn panel_rmsse<'s, I>(series: I) -> Result<PanelRmsse>
where
    I: IntoIterator<Item = (&'s [f64], &'s [f64], &'s [f64])>,
{
    let (mut sum, mut scored, mut excluded) = (0.0, 0usize, 0usize);
    for (h, a, f) in series {
        match rmsse(h, a, f) {
            Ok(v) => {
                sum += v;
                scored += 1;
            }
            Err(Error::UndefinedMetric(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if excluded > 0 {
        log::warn!("RMSSE undefined for {excluded} series, excluded from the mean");
    }
    if scored == 0 {
        return Err(Error::UndefinedMetric("RMSSE undefined for every series".into()));
    }
    Ok(PanelRmsse {
        value: sum / scored as f64,
        scored,
        excluded,
    })
}

/// Volume-weighted absolute bias between per-series means.
pub fn wbias(actual_means: &[f64], forecast_means: &[f64], volumes: &[f64]) -> Result<f64> {
    check_lengths(actual_means, forecast_means, None)?;
    if volumes.len() != actual_means.len() {
        return Err(Error::Shape(format!(
            "{} volumes for {} series",
            volumes.len(),
            actual_means.len()
        )));
    }
    let total: f64 = volumes.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric("wBias with zero total volume".into()));
    }
    let num: f64 = actual_means
        .iter()
        .zip(forecast_means)
        .zip(volumes)
        .map(|((a, f), v)| v * (a - f).abs())
        .sum();
    Ok(num / total)
}
