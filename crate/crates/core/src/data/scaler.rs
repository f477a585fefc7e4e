//! Target and covariate scaling fitted on the training range only.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::date::YearMonth;
use super::panel::SeriesPanel;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalerMode {
    /// `log1p`, then standardize with statistics pooled over all series.
    #[default]
    GlobalLog1pStandardize,
    /// Standardize each series with its own mean and std.
    PerSeriesStandardize,
    None,
}

impl FromStr for ScalerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_log1p_standardize" => Ok(Self::GlobalLog1pStandardize),
            "per_series_standardize" => Ok(Self::PerSeriesStandardize),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown scaler mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScalerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::GlobalLog1pStandardize => "global_log1p_standardize",
            Self::PerSeriesStandardize => "per_series_standardize",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub const IDENTITY: Stats = Stats { mean: 0.0, std: 1.0 };

    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub mode: ScalerMode,
    /// Pooled target statistics (in log1p space for the log mode).
    pub global: Stats,
    /// Per-series target statistics, used by the per-series mode.
    pub per_series: BTreeMap<String, Stats>,
    /// One entry per covariate column.
    pub covariates: Vec<Stats>,
}

/// Fits statistics on observations dated on or before `train_end`.
pub fn fit_scaler(panel: &SeriesPanel, train_end: YearMonth, mode: ScalerMode) -> Result<ScalerState> {
    let last = panel.offset_of(train_end);
    if last < 0 {
        return Err(Error::Data(format!(
            "train end {train_end} precedes the panel start {}",
            panel.start()
        )));
    }
    let last = (last as usize).min(panel.len() - 1);
    let in_range = |i: &usize| *i <= last;

    let mut pooled = Vec::new();
    let mut per_series = BTreeMap::new();
    let mut cov_values = vec![Vec::new(); panel.covariate_names().len()];
    for s in panel.series() {
        let obs: Vec<(usize, f64)> = s.observed().filter(|(i, _)| in_range(i)).collect();
        let vals: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
        if let Some(st) = Stats::of(&vals) {
            per_series.insert(s.series_id.clone(), st);
        }
        match mode {
            ScalerMode::GlobalLog1pStandardize => pooled.extend(vals.iter().map(|v| v.ln_1p())),
            _ => pooled.extend(vals),
        }
        for (c, col) in cov_values.iter_mut().zip(&s.covariates) {
            c.extend(obs.iter().map(|(i, _)| col[*i]));
        }
    }
    let global = Stats::of(&pooled)
        .ok_or_else(|| Error::Data(format!("no observations on or before {train_end} to fit the scaler")))?;
    let covariates = cov_values
        .iter()
        .map(|c| match mode {
            ScalerMode::None => Stats::IDENTITY,
            _ => Stats::of(c).unwrap_or(Stats::IDENTITY),
        })
        .collect();
    Ok(ScalerState {
        mode,
        global,
        per_series,
        covariates,
    })
}

impl ScalerState {
    fn target_stats(&self, series_id: &str) -> Stats {
        match self.mode {
            ScalerMode::None => Stats::IDENTITY,
            ScalerMode::GlobalLog1pStandardize => self.global,
            ScalerMode::PerSeriesStandardize => self.per_series.get(series_id).copied().unwrap_or(self.global),
        }
    }

    /// Scales one target value of `series_id`.
    pub fn apply(&self, series_id: &str, x: f64) -> f64 {
        let st = self.target_stats(series_id);
        let x = if self.mode == ScalerMode::GlobalLog1pStandardize {
            x.ln_1p()
        } else {
            x
        };
        (x - st.mean) / st.std
    }

    pub fn invert(&self, series_id: &str, z: f64) -> f64 {
        let st = self.target_stats(series_id);
        let x = z * st.std + st.mean;
        if self.mode == ScalerMode::GlobalLog1pStandardize {
            x.exp_m1()
        } else {
            x
        }
    }

    pub fn apply_covariate(&self, column: usize, x: f64) -> f64 {
        let st = self.covariates.get(column).copied().unwrap_or(Stats::IDENTITY);
        (x - st.mean) / st.std
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::Series;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel(rows: &[(&str, Vec<f64>)]) -> SeriesPanel {
        let len = rows[0].1.len();
        let series = rows
            .iter()
            .map(|(id, v)| Series {
                series_id: id.to_string(),
                product_id: "p".into(),
                location_id: "l".into(),
                values: v.clone(),
                mask: vec![true; len],
                covariates: vec![],
            })
            .collect();
        SeriesPanel::new(YearMonth::new(2015, 1).unwrap(), len, vec![], series).unwrap()
    }

    #[test]
    fn constant_series_scales_to_zero() {
        let p = panel(&[("a", vec![7.0; 6])]);
        let s = fit_scaler(&p, p.end(), ScalerMode::PerSeriesStandardize).unwrap();
        assert_eq!(s.per_series["a"].std, STD_FLOOR);
        assert_eq!(s.apply("a", 7.0), 0.0);
    }

    #[test]
    fn log_mode_maps_zero_through_log1p() {
        let p = panel(&[("a", vec![0.0, 0.0, 0.0])]);
        let s = fit_scaler(&p, p.end(), ScalerMode::GlobalLog1pStandardize).unwrap();
        assert_eq!(s.global.mean, 0.0);
        assert_eq!(s.apply("a", 0.0), 0.0);
    }

    #[test]
    fn statistics_ignore_observations_after_train_end() {
        let p = panel(&[("a", vec![1.0, 3.0, 1000.0])]);
        let end = YearMonth::new(2015, 2).unwrap();
        let s = fit_scaler(&p, end, ScalerMode::PerSeriesStandardize).unwrap();
        assert_eq!(s.per_series["a"].mean, 2.0);
        assert_eq!(s.per_series["a"].std, 1.0);
        let before = YearMonth::new(2014, 12).unwrap();
        assert!(fit_scaler(&p, before, ScalerMode::None).is_err());
    }

    #[test]
    fn round_trip_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..500.0)).collect();
        let p = panel(&[("a", vals.clone()), ("b", vals.iter().map(|v| v * 0.1).collect())]);
        for mode in [
            ScalerMode::GlobalLog1pStandardize,
            ScalerMode::PerSeriesStandardize,
            ScalerMode::None,
        ] {
            let s = fit_scaler(&p, p.end(), mode).unwrap();
            for _ in 0..1000 {
                let x: f64 = rng.random_range(0.0..1000.0);
                for id in ["a", "b", "unseen"] {
                    assert!((s.invert(id, s.apply(id, x)) - x).abs() < 1e-10, "{mode} {x}");
                }
            }
        }
    }
}
