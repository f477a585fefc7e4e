//! Synthetic retail panels with planted cross-series effects.
//!
//! Series `i` at month `t` (counted from 0) follows
//!
//! ```text
//! y[i,t] = max(0, level_i + trend_i * t + amp_i * sin(2*pi*t/12 + phase_i)
//!                 + sum_j gamma[i][j] * y[j,t-1] + noise)
//! ```
//!
//! after which the value is replaced by zero with the zero-inflation
//! probability. `amp_i` is `seasonal_amplitude * level_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::date::YearMonth;
use super::panel::{Series, SeriesPanel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_series: usize,
    pub months: usize,
    pub start: YearMonth,
    pub seed: u64,
    pub level_range: (f64, f64),
    pub trend_range: (f64, f64),
    /// Seasonal amplitude as a fraction of each series' level.
    pub seasonal_amplitude: f64,
    pub noise_std: f64,
    pub zero_inflation: f64,
    /// `gamma[i][j]`: effect of series j's previous month on series i.
    /// Empty means no cross-series effects.
    pub gamma: Vec<Vec<f64>>,
    /// Fixed per-series levels overriding `level_range`.
    pub levels: Option<Vec<f64>>,
    /// Per-series noise std overriding `noise_std`.
    pub noise_stds: Option<Vec<f64>>,
    /// Series `i` gets product `i / num_locations` and location
    /// `i % num_locations`.
    pub num_locations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_series: 8,
            months: 48,
            start: YearMonth::new(2015, 1).expect("valid"),
            seed: 0,
            level_range: (20.0, 200.0),
            trend_range: (-0.2, 0.5),
            seasonal_amplitude: 0.3,
            noise_std: 1.0,
            zero_inflation: 0.0,
            gamma: Vec::new(),
            levels: None,
            noise_stds: None,
            num_locations: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesComponents {
    pub level: f64,
    pub trend: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub noise_std: f64,
}

impl SeriesComponents {
    /// Level, trend and seasonal part at month `t`.
    pub fn deterministic(&self, t: usize) -> f64 {
        let t = t as f64;
        self.level + self.trend * t + self.amplitude * (2.0 * std::f64::consts::PI * t / 12.0 + self.phase).sin()
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.num_series;
        if m == 0 || self.months == 0 || self.num_locations == 0 {
            return Err(Error::Config(
                "synthetic panel needs at least one series, month and location".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.zero_inflation) {
            return Err(Error::Config(format!(
                "zero-inflation probability {} outside [0, 1]",
                self.zero_inflation
            )));
        }
        if self.noise_std < 0.0 || self.level_range.0 > self.level_range.1 || self.trend_range.0 > self.trend_range.1 {
            return Err(Error::Config("invalid synthetic ranges".into()));
        }
        if !self.gamma.is_empty() {
            if self.gamma.len() != m || self.gamma.iter().any(|r| r.len() != m) {
                return Err(Error::Config(format!("gamma must be {m}x{m}")));
            }
            if (0..m).any(|i| self.gamma[i][i] != 0.0) {
                return Err(Error::Config("gamma diagonal must be zero".into()));
            }
        }
        for (name, v) in [("levels", &self.levels), ("noise_stds", &self.noise_stds)] {
            if let Some(v) = v {
                if v.len() != m {
                    return Err(Error::Config(format!("{name} needs {m} entries, got {}", v.len())));
                }
            }
        }
        if self.noise_stds.as_ref().is_some_and(|v| v.iter().any(|&s| s < 0.0)) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }

    fn draw_components(&self, rng: &mut ChaCha8Rng) -> Vec<SeriesComponents> {
        (0..self.num_series)
            .map(|i| {
                let level = rng.random_range(self.level_range.0..=self.level_range.1);
                let trend = rng.random_range(self.trend_range.0..=self.trend_range.1);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let level = self.levels.as_ref().map_or(level, |l| l[i]);
                SeriesComponents {
                    level,
                    trend,
                    amplitude: self.seasonal_amplitude * level,
                    phase,
                    noise_std: self.noise_stds.as_ref().map_or(self.noise_std, |n| n[i]),
                }
            })
            .collect()
    }

    /// The per-series components the generator uses for this seed.
    pub fn components(&self) -> Result<Vec<SeriesComponents>> {
        self.validate()?;
        Ok(self.draw_components(&mut ChaCha8Rng::seed_from_u64(self.seed)))
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SeriesPanel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let comps = cfg.draw_components(&mut rng);
    let (m, t_len) = (cfg.num_series, cfg.months);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut y = vec![vec![0.0; t_len]; m];
    for t in 0..t_len {
        for i in 0..m {
            let eps = std_normal.sample(&mut rng) * comps[i].noise_std;
            let inflate = rng.random::<f64>() < cfg.zero_inflation;
            let cross: f64 = if t == 0 || cfg.gamma.is_empty() {
                0.0
            } else {
                (0..m).map(|j| cfg.gamma[i][j] * y[j][t - 1]).sum()
            };
            let v = (comps[i].deterministic(t) + cross + eps).max(0.0);
            y[i][t] = if inflate { 0.0 } else { v };
        }
    }

    let width = m.to_string().len().max(3);
    let series = y
        .into_iter()
        .enumerate()
        .map(|(i, values)| Series {
            series_id: format!("S{i:0width$}"),
            product_id: format!("P{:0width$}", i / cfg.num_locations),
            location_id: format!("L{:02}", i % cfg.num_locations),
            values,
            mask: vec![true; t_len],
            covariates: vec![],
        })
        .collect();
    SeriesPanel::new(cfg.start, t_len, vec![], series)
}
