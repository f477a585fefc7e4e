//! Command-line front end: a flat `key = value` run configuration and the
//! `generate`, `train`, `forecast`, `backtest` and `attention` commands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::attention::InterSeriesMode;
use crate::backtest::{
    backtest, default_buckets, export_attention, parse_buckets, write_attention_csv, write_forecast_csv,
    write_report_csv,
};
use crate::data::{generate_synthetic, load_panel, save_panel, ScalerMode, SynthConfig, YearMonth};
use crate::error::{Error, Result};
use crate::network::{load_state, save_state, LossKind, NetworkConfig};
use crate::train::{forecast, train, TrainConfig};

/// Every configuration key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "synth.m",
    "synth.t",
    "synth.start",
    "synth.level_min",
    "synth.level_max",
    "synth.trend_min",
    "synth.trend_max",
    "synth.seasonal_amplitude",
    "synth.noise_std",
    "synth.zero_inflation",
    "synth.gamma",
    "synth.levels",
    "synth.noise_stds",
    "synth.locations",
    "model.encoder_blocks",
    "model.decoder_blocks",
    "model.d_model",
    "model.heads",
    "model.ff_width",
    "model.embedding_dim",
    "model.context_length",
    "model.horizon",
    "model.inter_series",
    "model.inter_series_layers",
    "model.inter_series_heads",
    "model.positional_encoding",
    "model.date_features",
    "model.activation",
    "model.dropout",
    "train.learning_rate",
    "train.plateau_factor",
    "train.plateau_patience",
    "train.min_delta",
    "train.batch_size",
    "train.epochs",
    "train.loss",
    "train.holdout_fraction",
    "train.stride",
    "train.end",
    "data.scaler",
    "eval.origins",
    "eval.buckets",
    "output.clip_nonnegative",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    /// Whether `synth.m` was given explicitly.
    pub synth_m_set: bool,
    /// Sparse `(i, j, value)` cross effects.
    pub gamma: Vec<(usize, usize, f64)>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub origins: Vec<YearMonth>,
    pub buckets: Option<String>,
    pub clip_nonnegative: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            synth_m_set: false,
            gamma: Vec::new(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            origins: Vec::new(),
            buckets: None,
            clip_nonnegative: true,
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(T::from_str)
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: String| Error::Config(format!("invalid value {value:?} for `{key}`: {msg}"));
        macro_rules! parse {
            () => {
                value.parse().map_err(|e| bad(format!("{e}")))?
            };
        }
        macro_rules! parse_list {
            () => {
                list(value).map_err(|e| bad(format!("{e}")))?
            };
        }
        match key {
            "seed" => self.seed = parse!(),
            "synth.m" => {
                self.synth.num_series = parse!();
                self.synth_m_set = true;
            }
            "synth.t" => self.synth.months = parse!(),
            "synth.start" => self.synth.start = parse!(),
            "synth.level_min" => self.synth.level_range.0 = parse!(),
            "synth.level_max" => self.synth.level_range.1 = parse!(),
            "synth.trend_min" => self.synth.trend_range.0 = parse!(),
            "synth.trend_max" => self.synth.trend_range.1 = parse!(),
            "synth.seasonal_amplitude" => self.synth.seasonal_amplitude = parse!(),
            "synth.noise_std" => self.synth.noise_std = parse!(),
            "synth.zero_inflation" => self.synth.zero_inflation = parse!(),
            "synth.gamma" => {
                self.gamma.clear();
                for entry in value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                    let parts: Vec<&str> = entry.split(',').map(str::trim).collect();
                    let [i, j, v] = parts[..] else {
                        return Err(bad(format!("entry {entry:?} is not `i,j,value`")));
                    };
                    self.gamma.push((
                        i.parse().map_err(|_| bad(format!("bad row index {i:?}")))?,
                        j.parse().map_err(|_| bad(format!("bad column index {j:?}")))?,
                        v.parse().map_err(|_| bad(format!("bad value {v:?}")))?,
                    ));
                }
            }
            // an empty list means "not set", which is how `echo` prints it
            "synth.levels" => self.synth.levels = Some(parse_list!()).filter(|v: &Vec<f64>| !v.is_empty()),
            "synth.noise_stds" => self.synth.noise_stds = Some(parse_list!()).filter(|v: &Vec<f64>| !v.is_empty()),
            "synth.locations" => self.synth.num_locations = parse!(),
            "model.encoder_blocks" => self.network.encoder_blocks = parse!(),
            "model.decoder_blocks" => self.network.decoder_blocks = parse!(),
            "model.d_model" => self.network.d_model = parse!(),
            "model.heads" => self.network.num_heads = parse!(),
            "model.ff_width" => self.network.ff_width = parse!(),
            "model.embedding_dim" => self.network.embedding_dim = parse!(),
            "model.context_length" => self.network.context_len = parse!(),
            "model.horizon" => self.network.horizon = parse!(),
            "model.inter_series" => {
                self.network.inter_series = match value {
                    "off" => None,
                    v => Some(InterSeriesMode::from_str(v).map_err(|e| bad(e.to_string()))?),
                }
            }
            "model.inter_series_layers" => self.network.inter_series_layers = parse!(),
            "model.inter_series_heads" => self.network.inter_series_heads = parse!(),
            "model.positional_encoding" => self.network.positional_encoding = parse!(),
            "model.date_features" => self.network.date_features = parse!(),
            "model.activation" => self.network.activation = parse!(),
            "model.dropout" => self.network.dropout = parse!(),
            "train.learning_rate" => self.train.learning_rate = parse!(),
            "train.plateau_factor" => self.train.plateau_factor = parse!(),
            "train.plateau_patience" => self.train.plateau_patience = parse!(),
            "train.min_delta" => self.train.min_delta = parse!(),
            "train.batch_size" => self.train.batch_size = parse!(),
            "train.epochs" => self.train.epochs = parse!(),
            "train.loss" => self.train.loss = LossKind::from_str(value).map_err(|e| bad(e.to_string()))?,
            "train.holdout_fraction" => self.train.holdout_fraction = parse!(),
            "train.stride" => self.train.stride = parse!(),
            "train.end" => self.train.train_end = Some(parse!()),
            "data.scaler" => self.train.scaler = ScalerMode::from_str(value).map_err(|e| bad(e.to_string()))?,
            "eval.origins" => self.origins = parse_list!(),
            "eval.buckets" => self.buckets = Some(value.to_string()),
            "output.clip_nonnegative" => self.clip_nonnegative = parse!(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Effective configuration in the input format.
    pub fn echo(&self) -> String {
        let s = &self.synth;
        let n = &self.network;
        let t = &self.train;
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "seed" => self.seed.to_string(),
                "synth.m" => s.num_series.to_string(),
                "synth.t" => s.months.to_string(),
                "synth.start" => s.start.to_string(),
                "synth.level_min" => s.level_range.0.to_string(),
                "synth.level_max" => s.level_range.1.to_string(),
                "synth.trend_min" => s.trend_range.0.to_string(),
                "synth.trend_max" => s.trend_range.1.to_string(),
                "synth.seasonal_amplitude" => s.seasonal_amplitude.to_string(),
                "synth.noise_std" => s.noise_std.to_string(),
                "synth.zero_inflation" => s.zero_inflation.to_string(),
                "synth.gamma" => self
                    .gamma
                    .iter()
                    .map(|(i, j, v)| format!("{i},{j},{v}"))
                    .collect::<Vec<_>>()
                    .join("; "),
                "synth.levels" => s.levels.as_deref().map(join).unwrap_or_default(),
                "synth.noise_stds" => s.noise_stds.as_deref().map(join).unwrap_or_default(),
                "synth.locations" => s.num_locations.to_string(),
                "model.encoder_blocks" => n.encoder_blocks.to_string(),
                "model.decoder_blocks" => n.decoder_blocks.to_string(),
                "model.d_model" => n.d_model.to_string(),
                "model.heads" => n.num_heads.to_string(),
                "model.ff_width" => n.ff_width.to_string(),
                "model.embedding_dim" => n.embedding_dim.to_string(),
                "model.context_length" => n.context_len.to_string(),
                "model.horizon" => n.horizon.to_string(),
                "model.inter_series" => n.inter_series.map_or("off".to_string(), |m| m.to_string()),
                "model.inter_series_layers" => n.inter_series_layers.to_string(),
                "model.inter_series_heads" => n.inter_series_heads.to_string(),
                "model.positional_encoding" => n.positional_encoding.to_string(),
                "model.date_features" => n.date_features.to_string(),
                "model.activation" => n.activation.to_string(),
                "model.dropout" => n.dropout.to_string(),
                "train.learning_rate" => t.learning_rate.to_string(),
                "train.plateau_factor" => t.plateau_factor.to_string(),
                "train.plateau_patience" => t.plateau_patience.to_string(),
                "train.min_delta" => t.min_delta.to_string(),
                "train.batch_size" => t.batch_size.to_string(),
                "train.epochs" => t.epochs.to_string(),
                "train.loss" => t.loss.to_string(),
                "train.holdout_fraction" => t.holdout_fraction.to_string(),
                "train.stride" => t.stride.to_string(),
                "train.end" => t.train_end.map(|d| d.to_string()).unwrap_or_default(),
                "data.scaler" => t.scaler.to_string(),
                "eval.origins" => join(&self.origins),
                "eval.buckets" => self.buckets.clone().unwrap_or_default(),
                "output.clip_nonnegative" => self.clip_nonnegative.to_string(),
                _ => unreachable!("every key is echoed"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Synthetic config with the seed and cross effects applied.
    pub fn synth_config(&self) -> Result<SynthConfig> {
        if !self.synth_m_set {
            return Err(Error::Config("missing required key `synth.m`".into()));
        }
        let mut s = self.synth.clone();
        s.seed = self.seed;
        if !self.gamma.is_empty() {
            let m = s.num_series;
            let mut g = vec![vec![0.0; m]; m];
            for &(i, j, v) in &self.gamma {
                if i >= m || j >= m {
                    return Err(Error::Config(format!("`synth.gamma` entry ({i},{j}) outside {m}x{m}")));
                }
                g[i][j] = v;
            }
            s.gamma = g;
        }
        Ok(s)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "isf",
    version,
    about = "Multi-series demand forecasting with inter-series attention"
)]
pub struct Cli {
    /// Run configuration (`key = value` per line).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or directory for `backtest`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic panel CSV.
    Generate,
    /// Train a model; writes the checkpoint and `<out>.loss.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Forecast every eligible series from an origin month.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// First forecast month, YYYY-MM; defaults to the month after the panel end.
        #[arg(long)]
        origin: Option<YearMonth>,
    },
    /// Retrain and score at each `eval.origins` month.
    Backtest {
        #[arg(long)]
        data: PathBuf,
    },
    /// Export the inter-series attention matrix at an origin.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        origin: Option<YearMonth>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn require_out(out: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::Config(format!("`{command}` needs --out")))
}

/// Writes to `--out` when given, otherwise to `stdout`.
fn with_output<F>(out: &Option<PathBuf>, stdout: &mut dyn Write, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match out {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush().map_err(|e| Error::io(p, e))
        }
        None => f(stdout),
    }
}

fn say(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Parses `args` (including the program name) and runs the command.
/// Informational output goes to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let echo: String = cfg.echo().lines().map(|l| format!("# {l}\n")).collect();

    match &cli.command {
        Command::Generate => {
            let synth = cfg.synth_config()?;
            let out = require_out(&cli.out, "generate")?;
            let panel = generate_synthetic(&synth)?;
            save_panel(&panel, &out)?;
            say(
                stdout,
                &format!(
                    "{echo}generated {} series x {} months ({}..{}) with seed {} -> {}\n",
                    panel.num_series(),
                    panel.len(),
                    panel.start(),
                    panel.end(),
                    synth.seed,
                    out.display()
                ),
            )
        }
        Command::Train { data } => {
            let out = require_out(&cli.out, "train")?;
            let panel = load_panel(data)?;
            say(stdout, &echo)?;
            let outcome = train(&panel, &cfg.network, &cfg.train_config())?;
            save_state(&outcome.model, &out)?;
            let loss_path = PathBuf::from(format!("{}.loss.csv", out.display()));
            let mut w = create(&loss_path)?;
            let mut text = String::from("epoch,loss,holdout_loss,learning_rate\n");
            for r in &outcome.history {
                let hold = r.holdout_loss.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(text, "{},{},{},{}", r.epoch, r.loss, hold, r.learning_rate);
            }
            w.write_all(text.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&loss_path, e))?;
            let last = outcome.history.last().map_or(outcome.initial_loss, |r| r.loss);
            say(
                stdout,
                &format!(
                    "trained on {} windows for {} epochs: loss {} -> {}\ncheckpoint {}\nloss history {}\n",
                    outcome.train_windows,
                    outcome.history.len(),
                    outcome.initial_loss,
                    last,
                    out.display(),
                    loss_path.display()
                ),
            )
        }
        Command::Forecast {
            checkpoint,
            data,
            origin,
        } => {
            let model = load_state(checkpoint)?;
            let panel = load_panel(data)?;
            let origin = origin.unwrap_or_else(|| panel.end().add_months(1));
            let fc = forecast(&model, &panel, origin, cfg.clip_nonnegative)?;
            with_output(&cli.out, stdout, |w| write_forecast_csv(&fc, w))
        }
        Command::Backtest { data } => {
            let dir = require_out(&cli.out, "backtest")?;
            let panel = load_panel(data)?;
            if cfg.origins.is_empty() {
                return Err(Error::Config("`backtest` needs `eval.origins`".into()));
            }
            let buckets = match &cfg.buckets {
                Some(b) => parse_buckets(b, cfg.network.horizon)?,
                None => default_buckets(cfg.network.horizon),
            };
            say(stdout, &echo)?;
            let report = backtest(
                &panel,
                &cfg.network,
                &cfg.train_config(),
                &cfg.origins,
                &buckets,
                cfg.clip_nonnegative,
            )?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut forecasts = Vec::new();
            for r in &report.origins {
                let p = dir.join(format!("report_{}.csv", r.origin));
                let mut w = create(&p)?;
                write_report_csv(&r.origin.to_string(), &r.scores, &mut w)?;
                w.flush().map_err(|e| Error::io(&p, e))?;
                forecasts.extend(r.forecasts.iter().cloned());
            }
            let p = dir.join("report_average.csv");
            let mut w = create(&p)?;
            write_report_csv("average", &report.average, &mut w)?;
            w.flush().map_err(|e| Error::io(&p, e))?;
            let p = dir.join("forecasts.csv");
            let mut w = create(&p)?;
            write_forecast_csv(&forecasts, &mut w)?;
            w.flush().map_err(|e| Error::io(&p, e))?;
            if let Some(att) = &report.attention {
                let p = dir.join("attention_average.csv");
                let mut w = create(&p)?;
                write_attention_csv(&panel, att, &mut w)?;
                w.flush().map_err(|e| Error::io(&p, e))?;
            }
            let mut text = String::new();
            for (o, why) in &report.skipped {
                let _ = writeln!(text, "skipped origin {o}: {why}");
            }
            let _ = writeln!(
                text,
                "evaluated {} origins, reports in {}",
                report.origins.len(),
                dir.display()
            );
            say(stdout, &text)
        }
        Command::Attention {
            checkpoint,
            data,
            origin,
        } => {
            let model = load_state(checkpoint)?;
            let panel = load_panel(data)?;
            let origin = origin.unwrap_or_else(|| panel.end().add_months(1));
            let att = export_attention(&model, &panel, origin)?;
            with_output(&cli.out, stdout, |w| write_attention_csv(&panel, &att, w))
        }
    }
}
