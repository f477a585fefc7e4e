//! Panel ingestion, scaling, windowing and synthetic data.

pub mod date;
pub mod panel;
pub mod scaler;
pub mod synth;
pub mod window;

pub use date::YearMonth;
pub use panel::{load_panel, read_panel, save_panel, write_panel, Series, SeriesPanel};
pub use scaler::{fit_scaler, ScalerMode, ScalerState};
pub use synth::{generate_synthetic, SeriesComponents, SynthConfig};
pub use window::{build_window, make_windows, Split, WindowBatch, WindowSpec};
