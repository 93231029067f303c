//! Cross-sectional equity alpha research: synthetic markets, factor
//! construction and neutralization, factor evaluation, a factor risk model,
//! ridge alpha combination, a constrained portfolio optimizer and a
//! walk-forward backtester.

pub mod backtest;
pub mod combiner;
pub mod eval;
pub mod factor;
pub mod io;
mod linalg;
pub mod matrix;
pub mod neutralize;
pub mod optimizer;
pub mod panel;
pub mod risk;
pub mod rng;
pub mod synth;

pub use factor::{FactorError, FactorPanel};
pub use matrix::MaskedMatrix;
pub use panel::{PanelError, PricePanel, ReturnPanel};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
