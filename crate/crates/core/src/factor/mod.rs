//! Factor computation: kernels, pipelines, and the two built-in factors
//! (momentum × volume rank product, rolling market beta).

pub mod kernels;
pub mod pipeline;

use ndarray::Array2;
use thiserror::Error;

use crate::matrix::MaskedMatrix;
use crate::panel::{daily_returns, PricePanel};

pub use kernels::{cross_rank, ewma, rolling_apply, rolling_cov, Kernel, RollingStat};
pub use pipeline::{evaluate, evaluate_chunked, Expr, Field, ParseError, Pipeline};

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("window {window} exceeds the {rows} available rows")]
    InvalidWindow { window: usize, rows: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// One factor: a masked `T×N` matrix aligned with a [`PricePanel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPanel {
    pub name: String,
    pub values: MaskedMatrix,
    /// Kernel applications that produced the values, oldest first.
    pub lineage: Vec<String>,
}

impl FactorPanel {
    pub fn new(name: impl Into<String>, values: MaskedMatrix, lineage: Vec<String>) -> Self {
        Self {
            name: name.into(),
            values,
            lineage,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.values.mask
    }

    /// Same factor with another name and one more lineage entry.
    pub fn derived(&self, name: impl Into<String>, values: MaskedMatrix, step: impl Into<String>) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(step.into());
        Self::new(name, values, lineage)
    }

    pub fn truncate_dates(&self, n: usize) -> Self {
        Self::new(self.name.clone(), self.values.slice_rows(0, n), self.lineage.clone())
    }
}

/// `rank(d-day return) × rank(volume)`, ranks taken cross-sectionally per date.
///
/// Raw ranks (`1..=n`) by default; `normalized` switches both ranks to
/// `(rank − 0.5)/n`.
pub fn alpha_momentum_volume(panel: &PricePanel, d: usize, normalized: bool) -> Result<FactorPanel, FactorError> {
    if d == 0 || d >= panel.n_dates() {
        return Err(FactorError::InvalidWindow {
            window: d,
            rows: panel.n_dates(),
        });
    }
    let rank = if normalized { "cross_rank_norm" } else { "cross_rank" };
    let text = format!("{rank}(delta(close,{d})/lag(close,{d})) * {rank}(volume)");
    let pipeline = Pipeline::new(format!("alpha_mv_{d}"), Expr::parse(&text)?);
    evaluate(panel, &pipeline)
}

/// Rolling beta of each security's daily return on a market return.
///
/// `market_returns` (one value per date, NaN for missing) defaults to the
/// equal-weighted mean of valid security returns. Windows with zero market
/// variance are masked.
pub fn rolling_beta(panel: &PricePanel, market_returns: Option<&[f64]>, window: usize) -> Result<FactorPanel, FactorError> {
    if window < 2 {
        return Err(FactorError::InvalidKernel("beta window must be ≥ 2".into()));
    }
    if window > panel.n_dates() {
        return Err(FactorError::InvalidWindow {
            window,
            rows: panel.n_dates(),
        });
    }
    let returns = daily_returns(panel).returns;
    let market = match market_returns {
        Some(m) => {
            if m.len() != panel.n_dates() {
                return Err(FactorError::Config(format!(
                    "market return series has {} values for {} dates",
                    m.len(),
                    panel.n_dates()
                )));
            }
            let values = Array2::from_shape_fn(returns.dim(), |(t, _)| m[t]);
            MaskedMatrix::from_values(values)
        }
        None => kernels::cross_mean(&returns),
    };
    let cov = kernels::rolling_cov(&returns, &market, window)?;
    let var = kernels::rolling_cov(&market, &market, window)?;
    let beta = kernels::combine(&cov, &var, |c, v| if v > 0.0 { c / v } else { f64::NAN });
    Ok(FactorPanel::new(
        format!("beta_{window}"),
        beta,
        vec![format!("rolling_beta({window})")],
    ))
}
