//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use crossalpha::backtest::BacktestConfig;
use crossalpha::combiner::CombinerConfig;
use crossalpha::eval::EvalConfig;
use crossalpha::neutralize::NeutralizationConfig;
use crossalpha::optimizer::PortfolioConfig;
use crossalpha::panel::LoadOptions;
use crossalpha::risk::RiskConfig;
use crossalpha::synth::MarketConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub market: MarketConfig,
    pub signal_strength: f64,
    /// Forward-return horizon of the planted signal, in days.
    pub signal_horizon: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            market: MarketConfig::default(),
            signal_strength: 0.3,
            signal_horizon: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorsSection {
    /// Pipeline definitions, one `factor "name" = expr` per entry.
    pub definitions: Vec<String>,
    /// Dates evaluated per chunk; must cover the longest lookback.
    pub chunk_days: usize,
}

impl Default for FactorsSection {
    fn default() -> Self {
        Self {
            definitions: vec![
                r#"factor "mom20" = delta(close, 20) / lag(close, 20) |> cross_rank_norm"#.into(),
                r#"factor "vol20" = rolling_std(returns(1), 20) |> cross_rank_norm"#.into(),
                r#"factor "amv10" = alpha_momentum_volume(10)"#.into(),
            ],
            chunk_days: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: LoadOptions,
    pub synth: SynthSection,
    pub factors: FactorsSection,
    pub neutralize: NeutralizationConfig,
    pub eval: EvalConfig,
    pub risk: RiskConfig,
    pub combiner: CombinerConfig,
    pub optimizer: PortfolioConfig,
    pub backtest: BacktestConfig,
}

/// Keys without a default value, shown in the reference as comments.
const OPTIONAL_KEYS: &[(&str, &str)] = &[
    ("backtest.train_start", "YYYY-MM-DD; panel start when unset"),
    ("backtest.train_end", "YYYY-MM-DD; train_days after the start when unset"),
    ("backtest.test_end", "YYYY-MM-DD; panel end when unset"),
    ("backtest.purge_gap", "days; combiner.target_horizon when unset"),
    ("backtest.rolling_window", "days; expanding window when unset"),
    ("risk.factors", "list of factor names; all factors when unset"),
    ("optimizer.solver.rho", "initial ADMM penalty; chosen from the problem when unset"),
    ("eval.rolling_window", "days; set to 0 to disable the rolling IC"),
];

impl RunConfig {
    /// Parsed configuration and the raw text it came from.
    pub fn load(path: Option<&Path>) -> Result<(Self, String), CliError> {
        let Some(path) = path else {
            return Ok((Self::parse("")?, String::new()));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.eval.rolling_window == Some(0) {
            cfg.eval.rolling_window = None;
        }
        cfg.wire();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the model sections into the backtest block.
    fn wire(&mut self) {
        self.backtest.combiner = self.combiner.clone();
        self.backtest.risk = self.risk.clone();
        self.backtest.optimizer = self.optimizer.clone();
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.neutralize.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.risk.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.combiner.ridge_lambda >= 0.0) || self.combiner.target_horizon == 0 {
            return bad("combiner.ridge_lambda must be ≥ 0 and target_horizon ≥ 1".into());
        }
        if self.factors.chunk_days == 0 {
            return bad("factors.chunk_days must be ≥ 1".into());
        }
        for def in &self.factors.definitions {
            crossalpha::factor::pipeline::Pipeline::parse(def)
                .map_err(|e| CliError::Config(format!("factors.definitions: {e} in `{def}`")))?;
        }
        if self.eval.horizon == 0 {
            return bad("eval.horizon must be ≥ 1".into());
        }
        let s = &self.synth;
        if !(0.0..=1.0).contains(&s.signal_strength) || s.signal_horizon == 0 {
            return bad("synth.signal_strength must be in [0, 1] and signal_horizon ≥ 1".into());
        }
        let o = &self.optimizer;
        if !(o.w_max > 0.0) || !(o.leverage > 0.0) || !(o.lambda_risk >= 0.0) || !(o.gamma_tc >= 0.0) || !(o.cost >= 0.0) {
            return bad("optimizer: w_max and leverage must be > 0; lambda_risk, gamma_tc and cost ≥ 0".into());
        }
        if !(o.solver.tol > 0.0) || o.solver.max_iter == 0 {
            return bad("optimizer.solver: tol must be > 0 and max_iter ≥ 1".into());
        }
        let b = &self.backtest;
        if b.rebalance_every == 0 || b.retrain_every == 0 || !(b.cost_rate >= 0.0) || b.periods_per_year == 0 {
            return bad("backtest: rebalance_every, retrain_every and periods_per_year must be ≥ 1, cost_rate ≥ 0".into());
        }
        Ok(())
    }

    /// Every key with its default, as a TOML document.
    pub fn reference() -> String {
        let mut out = toml::to_string(&Self::default()).expect("default config serializes");
        out.push_str("\n# Optional keys (no default value):\n");
        for (key, what) in OPTIONAL_KEYS {
            out.push_str(&format!("#   {key}: {what}\n"));
        }
        out
    }
}
