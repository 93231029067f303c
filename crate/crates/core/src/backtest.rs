//! Walk-forward simulation: periodic combiner retraining with a purge gap,
//! optimizer rebalances, cost accounting, performance metrics and factor
//! attribution.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::combiner::{self, CombinerConfig, CombinerError, CombinerModel};
use crate::factor::FactorPanel;
use crate::matrix::mean_std;
use crate::optimizer::{self, OptimizerError, PortfolioConfig, SolveStatus, WarmStart, WarmStartPolicy};
use crate::panel::{daily_returns, forward_returns, PanelError, PricePanel};
use crate::risk::{self, RiskConfig, RiskError};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid backtest config: {0}")]
    Config(String),
    #[error("equity reached {value} on {date}")]
    Ruin { date: NaiveDate, value: f64 },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Combiner(#[from] CombinerError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// First training date; the panel start when absent.
    pub train_start: Option<NaiveDate>,
    /// Last date of the initial training window; `train_days` after the
    /// start when absent.
    pub train_end: Option<NaiveDate>,
    pub train_days: usize,
    /// Last simulated date; the panel end when absent.
    pub test_end: Option<NaiveDate>,
    pub retrain_every: usize,
    pub rebalance_every: usize,
    /// Days between the last training label and a decision; the combiner's
    /// target horizon when absent.
    pub purge_gap: Option<usize>,
    /// Rolling training window length; expanding when absent.
    pub rolling_window: Option<usize>,
    /// Fraction of equity charged per unit of turnover.
    pub cost_rate: f64,
    pub periods_per_year: usize,
    /// Annual rate subtracted in the Sharpe ratio.
    pub risk_free_rate: f64,
    pub warm_start: WarmStartPolicy,
    // The model blocks have their own configuration sections.
    #[serde(skip)]
    pub combiner: CombinerConfig,
    #[serde(skip)]
    pub risk: RiskConfig,
    #[serde(skip)]
    pub optimizer: PortfolioConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            train_start: None,
            train_end: None,
            train_days: 1250,
            test_end: None,
            retrain_every: 60,
            rebalance_every: 20,
            purge_gap: None,
            rolling_window: None,
            cost_rate: optimizer::DEFAULT_COST,
            periods_per_year: 252,
            risk_free_rate: 0.0,
            warm_start: WarmStartPolicy::Previous,
            combiner: CombinerConfig::default(),
            risk: RiskConfig::default(),
            optimizer: PortfolioConfig::default(),
        }
    }
}

/// Resolved date indices of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub train_start: usize,
    pub train_end: usize,
    pub purge_gap: usize,
    /// First rebalance; the equity curve starts here.
    pub first_rebalance: usize,
    pub test_end: usize,
}

impl BacktestConfig {
    pub fn purge(&self) -> usize {
        self.purge_gap.unwrap_or(self.combiner.target_horizon)
    }

    pub fn schedule(&self, dates: &[NaiveDate]) -> Result<Schedule, BacktestError> {
        let bad = |m: String| Err(BacktestError::Config(m));
        if self.rebalance_every == 0 || self.retrain_every == 0 {
            return bad("rebalance_every and retrain_every must be ≥ 1".into());
        }
        if self.combiner.target_horizon == 0 {
            return bad("combiner.target_horizon must be ≥ 1".into());
        }
        if !(self.cost_rate >= 0.0) || self.periods_per_year == 0 {
            return bad("cost_rate must be ≥ 0 and periods_per_year ≥ 1".into());
        }
        if self.rolling_window == Some(0) {
            return bad("rolling_window must be ≥ 1".into());
        }
        self.risk.validate()?;
        // Index of the last date on or before `d`.
        let locate = |d: NaiveDate, what: &str| match dates.partition_point(|x| *x <= d) {
            0 => Err(BacktestError::Config(format!("{what} {d} precedes the panel"))),
            k => Ok(k - 1),
        };
        let train_start = match self.train_start {
            Some(d) => dates.partition_point(|x| *x < d),
            None => 0,
        };
        let train_end = match self.train_end {
            Some(d) => locate(d, "train_end")?,
            None => (train_start + self.train_days).saturating_sub(1),
        };
        let test_end = match self.test_end {
            Some(d) => locate(d, "test_end")?,
            None => dates.len().saturating_sub(1),
        };
        let purge = self.purge();
        let first_rebalance = train_end + purge + 1;
        if train_start > train_end || first_rebalance >= test_end || test_end >= dates.len() {
            return bad(format!(
                "empty schedule: train {train_start}..={train_end}, purge {purge}, first rebalance {first_rebalance}, test end {test_end} of {} dates",
                dates.len()
            ));
        }
        Ok(Schedule {
            train_start,
            train_end,
            purge_gap: purge,
            first_rebalance,
            test_end,
        })
    }
}

/// One trading decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Rebalance {
    pub date_index: usize,
    pub date: NaiveDate,
    /// Target weight for every panel security (0 outside the universe).
    pub weights: Vec<f64>,
    pub turnover: f64,
    /// Fraction of equity charged.
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub retrained: bool,
    /// Combiner weights in force, one per factor.
    pub combiner_weights: Vec<f64>,
    /// Set when the previous weights were held instead of the solution.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub annualized_return: f64,
    pub annualized_vol: f64,
    /// `None` when the period returns have zero dispersion.
    pub sharpe: Option<f64>,
    pub information_ratio: Option<f64>,
    /// `None` when there was no drawdown.
    pub calmar: Option<f64>,
    pub max_drawdown: f64,
    pub mean_turnover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub securities: Vec<String>,
    /// Dates of the equity curve, from the first rebalance to the test end.
    pub dates: Vec<NaiveDate>,
    pub equity: Vec<f64>,
    /// Net return of each day after the first (`equity[k]/equity[k−1] − 1`).
    pub period_returns: Vec<f64>,
    /// Gross weighted return of each day, before costs.
    pub gross_returns: Vec<f64>,
    /// Equal-weight market return of each day.
    pub benchmark_returns: Vec<f64>,
    pub rebalances: Vec<Rebalance>,
    pub factor_names: Vec<String>,
    pub metrics: PerformanceMetrics,
    pub schedule: Schedule,
}

impl BacktestResult {
    pub fn turnover_history(&self) -> Vec<f64> {
        self.rebalances.iter().map(|r| r.turnover).collect()
    }

    /// Weights held over each day of `period_returns`.
    pub fn held_weights(&self, k: usize) -> &[f64] {
        let date = self.schedule.first_rebalance + k;
        let r = self.rebalances.partition_point(|r| r.date_index <= date);
        &self.rebalances[r - 1].weights
    }
}

/// Performance statistics of an equity curve with `periods_per_year`
/// points per year and a zero risk-free rate.
pub fn compute_metrics(equity: &[f64], periods_per_year: usize) -> Result<PerformanceMetrics, BacktestError> {
    compute_metrics_rf(equity, periods_per_year, 0.0)
}

/// As [`compute_metrics`], with an annual risk-free rate removed from the
/// mean period return in the Sharpe ratio. The information ratio is taken
/// against a zero benchmark; see [`information_ratio`] for an explicit one.
pub fn compute_metrics_rf(equity: &[f64], periods_per_year: usize, risk_free: f64) -> Result<PerformanceMetrics, BacktestError> {
    if equity.len() < 2 {
        return Err(BacktestError::Config("need at least 2 equity points".into()));
    }
    if equity.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(BacktestError::Config("equity must be finite and positive".into()));
    }
    let p = periods_per_year as f64;
    let periods = (equity.len() - 1) as f64;
    let rets: Vec<f64> = equity.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let annualized_return = (equity[equity.len() - 1] / equity[0]).powf(p / periods) - 1.0;
    let (mean, sd) = mean_std(&rets);
    let sd = if sd.is_nan() { 0.0 } else { sd };
    // Rounding noise of a constant-return curve counts as zero dispersion.
    let flat = sd == 0.0 || sd <= 1e-12 * mean.abs();
    let sharpe = (!flat).then(|| (mean - risk_free / p) / sd * p.sqrt());
    let mut peak = equity[0];
    let mut max_drawdown: f64 = 0.0;
    for &e in equity {
        peak = peak.max(e);
        max_drawdown = max_drawdown.max(1.0 - e / peak);
    }
    Ok(PerformanceMetrics {
        annualized_return,
        annualized_vol: sd * p.sqrt(),
        sharpe,
        information_ratio: (!flat).then(|| mean / sd * p.sqrt()),
        calmar: (max_drawdown > 0.0).then(|| annualized_return / max_drawdown),
        max_drawdown,
        mean_turnover: None,
    })
}

/// Annualized mean active return over tracking error; `None` when the
/// active returns have zero dispersion.
pub fn information_ratio(returns: &[f64], benchmark: &[f64], periods_per_year: usize) -> Option<f64> {
    let active: Vec<f64> = returns.iter().zip(benchmark).map(|(r, b)| r - b).collect();
    let (mean, sd) = mean_std(&active);
    (sd.is_finite() && sd > 0.0 && sd > 1e-12 * mean.abs()).then(|| mean / sd * (periods_per_year as f64).sqrt())
}

/// Runs the walk-forward loop.
///
/// At each rebalance date `t` the combiner is refit when due on labels
/// realized by `t − purge_gap`, predictions `μ̂_t` and a trailing risk model
/// (scaled to the rebalance horizon) feed the optimizer, and the target
/// weights are held constant until the next rebalance. Securities without a
/// prediction at `t` are liquidated. Costs are charged against equity on
/// the first day after each trade.
pub fn run_backtest(panel: &PricePanel, factors: &[FactorPanel], cfg: &BacktestConfig) -> Result<BacktestResult, BacktestError> {
    let dim = (panel.n_dates(), panel.n_securities());
    if factors.is_empty() {
        return Err(BacktestError::Config("at least one factor is required".into()));
    }
    if factors.iter().any(|f| f.dim() != dim) {
        return Err(BacktestError::Config("factors are not aligned with the panel".into()));
    }
    let sched = cfg.schedule(&panel.dates)?;
    let n = dim.1;
    let h = cfg.combiner.target_horizon;
    let target = forward_returns(panel, h)?;
    let daily_fwd = forward_returns(panel, 1)?;
    let daily = daily_returns(panel);
    let risk_factors: Vec<FactorPanel> = match &cfg.risk.factors {
        None => factors.to_vec(),
        Some(names) => names
            .iter()
            .map(|name| {
                factors
                    .iter()
                    .find(|f| &f.name == name)
                    .cloned()
                    .ok_or_else(|| BacktestError::Config(format!("unknown risk factor `{name}`")))
            })
            .collect::<Result<_, _>>()?,
    };
    let fr = risk::factor_returns(&risk_factors, &daily_fwd)?;
    let risk_cfg = RiskConfig {
        factors: None,
        ..cfg.risk.clone()
    };

    let mut model: Option<CombinerModel> = None;
    let mut last_fit = 0usize;
    let mut rebalances: Vec<Rebalance> = Vec::new();
    let mut held = vec![0.0; n];
    let mut warm: Option<WarmStart> = None;
    let mut equity = vec![1.0];
    let mut period_returns = Vec::new();
    let mut gross_returns = Vec::new();
    let mut benchmark_returns = Vec::new();
    let mut pending_cost = 0.0;

    let mut t = sched.first_rebalance;
    let mut next_rebalance = t;
    while t <= sched.test_end {
        if t > sched.first_rebalance {
            // Accrue day t on the weights chosen at the last decision.
            let mut gross = 0.0;
            let mut bench = (0.0, 0usize);
            for i in 0..n {
                if let Some(r) = daily.returns.get(t, i) {
                    gross += held[i] * r;
                    bench.0 += r;
                    bench.1 += 1;
                }
            }
            let prev = *equity.last().expect("non-empty");
            let e = prev * (1.0 + gross) - pending_cost * prev;
            pending_cost = 0.0;
            if !(e > 0.0) || !e.is_finite() {
                return Err(BacktestError::Ruin {
                    date: panel.dates[t],
                    value: e,
                });
            }
            equity.push(e);
            period_returns.push(e / prev - 1.0);
            gross_returns.push(gross);
            benchmark_returns.push(if bench.1 > 0 { bench.0 / bench.1 as f64 } else { 0.0 });
        }
        if t == next_rebalance && t < sched.test_end {
            let retrain = model.is_none() || t - last_fit >= cfg.retrain_every;
            if retrain {
                // Labels at row s are realized at s + h; keep only those known by t.
                let end = (t - sched.purge_gap).min(t - h.min(t));
                let start = match cfg.rolling_window {
                    Some(w) => end.saturating_sub(w).max(sched.train_start),
                    None => sched.train_start,
                };
                model = Some(combiner::fit(factors, &target, start..end, cfg.combiner.ridge_lambda)?);
                last_fit = t;
            }
            let m = model.as_ref().expect("fitted above");
            let preds = m.predict(factors, t)?;
            let universe: Vec<usize> = (0..n).filter(|&i| panel.mask[[t, i]] && preds[i].is_some()).collect();
            let mut target_w = vec![0.0; n];
            let (status, iterations, flag) = if universe.is_empty() {
                (SolveStatus::Optimal, 0, Some("empty universe".to_string()))
            } else {
                let full = risk::estimate_at(&risk_factors, &fr, &daily_fwd, t, &panel.securities, &risk_cfg)?;
                let rm = full.subset(&universe).scaled(cfg.rebalance_every as f64);
                let mu: Vec<f64> = universe.iter().map(|&i| preds[i].expect("in universe")).collect();
                let prev: Vec<f64> = universe.iter().map(|&i| held[i]).collect();
                let sectors: Vec<u32> = universe.iter().map(|&i| panel.industry[i]).collect();
                let problem = cfg.optimizer.problem(mu, rm, prev, sectors);
                let ws = match cfg.warm_start {
                    WarmStartPolicy::Previous => warm.as_ref(),
                    WarmStartPolicy::None => None,
                };
                let sol = optimizer::solve(&problem, ws, &cfg.optimizer.solver)?;
                if sol.status == SolveStatus::Optimal {
                    for (k, &i) in universe.iter().enumerate() {
                        target_w[i] = sol.weights[k];
                    }
                    warm = Some(WarmStart::from(&sol));
                    (sol.status, sol.iterations, None)
                } else {
                    for &i in &universe {
                        target_w[i] = held[i];
                    }
                    let msg = format!("{:?}: holding previous weights", sol.status);
                    log::warn!("{} on {}", msg, panel.dates[t]);
                    (sol.status, sol.iterations, Some(msg))
                }
            };
            let turnover: f64 = (0..n).map(|i| (target_w[i] - held[i]).abs()).sum();
            pending_cost = cfg.cost_rate * turnover;
            rebalances.push(Rebalance {
                date_index: t,
                date: panel.dates[t],
                weights: target_w.clone(),
                turnover,
                cost: pending_cost,
                status,
                iterations,
                retrained: retrain,
                combiner_weights: m.weights.clone(),
                flag,
            });
            held = target_w;
            next_rebalance = t + cfg.rebalance_every;
        }
        t += 1;
    }
    let mut metrics = compute_metrics_rf(&equity, cfg.periods_per_year, cfg.risk_free_rate)?;
    metrics.information_ratio = information_ratio(&period_returns, &benchmark_returns, cfg.periods_per_year);
    let turns: Vec<f64> = rebalances.iter().map(|r| r.turnover).collect();
    metrics.mean_turnover = (!turns.is_empty()).then(|| turns.iter().sum::<f64>() / turns.len() as f64);
    Ok(BacktestResult {
        securities: panel.securities.clone(),
        dates: panel.dates[sched.first_rebalance..=sched.test_end].to_vec(),
        equity,
        period_returns,
        gross_returns,
        benchmark_returns,
        rebalances,
        factor_names: factors.iter().map(|f| f.name.clone()).collect(),
        metrics,
        schedule: sched,
    })
}

/// Decomposition of the summed gross daily returns of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// `(factor, contribution)` for every factor the combiner ever weighted.
    pub factors: Vec<(String, f64)>,
    pub residual: f64,
    pub costs: f64,
    /// Sum of gross daily returns; equals the factor sum plus the residual.
    pub total: f64,
}

impl Attribution {
    pub fn systematic(&self) -> f64 {
        self.factors.iter().map(|(_, c)| c).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BacktestError> {
        let w = csv::Writer::from_writer(out);
        let row = |w: &mut csv::Writer<W>, name: &str, v: f64| w.write_record([name.to_string(), v.to_string()]);
        let run = || -> Result<(), csv::Error> {
            let mut w = w;
            w.write_record(["component", "contribution"])?;
            for (name, c) in &self.factors {
                row(&mut w, name, *c)?;
            }
            row(&mut w, "(residual)", self.residual)?;
            row(&mut w, "(costs)", -self.costs)?;
            row(&mut w, "(total_gross)", self.total)?;
            w.flush()?;
            Ok(())
        };
        run().map_err(|e| BacktestError::Io(std::io::Error::other(e.to_string())))
    }
}

/// Splits each day's gross return `Σ_i w_i r_i` into `Σ_k X_k f_k`, where
/// `X_k` is the book's exposure to the standardized factor and `f_k` its
/// cross-sectional regression return that day, plus a residual.
pub fn attribution_report(result: &BacktestResult, panel: &PricePanel, factors: &[FactorPanel]) -> Result<Attribution, BacktestError> {
    let used: Vec<usize> = (0..factors.len())
        .filter(|&j| result.rebalances.iter().any(|r| r.combiner_weights.get(j).is_some_and(|w| *w != 0.0)))
        .collect();
    let chosen: Vec<FactorPanel> = used.iter().map(|&j| factors[j].clone()).collect();
    let daily_fwd = forward_returns(panel, 1)?;
    let fr = risk::factor_returns(&chosen, &daily_fwd)?;
    let n = panel.n_securities();
    let mut contrib = vec![0.0; chosen.len()];
    let mut total = 0.0;
    for (k, gross) in result.gross_returns.iter().enumerate() {
        total += gross;
        // Day k+1 of the curve is the return from s to s + 1.
        let s = result.schedule.first_rebalance + k;
        if fr.intercept[s].is_nan() || chosen.is_empty() {
            continue;
        }
        let w = result.held_weights(k);
        let include: Vec<bool> = (0..n).map(|i| fr.fitted.mask[[s, i]]).collect();
        let z = risk::zscores(&chosen, s, &include);
        for j in 0..chosen.len() {
            let exposure: f64 = (0..n).filter(|&i| include[i]).map(|i| w[i] * z[[i, j]]).sum();
            contrib[j] += exposure * fr.returns[[s, j]];
        }
    }
    let systematic: f64 = contrib.iter().sum();
    Ok(Attribution {
        factors: chosen.iter().map(|f| f.name.clone()).zip(contrib).collect(),
        residual: total - systematic,
        costs: result.rebalances.iter().map(|r| r.cost).sum(),
        total,
    })
}

/// What is needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the configuration text, hex encoded.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        let digest = Sha256::digest(config_text.as_bytes());
        Self {
            command: command.to_string(),
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
            version: crate::VERSION.to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "command = {}", self.command)?;
        writeln!(f, "config_sha256 = {}", self.config_hash)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "version = {}", self.version)?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl PerformanceMetrics {
    /// `name,value` rows; undefined ratios are written as `undefined`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BacktestError> {
        let mut w = csv::Writer::from_writer(out);
        let rows = [
            ("annualized_return", self.annualized_return.to_string()),
            ("annualized_vol", self.annualized_vol.to_string()),
            ("sharpe", fmt_opt(self.sharpe)),
            ("information_ratio", fmt_opt(self.information_ratio)),
            ("calmar", fmt_opt(self.calmar)),
            ("max_drawdown", self.max_drawdown.to_string()),
            ("mean_turnover", fmt_opt(self.mean_turnover)),
        ];
        let io = |e: csv::Error| BacktestError::Io(std::io::Error::other(e.to_string()));
        w.write_record(["name", "value"]).map_err(io)?;
        for (k, v) in rows {
            w.write_record([k, v.as_str()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `equity.csv`, `weights.csv`, `metrics.csv`, `attribution.csv`
/// and `manifest.txt` into `dir`.
pub fn write_bundle(
    dir: &Path,
    result: &BacktestResult,
    attribution: &Attribution,
    manifest: &RunManifest,
) -> Result<(), BacktestError> {
    std::fs::create_dir_all(dir)?;
    let io = |e: csv::Error| BacktestError::Io(std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(dir.join("equity.csv")).map_err(io)?;
    w.write_record(["date", "value"]).map_err(io)?;
    for (d, e) in result.dates.iter().zip(&result.equity) {
        w.write_record([d.to_string(), e.to_string()]).map_err(io)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("weights.csv")).map_err(io)?;
    w.write_record(["date", "security_id", "weight"]).map_err(io)?;
    for r in &result.rebalances {
        for (id, x) in result.securities.iter().zip(&r.weights) {
            if *x != 0.0 {
                w.write_record([r.date.to_string(), id.clone(), x.to_string()]).map_err(io)?;
            }
        }
    }
    w.flush()?;
    result.metrics.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
    attribution.write_csv(std::fs::File::create(dir.join("attribution.csv"))?)?;
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_market, MarketConfig, PlantedSignalSpec};

    #[test]
    fn drawdown_example() {
        let m = compute_metrics(&[1.0, 1.2, 0.9, 1.1], 252).unwrap();
        assert!((m.max_drawdown - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_growth_has_no_sharpe() {
        let equity: Vec<f64> = (0..=12).map(|k| 1.01f64.powi(k)).collect();
        let m = compute_metrics(&equity, 12).unwrap();
        assert!((m.annualized_return - (1.01f64.powi(12) - 1.0)).abs() < 1e-12);
        assert!(m.sharpe.is_none());
        assert!(m.calmar.is_none());
        assert_eq!(m.max_drawdown, 0.0);
    }

    #[test]
    fn doubling_over_a_year_is_one_hundred_percent() {
        let equity: Vec<f64> = (0..=252).map(|k| 2f64.powf(k as f64 / 252.0)).collect();
        let m = compute_metrics(&equity, 252).unwrap();
        assert!((m.annualized_return - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_reject_short_or_negative_curves() {
        assert!(compute_metrics(&[1.0], 252).is_err());
        assert!(compute_metrics(&[1.0, -0.5], 252).is_err());
    }

    fn small_run(cost_rate: f64) -> (PricePanel, Vec<FactorPanel>, BacktestResult) {
        let mc = MarketConfig {
            n_securities: 40,
            n_days: 420,
            ..MarketConfig::default()
        };
        let (panel, f) = generate_market(&mc, &PlantedSignalSpec { strength: 0.3, horizon: 20, seed: 4 }, 4).unwrap();
        let cfg = BacktestConfig {
            train_days: 200,
            cost_rate,
            optimizer: PortfolioConfig {
                w_max: 0.1,
                ..PortfolioConfig::default()
            },
            ..BacktestConfig::default()
        };
        let factors = vec![f];
        let r = run_backtest(&panel, &factors, &cfg).unwrap();
        (panel, factors, r)
    }

    #[test]
    fn accounting_identity_and_neutral_book() {
        let (_, _, r) = small_run(0.0015);
        assert!(r.rebalances.len() >= 8);
        for k in 0..r.period_returns.len() {
            let date = r.schedule.first_rebalance + k;
            let w = r.held_weights(k);
            assert!(w.iter().sum::<f64>().abs() <= 1e-8);
            let cost = r.rebalances.iter().find(|x| x.date_index == date).map_or(0.0, |x| x.cost);
            let expected = r.equity[k] * (1.0 + r.gross_returns[k]) - cost * r.equity[k];
            assert!((r.equity[k + 1] - expected).abs() <= 1e-12);
        }
        assert!(r.equity.iter().all(|e| *e > 0.0));
        let again = compute_metrics(&r.equity, 252).unwrap();
        assert_eq!(again.annualized_return, r.metrics.annualized_return);
        assert_eq!(again.sharpe, r.metrics.sharpe);
    }

    #[test]
    fn doubling_costs_lowers_return_only() {
        let (_, _, a) = small_run(0.0015);
        let (_, _, b) = small_run(0.003);
        assert_eq!(a.turnover_history(), b.turnover_history());
        assert!(b.equity.last().unwrap() < a.equity.last().unwrap());
    }

    #[test]
    fn attribution_adds_up() {
        let (panel, factors, r) = small_run(0.0015);
        let a = attribution_report(&r, &panel, &factors).unwrap();
        assert_eq!(a.factors.len(), 1);
        assert!((a.systematic() + a.residual - a.total).abs() <= 1e-12);
        assert!((a.total - r.gross_returns.iter().sum::<f64>()).abs() <= 1e-12);
        assert!(a.costs > 0.0);
    }

    #[test]
    fn bundle_files_are_written() {
        let (panel, factors, r) = small_run(0.0);
        let a = attribution_report(&r, &panel, &factors).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &r, &a, &RunManifest::new("backtest", "x = 1", 7)).unwrap();
        for f in ["equity.csv", "weights.csv", "metrics.csv", "attribution.csv", "manifest.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("seed = 7"));
    }

    #[test]
    fn schedule_rejects_overlap() {
        let dates = crate::synth::business_days(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 100);
        let cfg = BacktestConfig {
            train_days: 90,
            ..BacktestConfig::default()
        };
        assert!(matches!(cfg.schedule(&dates), Err(BacktestError::Config(_))));
        let cfg = BacktestConfig {
            train_days: 50,
            ..BacktestConfig::default()
        };
        let s = cfg.schedule(&dates).unwrap();
        assert_eq!(s.first_rebalance, 50 + 20);
        assert_eq!(s.test_end, 99);
    }
}
