//! Synthetic markets: geometric Brownian motion paths, maximum-likelihood
//! calibration, and cross-sections with a planted alpha signal of known
//! strength.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::FactorPanel;
use crate::matrix::{mean_std, MaskedMatrix};
use crate::panel::{forward_returns, PanelError, PricePanel};
use crate::rng::{SeededStream, STREAM_AUX, STREAM_SECURITY, STREAM_SIGNAL_NOISE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("price path must hold at least 3 strictly positive prices: {0}")]
    Domain(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Drift and volatility are annualized; `dt` is in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
    pub s0: f64,
}

impl GbmParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma >= 0.0 && self.dt > 0.0 && self.s0 > 0.0 && self.mu.is_finite()) {
            return Err(SynthError::Config(format!("invalid GBM parameters {self:?}")));
        }
        Ok(())
    }
}

/// Simulates `steps` log-normal increments starting from `params.s0`.
///
/// `S[t+1] = S[t] · exp((μ − σ²/2)Δt + σ√Δt · Z)`; the returned path has
/// `steps + 1` prices and is a pure function of `(params, steps, seed)`.
pub fn simulate_gbm(params: &GbmParams, steps: usize, seed: u64) -> Vec<f64> {
    let mut stream = SeededStream::new(seed, STREAM_AUX, 0);
    simulate_gbm_with(params, steps, &mut stream)
}

pub(crate) fn simulate_gbm_with(params: &GbmParams, steps: usize, stream: &mut SeededStream) -> Vec<f64> {
    let drift = (params.mu - 0.5 * params.sigma * params.sigma) * params.dt;
    let vol = params.sigma * params.dt.sqrt();
    let mut path = Vec::with_capacity(steps + 1);
    let mut s = params.s0;
    path.push(s);
    for _ in 0..steps {
        s *= (drift + vol * stream.standard_normal()).exp();
        path.push(s);
    }
    path
}

/// Maximum-likelihood GBM calibration from a price path.
///
/// With `m` the mean and `v` the sample variance (`n − 1` denominator) of the
/// log returns: `σ̂² = v/Δt` and `μ̂ = m/Δt + σ̂²/2`.
pub fn estimate_gbm(path: &[f64], dt: f64) -> Result<GbmParams, SynthError> {
    if path.len() < 3 {
        return Err(SynthError::Domain(format!("got {} prices", path.len())));
    }
    if let Some(p) = path.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(SynthError::Domain(format!("non-positive price {p}")));
    }
    if !(dt > 0.0) {
        return Err(SynthError::Config(format!("dt must be positive, got {dt}")));
    }
    let logs: Vec<f64> = path.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let (m, sd) = mean_std(&logs);
    let sigma2 = sd * sd / dt;
    Ok(GbmParams {
        mu: m / dt + 0.5 * sigma2,
        sigma: sigma2.sqrt(),
        dt,
        s0: path[0],
    })
}

/// Closed interval `[low, high]` from which a per-security parameter is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub low: f64,
    pub high: f64,
}

impl ParamRange {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn check(&self, name: &str) -> Result<(), SynthError> {
        if !(self.low <= self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(SynthError::Config(format!(
                "degenerate range for {name}: low {} > high {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Strength is the target cross-sectional correlation with forward returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSignalSpec {
    pub strength: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for PlantedSignalSpec {
    fn default() -> Self {
        Self {
            strength: 0.3,
            horizon: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub n_securities: usize,
    pub n_days: usize,
    pub mu: ParamRange,
    pub sigma: ParamRange,
    pub s0: ParamRange,
    /// Step in years.
    pub dt: f64,
    pub n_industries: usize,
    /// Log10 range of shares outstanding.
    pub log10_shares: ParamRange,
    /// Log10 range of the average daily volume.
    pub log10_volume: ParamRange,
    pub start_date: NaiveDate,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            n_securities: 200,
            n_days: 2000,
            mu: ParamRange::new(0.05, 0.05),
            sigma: ParamRange::new(0.15, 0.45),
            s0: ParamRange::new(10.0, 100.0),
            dt: 1.0 / 252.0,
            n_industries: 5,
            log10_shares: ParamRange::new(7.0, 9.0),
            log10_volume: ParamRange::new(5.0, 7.0),
            start_date: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
        }
    }
}

/// `n` consecutive weekdays starting at `start` (rolled forward off weekends).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

struct SecurityPath {
    open: Vec<f64>,
    high: Vec<f64>,
    low: Vec<f64>,
    close: Vec<f64>,
    volume: Vec<f64>,
    market_cap: Vec<f64>,
}

fn simulate_security(cfg: &MarketConfig, seed: u64, index: usize) -> SecurityPath {
    let mut stream = SeededStream::new(seed, STREAM_SECURITY, index as u64);
    let params = GbmParams {
        mu: stream.uniform(cfg.mu.low, cfg.mu.high),
        sigma: stream.uniform(cfg.sigma.low, cfg.sigma.high),
        dt: cfg.dt,
        s0: stream.uniform(cfg.s0.low, cfg.s0.high),
    };
    let shares = 10f64.powf(stream.uniform(cfg.log10_shares.low, cfg.log10_shares.high));
    let base_volume = 10f64.powf(stream.uniform(cfg.log10_volume.low, cfg.log10_volume.high));
    let close = simulate_gbm_with(&params, cfg.n_days - 1, &mut stream);
    let mut p = SecurityPath {
        open: Vec::with_capacity(cfg.n_days),
        high: Vec::with_capacity(cfg.n_days),
        low: Vec::with_capacity(cfg.n_days),
        volume: Vec::with_capacity(cfg.n_days),
        market_cap: close.iter().map(|c| c * shares).collect(),
        close,
    };
    for t in 0..cfg.n_days {
        let open = if t == 0 { p.close[0] } else { p.close[t - 1] };
        let c = p.close[t];
        let wick_up = 0.005 * stream.standard_normal().abs();
        let wick_down = 0.005 * stream.standard_normal().abs();
        p.open.push(open);
        p.high.push(open.max(c) * (1.0 + wick_up));
        p.low.push(open.min(c) * (1.0 - wick_down));
        p.volume.push(base_volume * (0.5 * stream.standard_normal() - 0.125).exp());
    }
    p
}

/// Simulates an independent-GBM cross-section and a planted factor.
///
/// Each security draws `(μ, σ, s0)` uniformly from the configured ranges on
/// its own random stream. The planted factor at date `t` is
/// `strength · z_t + √(1 − strength²) · ε`, where `z_t` is the cross-sectional
/// z-score of the realized `horizon`-day forward return and `ε` is iid
/// standard normal; dates without a complete forward window are masked.
/// Industries are assigned round-robin.
pub fn generate_market(
    cfg: &MarketConfig,
    signal: &PlantedSignalSpec,
    seed: u64,
) -> Result<(PricePanel, FactorPanel), SynthError> {
    if cfg.n_securities < 2 {
        return Err(SynthError::Config("need at least 2 securities".into()));
    }
    if cfg.n_days <= signal.horizon || signal.horizon == 0 {
        return Err(SynthError::Config(format!(
            "n_days {} must exceed the signal horizon {} (≥ 1)",
            cfg.n_days, signal.horizon
        )));
    }
    if !(0.0..=1.0).contains(&signal.strength) {
        return Err(SynthError::Config(format!("signal strength {} outside [0, 1]", signal.strength)));
    }
    if cfg.n_industries == 0 {
        return Err(SynthError::Config("n_industries must be ≥ 1".into()));
    }
    cfg.mu.check("mu")?;
    cfg.sigma.check("sigma")?;
    cfg.s0.check("s0")?;
    cfg.log10_shares.check("log10_shares")?;
    cfg.log10_volume.check("log10_volume")?;
    if cfg.sigma.low < 0.0 || cfg.s0.low <= 0.0 || !(cfg.dt > 0.0) {
        return Err(SynthError::Config("sigma must be ≥ 0, s0 and dt > 0".into()));
    }

    let paths: Vec<SecurityPath> = (0..cfg.n_securities)
        .into_par_iter()
        .map(|i| simulate_security(cfg, seed, i))
        .collect();
    let (t_len, n) = (cfg.n_days, cfg.n_securities);
    let gather = |f: &dyn Fn(&SecurityPath) -> &Vec<f64>| {
        Array2::from_shape_fn((t_len, n), |(t, i)| f(&paths[i])[t])
    };
    let width = (n as f64).log10().floor() as usize + 1;
    let panel = PricePanel {
        dates: business_days(cfg.start_date, t_len),
        securities: (0..n).map(|i| format!("S{i:0width$}")).collect(),
        open: gather(&|p| &p.open),
        high: gather(&|p| &p.high),
        low: gather(&|p| &p.low),
        close: gather(&|p| &p.close),
        volume: gather(&|p| &p.volume),
        market_cap: gather(&|p| &p.market_cap),
        industry: (0..n).map(|i| (i % cfg.n_industries) as u32).collect(),
        mask: Array2::from_elem((t_len, n), true),
    };
    panel.validate()?;
    let factor = planted_factor(&panel, signal)?;
    Ok((panel, factor))
}

/// Builds the planted factor for an existing panel.
pub fn planted_factor(panel: &PricePanel, signal: &PlantedSignalSpec) -> Result<FactorPanel, SynthError> {
    let fwd = forward_returns(panel, signal.horizon)?;
    let (t_len, n) = (panel.n_dates(), panel.n_securities());
    let noise_scale = (1.0 - signal.strength * signal.strength).max(0.0).sqrt();
    // Noise is drawn for every cell in a fixed order so it does not depend on the mask.
    let noise: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = SeededStream::new(signal.seed, STREAM_SIGNAL_NOISE, i as u64);
            (0..t_len).map(|_| s.standard_normal()).collect()
        })
        .collect();
    let mut values = Array2::from_elem((t_len, n), f64::NAN);
    let mut mask = Array2::from_elem((t_len, n), false);
    for t in 0..t_len {
        let row = fwd.returns.valid_in_row(t);
        if row.len() < 2 {
            continue;
        }
        let rs: Vec<f64> = row.iter().map(|(_, r)| *r).collect();
        let (m, sd) = mean_std(&rs);
        for (i, r) in &row {
            let z = if sd > 0.0 { (r - m) / sd } else { 0.0 };
            values[[t, *i]] = signal.strength * z + noise_scale * noise[*i][t];
            mask[[t, *i]] = true;
        }
    }
    Ok(FactorPanel::new(
        format!("planted_{:.2}", signal.strength),
        MaskedMatrix::new(values, mask),
        vec![format!(
            "planted(strength={}, horizon={}, seed={})",
            signal.strength, signal.horizon, signal.seed
        )],
    ))
}

/// Adds systematic contamination to a factor: a per-date, per-industry offset
/// with standard deviation `industry_scale`, and `size_scale` times the
/// cross-sectionally standardized log market cap.
pub fn confound(
    factor: &FactorPanel,
    panel: &PricePanel,
    industry_scale: f64,
    size_scale: f64,
    seed: u64,
) -> FactorPanel {
    let (t_len, n) = factor.values.dim();
    let j = panel.n_industries();
    let mut stream = SeededStream::new(seed, STREAM_AUX, 1);
    let offsets: Vec<Vec<f64>> = (0..t_len)
        .map(|_| (0..j).map(|_| industry_scale * stream.standard_normal()).collect())
        .collect();
    let mut values = factor.values.values.clone();
    for t in 0..t_len {
        let logs: Vec<f64> = (0..n)
            .filter(|&i| panel.mask[[t, i]])
            .map(|i| panel.market_cap[[t, i]].ln())
            .collect();
        let (m, sd) = mean_std(&logs);
        for i in 0..n {
            if !factor.values.mask[[t, i]] {
                continue;
            }
            let size = if sd > 0.0 && panel.mask[[t, i]] {
                (panel.market_cap[[t, i]].ln() - m) / sd
            } else {
                0.0
            };
            values[[t, i]] += offsets[t][panel.industry[i] as usize] + size_scale * size;
        }
    }
    let mut lineage = factor.lineage.clone();
    lineage.push(format!("confound(industry={industry_scale}, size={size_scale}, seed={seed})"));
    FactorPanel::new(
        format!("{}_confounded", factor.name),
        MaskedMatrix::new(values, factor.values.mask.clone()),
        lineage,
    )
}

/// Jarque–Bera statistic of a sample.
pub fn jarque_bera(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    n / 6.0 * (skew * skew + 0.25 * (kurt - 3.0).powi(2))
}
