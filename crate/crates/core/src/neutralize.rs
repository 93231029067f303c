//! Removing industry, size and dominant common components from factors.
//!
//! Every per-date stage outputs `f − α_t · fitted`, so `α_t = 1` is the plain
//! regression residual and `α_t = 0` leaves the factor untouched.

use std::io::Write;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::FactorPanel;
use crate::linalg::lstsq;
use crate::matrix::{mean_std, MaskedMatrix};
use crate::panel::PricePanel;

pub const HUBER_C: f64 = 1.345;

#[derive(Debug, Error)]
pub enum NeutralizeError {
    #[error("invalid neutralization config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Industry,
    Size,
    /// Single regression on industry dummies plus the size terms.
    IndustrySize,
    Pca,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Industry => "industry",
            Stage::Size => "size",
            Stage::IndustrySize => "industry_size",
            Stage::Pca => "pca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    LeastSquares,
    /// Huber M-estimation by iteratively reweighted least squares.
    Huber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeutralizationConfig {
    pub alpha0: f64,
    pub beta_vol: f64,
    pub vol_window_short: usize,
    pub vol_window_long: usize,
    pub stages: Vec<Stage>,
    pub pca_k: usize,
    pub estimator: Estimator,
}

impl Default for NeutralizationConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            beta_vol: 0.0,
            vol_window_short: 20,
            vol_window_long: 250,
            stages: vec![Stage::Industry, Stage::Size],
            pca_k: 0,
            estimator: Estimator::LeastSquares,
        }
    }
}

impl NeutralizationConfig {
    pub fn validate(&self) -> Result<(), NeutralizeError> {
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(NeutralizeError::Config(format!("alpha0 {} outside [0, 1]", self.alpha0)));
        }
        if !self.beta_vol.is_finite() {
            return Err(NeutralizeError::Config("beta_vol must be finite".into()));
        }
        if self.vol_window_short < 2 || self.vol_window_short >= self.vol_window_long {
            return Err(NeutralizeError::Config(format!(
                "need 2 ≤ vol_window_short < vol_window_long, got {} and {}",
                self.vol_window_short, self.vol_window_long
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrengthFlag {
    InsufficientHistory,
    ZeroLongVol,
    /// Raw strength fell outside `[0, 1]` and was clamped.
    Clamped,
}

/// Per-date neutralization strength.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthPath {
    pub alpha: Vec<f64>,
    pub flags: Vec<Option<StrengthFlag>>,
}

impl StrengthPath {
    pub fn constant(alpha: f64, n_dates: usize) -> Self {
        Self {
            alpha: vec![alpha; n_dates],
            flags: vec![None; n_dates],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefRecord {
    pub date: usize,
    pub stage: Stage,
    pub name: String,
    pub value: f64,
}

/// Coefficients, strengths and diagnostics of one factor's neutralization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeutralizationReport {
    pub records: Vec<CoefRecord>,
    /// `(date, stage)` pairs where a stage left the factor untouched.
    pub skipped: Vec<(usize, Stage)>,
}

impl NeutralizationReport {
    fn extend(&mut self, other: NeutralizationReport) {
        self.records.extend(other.records);
        self.skipped.extend(other.skipped);
    }

    pub fn coefficient(&self, date: usize, stage: Stage, name: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.date == date && r.stage == stage && r.name == name)
            .map(|r| r.value)
    }

    /// Writes `date,stage,coef_name,value` rows.
    pub fn write_csv<W: Write>(&self, out: W, dates: &[NaiveDate]) -> Result<(), NeutralizeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "stage", "coef_name", "value"]).map_err(csv_io)?;
        for r in &self.records {
            w.write_record([
                dates[r.date].to_string(),
                r.stage.name().to_string(),
                r.name.clone(),
                format!("{}", r.value),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> NeutralizeError {
    NeutralizeError::Io(std::io::Error::other(e))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn fit(x: &DMatrix<f64>, y: &DVector<f64>, estimator: Estimator) -> DVector<f64> {
    let mut b = lstsq(x, y);
    if estimator == Estimator::LeastSquares {
        return b;
    }
    for _ in 0..100 {
        let r = y - x * &b;
        let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
        let mut scale = median(&mut abs) / 0.6745;
        if scale == 0.0 {
            // More than half the residuals are exact zeros.
            scale = abs.iter().sum::<f64>() / abs.len() as f64 * (std::f64::consts::PI / 2.0).sqrt();
        }
        if scale <= f64::EPSILON * y.amax().max(1.0) {
            break;
        }
        let w: Vec<f64> = r
            .iter()
            .map(|&ri| {
                let u = ri.abs() / scale;
                if u <= HUBER_C {
                    1.0
                } else {
                    HUBER_C / u
                }
            })
            .collect();
        let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i].sqrt());
        let yw = DVector::from_fn(y.len(), |i, _| y[i] * w[i].sqrt());
        let next = lstsq(&xw, &yw);
        let change = (&next - &b).amax();
        b = next;
        if change <= 1e-12 * b.amax().max(1.0) {
            break;
        }
    }
    b
}

struct DateFit {
    /// `(column, fitted value)` for each security used in the regression.
    fitted: Vec<(usize, f64)>,
    records: Vec<(String, f64)>,
    skipped: bool,
}

fn log_mcap(panel: &PricePanel, t: usize, i: usize) -> Option<f64> {
    let m = panel.market_cap[[t, i]];
    (panel.mask[[t, i]] && m.is_finite() && m > 0.0).then(|| m.ln())
}

fn industry_fit(valid: &[(usize, f64)], panel: &PricePanel, estimator: Estimator) -> DateFit {
    let mut codes: Vec<u32> = valid.iter().map(|&(i, _)| panel.industry[i]).collect();
    codes.sort_unstable();
    codes.dedup();
    if valid.is_empty() {
        return DateFit {
            fitted: Vec::new(),
            records: Vec::new(),
            skipped: true,
        };
    }
    let col = |i: usize| codes.binary_search(&panel.industry[i]).unwrap();
    let x = DMatrix::from_fn(valid.len(), codes.len(), |r, j| if col(valid[r].0) == j { 1.0 } else { 0.0 });
    let y = DVector::from_iterator(valid.len(), valid.iter().map(|v| v.1));
    let b = match estimator {
        Estimator::LeastSquares => {
            // Dummy regression is the per-industry mean.
            let mut sums = vec![0.0; codes.len()];
            let mut counts = vec![0usize; codes.len()];
            for &(i, v) in valid {
                sums[col(i)] += v;
                counts[col(i)] += 1;
            }
            DVector::from_iterator(codes.len(), sums.iter().zip(&counts).map(|(s, &c)| s / c as f64))
        }
        Estimator::Huber => fit(&x, &y, estimator),
    };
    let fitted = valid.iter().map(|&(i, _)| (i, b[col(i)])).collect();
    let records = codes
        .iter()
        .enumerate()
        .map(|(j, c)| (format!("beta_industry_{c}"), b[j]))
        .collect();
    DateFit {
        fitted,
        records,
        skipped: false,
    }
}

/// Regression on `[dummies | 1] + x̃ + x̃²` with `x̃` the standardized log cap.
fn size_fit(valid: &[(usize, f64)], panel: &PricePanel, t: usize, with_industry: bool, estimator: Estimator) -> DateFit {
    let obs: Vec<(usize, f64, f64)> = valid
        .iter()
        .filter_map(|&(i, v)| log_mcap(panel, t, i).map(|x| (i, v, x)))
        .collect();
    if obs.len() < 4 {
        return DateFit {
            fitted: Vec::new(),
            records: Vec::new(),
            skipped: true,
        };
    }
    let logs: Vec<f64> = obs.iter().map(|o| o.2).collect();
    let m = logs.iter().sum::<f64>() / logs.len() as f64;
    let s = (logs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
    let s = if s > 1e-12 * m.abs().max(1.0) { s } else { 0.0 };
    let z = |x: f64| if s > 0.0 { (x - m) / s } else { 0.0 };

    let mut codes: Vec<u32> = if with_industry {
        obs.iter().map(|o| panel.industry[o.0]).collect()
    } else {
        vec![0]
    };
    codes.sort_unstable();
    codes.dedup();
    let level_col = |i: usize| {
        if with_industry {
            codes.binary_search(&panel.industry[i]).unwrap()
        } else {
            0
        }
    };
    let k = codes.len();
    let x = DMatrix::from_fn(obs.len(), k + 2, |r, j| {
        let (i, _, lx) = obs[r];
        if j < k {
            if level_col(i) == j {
                1.0
            } else {
                0.0
            }
        } else if j == k {
            z(lx)
        } else {
            z(lx).powi(2)
        }
    });
    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.1));
    let b = fit(&x, &y, estimator);
    let f = &x * &b;
    let fitted = obs.iter().enumerate().map(|(r, o)| (o.0, f[r])).collect();

    // Back to log-cap units: b1·x̃ + b2·x̃² = γ·x + δ·x² + const.
    let (b1, b2) = (b[k], b[k + 1]);
    let (gamma, delta, shift) = if s > 0.0 {
        (b1 / s - 2.0 * b2 * m / (s * s), b2 / (s * s), -b1 * m / s + b2 * m * m / (s * s))
    } else {
        (0.0, 0.0, 0.0)
    };
    let mut records = vec![("gamma".to_string(), gamma), ("delta".to_string(), delta)];
    for (j, c) in codes.iter().enumerate() {
        let name = if with_industry {
            format!("beta_industry_{c}")
        } else {
            "intercept".to_string()
        };
        records.push((name, b[j] + shift));
    }
    DateFit {
        fitted,
        records,
        skipped: false,
    }
}

fn max_abs_industry_mean(row: &[(usize, f64)], panel: &PricePanel) -> f64 {
    let mut acc: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
    for &(i, v) in row {
        let e = acc.entry(panel.industry[i]).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.values().map(|(s, c)| (s / *c as f64).abs()).fold(0.0, f64::max)
}

fn apply_stage(
    f: &FactorPanel,
    panel: &PricePanel,
    strength: &StrengthPath,
    stage: Stage,
    estimator: Estimator,
) -> Result<(FactorPanel, NeutralizationReport), NeutralizeError> {
    let (t_len, n) = f.dim();
    if (t_len, n) != (panel.n_dates(), panel.n_securities()) {
        return Err(NeutralizeError::Shape(format!(
            "factor is {t_len}×{n}, panel is {}×{}",
            panel.n_dates(),
            panel.n_securities()
        )));
    }
    if strength.alpha.len() != t_len {
        return Err(NeutralizeError::Shape(format!(
            "{} strengths for {t_len} dates",
            strength.alpha.len()
        )));
    }
    let per_date: Vec<(Vec<(usize, f64)>, NeutralizationReport)> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let valid = f.values.valid_in_row(t);
            let alpha = strength.alpha[t];
            let fit = match stage {
                Stage::Industry => industry_fit(&valid, panel, estimator),
                Stage::Size => size_fit(&valid, panel, t, false, estimator),
                Stage::IndustrySize => size_fit(&valid, panel, t, true, estimator),
                Stage::Pca => unreachable!("pca is not a per-date stage"),
            };
            let mut report = NeutralizationReport::default();
            if fit.skipped {
                report.skipped.push((t, stage));
                report.records.push(CoefRecord {
                    date: t,
                    stage,
                    name: "skipped".into(),
                    value: 1.0,
                });
                return (valid, report);
            }
            let mut out = valid;
            let fitted: std::collections::HashMap<usize, f64> = fit.fitted.into_iter().collect();
            for (i, v) in out.iter_mut() {
                match fitted.get(i) {
                    Some(fv) => *v -= alpha * fv,
                    // Securities the regression could not use (no market cap).
                    None => *v = f64::NAN,
                }
            }
            out.retain(|(_, v)| v.is_finite());
            for (name, value) in fit.records {
                report.records.push(CoefRecord { date: t, stage, name, value });
            }
            report.records.push(CoefRecord {
                date: t,
                stage,
                name: "alpha".into(),
                value: alpha,
            });
            if matches!(stage, Stage::Industry | Stage::IndustrySize) {
                report.records.push(CoefRecord {
                    date: t,
                    stage,
                    name: "max_abs_industry_mean".into(),
                    value: max_abs_industry_mean(&out, panel),
                });
            }
            (out, report)
        })
        .collect();
    let mut values = Array2::from_elem((t_len, n), f64::NAN);
    let mut mask = Array2::from_elem((t_len, n), false);
    let mut report = NeutralizationReport::default();
    for (t, (row, rep)) in per_date.into_iter().enumerate() {
        for (i, v) in row {
            values[[t, i]] = v;
            mask[[t, i]] = true;
        }
        report.extend(rep);
    }
    let out = f.derived(f.name.clone(), MaskedMatrix::new(values, mask), format!("neutralize_{}", stage.name()));
    Ok((out, report))
}

/// Subtracts `α_t` times the per-date industry fit.
pub fn industry_neutralize(
    f: &FactorPanel,
    panel: &PricePanel,
    strength: &StrengthPath,
    estimator: Estimator,
) -> Result<(FactorPanel, NeutralizationReport), NeutralizeError> {
    apply_stage(f, panel, strength, Stage::Industry, estimator)
}

/// Subtracts `α_t` times the per-date fit on `[1, log cap, log² cap]`.
///
/// Dates with fewer than 4 usable securities are left as they are and
/// flagged. Securities without a positive market cap are masked.
pub fn size_neutralize(
    f: &FactorPanel,
    panel: &PricePanel,
    strength: &StrengthPath,
    estimator: Estimator,
) -> Result<(FactorPanel, NeutralizationReport), NeutralizeError> {
    apply_stage(f, panel, strength, Stage::Size, estimator)
}

/// Industry and size in one regression, so the output is both industry
/// demeaned and orthogonal to the size terms.
pub fn industry_size_neutralize(
    f: &FactorPanel,
    panel: &PricePanel,
    strength: &StrengthPath,
    estimator: Estimator,
) -> Result<(FactorPanel, NeutralizationReport), NeutralizeError> {
    apply_stage(f, panel, strength, Stage::IndustrySize, estimator)
}

/// `α_t = α0·(1 + β·(σ_short − σ_long)/σ_long)` clamped to `[0, 1]`.
///
/// Both volatilities are sample standard deviations of the market return
/// over trailing windows ending at `t`. Non-finite returns are skipped
/// inside a window.
pub fn adaptive_strength(market_returns: &[f64], cfg: &NeutralizationConfig) -> Result<StrengthPath, NeutralizeError> {
    cfg.validate()?;
    let t_len = market_returns.len();
    let mut path = StrengthPath::constant(cfg.alpha0, t_len);
    if cfg.beta_vol == 0.0 {
        return Ok(path);
    }
    let window_std = |end: usize, w: usize| {
        let xs: Vec<f64> = market_returns[end + 1 - w..=end]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        (xs.len() >= 2).then(|| mean_std(&xs).1)
    };
    for t in 0..t_len {
        if t + 1 < cfg.vol_window_long {
            path.flags[t] = Some(StrengthFlag::InsufficientHistory);
            continue;
        }
        let (Some(short), Some(long)) = (window_std(t, cfg.vol_window_short), window_std(t, cfg.vol_window_long)) else {
            path.flags[t] = Some(StrengthFlag::InsufficientHistory);
            continue;
        };
        if long <= 0.0 {
            path.flags[t] = Some(StrengthFlag::ZeroLongVol);
            continue;
        }
        let raw = cfg.alpha0 * (1.0 + cfg.beta_vol * (short - long) / long);
        let clamped = raw.clamp(0.0, 1.0);
        if clamped != raw {
            path.flags[t] = Some(StrengthFlag::Clamped);
        }
        path.alpha[t] = clamped;
    }
    Ok(path)
}

/// Result of removing the top principal components of the factor
/// correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaNeutralization {
    pub factors: Vec<FactorPanel>,
    /// All eigenvalues of the correlation matrix, descending.
    pub eigenvalues: Vec<f64>,
}

/// Projects each observation's standardized factor vector onto the
/// complement of the top-`k` eigenvectors of the factor correlation matrix.
///
/// Statistics are estimated on the rows in `window` over cells where every
/// factor is valid. Outputs are in standardized units; cells where any
/// factor is missing are masked.
pub fn pca_neutralize_window(
    factors: &[FactorPanel],
    k: usize,
    window: std::ops::Range<usize>,
) -> Result<PcaNeutralization, NeutralizeError> {
    let m = factors.len();
    if k >= m {
        return Err(NeutralizeError::Config(format!(
            "cannot remove {k} components from {m} factors"
        )));
    }
    let dim = factors[0].dim();
    if factors.iter().any(|f| f.dim() != dim) {
        return Err(NeutralizeError::Shape("factors are not aligned".into()));
    }
    if k == 0 {
        return Ok(PcaNeutralization {
            factors: factors.to_vec(),
            eigenvalues: Vec::new(),
        });
    }
    let (t_len, n) = dim;
    let all_valid = |t: usize, i: usize| factors.iter().all(|f| f.values.mask[[t, i]]);
    let mut means = vec![0.0; m];
    let mut stds = vec![0.0; m];
    let mut cells = Vec::new();
    for t in window.clone().filter(|&t| t < t_len) {
        for i in 0..n {
            if all_valid(t, i) {
                cells.push((t, i));
            }
        }
    }
    if cells.len() < 2 {
        return Err(NeutralizeError::Config("too few jointly valid observations for pca".into()));
    }
    for (j, f) in factors.iter().enumerate() {
        let xs: Vec<f64> = cells.iter().map(|&(t, i)| f.values.values[[t, i]]).collect();
        let (mu, sd) = mean_std(&xs);
        means[j] = mu;
        stds[j] = if sd > 0.0 { sd } else { 1.0 };
    }
    let z = DMatrix::from_fn(cells.len(), m, |r, j| {
        let (t, i) = cells[r];
        (factors[j].values.values[[t, i]] - means[j]) / stds[j]
    });
    let corr = z.transpose() * &z / (cells.len() as f64 - 1.0);
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = DMatrix::from_fn(m, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let projector = DMatrix::identity(m, m) - &top * top.transpose();

    let mut outs: Vec<(Array2<f64>, Array2<bool>)> = (0..m)
        .map(|_| (Array2::from_elem((t_len, n), f64::NAN), Array2::from_elem((t_len, n), false)))
        .collect();
    for t in 0..t_len {
        for i in 0..n {
            if !all_valid(t, i) {
                continue;
            }
            let v = DVector::from_fn(m, |j, _| (factors[j].values.values[[t, i]] - means[j]) / stds[j]);
            let r = &projector * v;
            for (j, out) in outs.iter_mut().enumerate() {
                out.0[[t, i]] = r[j];
                out.1[[t, i]] = true;
            }
        }
    }
    let out = factors
        .iter()
        .zip(outs)
        .map(|(f, (v, mk))| f.derived(f.name.clone(), MaskedMatrix::new(v, mk), format!("pca_neutralize({k})")))
        .collect();
    Ok(PcaNeutralization {
        factors: out,
        eigenvalues: order.iter().map(|&j| eig.eigenvalues[j]).collect(),
    })
}

/// [`pca_neutralize_window`] estimated on every date.
pub fn pca_neutralize(factors: &[FactorPanel], k: usize) -> Result<Vec<FactorPanel>, NeutralizeError> {
    let t_len = factors.first().map_or(0, |f| f.dim().0);
    Ok(pca_neutralize_window(factors, k, 0..t_len)?.factors)
}

/// Runs the configured stages in order on every factor.
///
/// `market_returns` drives the adaptive strength; `pca_window` is the
/// estimation window of the PCA stage.
pub fn neutralize(
    factors: &[FactorPanel],
    panel: &PricePanel,
    market_returns: &[f64],
    cfg: &NeutralizationConfig,
    pca_window: std::ops::Range<usize>,
) -> Result<(Vec<FactorPanel>, Vec<NeutralizationReport>), NeutralizeError> {
    cfg.validate()?;
    let strength = adaptive_strength(market_returns, cfg)?;
    let mut current = factors.to_vec();
    let mut reports = vec![NeutralizationReport::default(); factors.len()];
    for (t, flag) in strength.flags.iter().enumerate() {
        if let Some(flag) = flag {
            let name = match flag {
                StrengthFlag::InsufficientHistory => "strength_fallback_history",
                StrengthFlag::ZeroLongVol => "strength_fallback_zero_vol",
                StrengthFlag::Clamped => "strength_clamped",
            };
            for r in reports.iter_mut() {
                r.records.push(CoefRecord {
                    date: t,
                    stage: cfg.stages.first().copied().unwrap_or(Stage::Industry),
                    name: name.into(),
                    value: 1.0,
                });
            }
        }
    }
    for &stage in &cfg.stages {
        if stage == Stage::Pca {
            let pca = pca_neutralize_window(&current, cfg.pca_k, pca_window.clone())?;
            let last = pca_window.end.saturating_sub(1).min(panel.n_dates().saturating_sub(1));
            for r in reports.iter_mut() {
                for (j, ev) in pca.eigenvalues.iter().enumerate() {
                    r.records.push(CoefRecord {
                        date: last,
                        stage,
                        name: format!("eigenvalue_{}", j + 1),
                        value: *ev,
                    });
                }
            }
            current = pca.factors;
            continue;
        }
        let results: Result<Vec<_>, _> = current
            .par_iter()
            .map(|f| apply_stage(f, panel, &strength, stage, cfg.estimator))
            .collect();
        current = Vec::with_capacity(factors.len());
        for ((f, rep), acc) in results?.into_iter().zip(reports.iter_mut()) {
            current.push(f);
            acc.extend(rep);
        }
    }
    Ok((current, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::pearson;
    use crate::rng::SeededStream;

    fn small_panel(n: usize, t: usize, seed: u64) -> PricePanel {
        let mut s = SeededStream::new(seed, 7, 0);
        let ones = Array2::from_elem((t, n), 1.0);
        PricePanel {
            dates: crate::synth::business_days(chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), t),
            securities: (0..n).map(|i| format!("S{i}")).collect(),
            open: ones.clone(),
            high: ones.clone(),
            low: ones.clone(),
            close: ones.clone(),
            volume: ones,
            market_cap: Array2::from_shape_fn((t, n), |_| 10f64.powf(s.uniform(8.0, 11.0))),
            industry: (0..n as u32).map(|i| i % 3).collect(),
            mask: Array2::from_elem((t, n), true),
        }
    }

    fn random_factor(panel: &PricePanel, seed: u64) -> FactorPanel {
        let mut s = SeededStream::new(seed, 9, 0);
        let v = Array2::from_shape_fn((panel.n_dates(), panel.n_securities()), |_| s.standard_normal());
        FactorPanel::new("f", MaskedMatrix::from_values(v), vec![])
    }

    #[test]
    fn industry_dummy_is_removed_entirely() {
        let p = small_panel(12, 5, 1);
        let v = Array2::from_shape_fn((5, 12), |(_, i)| if p.industry[i] == 0 { 1.0 } else { 0.0 });
        let f = FactorPanel::new("d", MaskedMatrix::from_values(v), vec![]);
        let (out, rep) = industry_neutralize(&f, &p, &StrengthPath::constant(1.0, 5), Estimator::LeastSquares).unwrap();
        assert!(out.values.values.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(rep.coefficient(0, Stage::Industry, "beta_industry_0"), Some(1.0));
    }

    #[test]
    fn industry_idempotent_and_demeaned() {
        let p = small_panel(30, 6, 2);
        let f = random_factor(&p, 3);
        let full = StrengthPath::constant(1.0, 6);
        let (once, _) = industry_neutralize(&f, &p, &full, Estimator::LeastSquares).unwrap();
        let (twice, _) = industry_neutralize(&once, &p, &full, Estimator::LeastSquares).unwrap();
        for (a, b) in once.values.values.iter().zip(twice.values.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for t in 0..6 {
            assert!(max_abs_industry_mean(&once.values.valid_in_row(t), &p) < 1e-10);
        }
    }

    #[test]
    fn size_removes_log_cap_and_is_orthogonal() {
        let p = small_panel(100, 4, 4);
        let full = StrengthPath::constant(1.0, 4);
        let v = Array2::from_shape_fn((4, 100), |(t, i)| p.market_cap[[t, i]].ln());
        let f = FactorPanel::new("lc", MaskedMatrix::from_values(v), vec![]);
        let (out, _) = size_neutralize(&f, &p, &full, Estimator::LeastSquares).unwrap();
        assert!(out.values.values.iter().all(|v| v.abs() < 1e-10));

        let f = random_factor(&p, 5);
        let (out, rep) = size_neutralize(&f, &p, &full, Estimator::LeastSquares).unwrap();
        for t in 0..4 {
            let row = out.values.valid_in_row(t);
            let y: Vec<f64> = row.iter().map(|r| r.1).collect();
            let x: Vec<f64> = row.iter().map(|r| p.market_cap[[t, r.0]].ln()).collect();
            let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
            assert!(pearson(&y, &x).unwrap().abs() < 1e-8);
            assert!(pearson(&y, &x2).unwrap().abs() < 1e-8);
            // Coefficients in log units reproduce the fit.
            let g = rep.coefficient(t, Stage::Size, "gamma").unwrap();
            let d = rep.coefficient(t, Stage::Size, "delta").unwrap();
            let c = rep.coefficient(t, Stage::Size, "intercept").unwrap();
            for (r, (&xi, &yi)) in row.iter().zip(x.iter().zip(&y)) {
                let raw = f.values.values[[t, r.0]];
                assert!((raw - (c + g * xi + d * xi * xi) - yi).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn equal_caps_reduce_to_demeaning() {
        let mut p = small_panel(8, 2, 6);
        p.market_cap.fill(1e9);
        let f = random_factor(&p, 7);
        let (out, _) = size_neutralize(&f, &p, &StrengthPath::constant(1.0, 2), Estimator::LeastSquares).unwrap();
        for t in 0..2 {
            let row: Vec<f64> = f.values.values.row(t).to_vec();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            for i in 0..8 {
                assert!((out.values.values[[t, i]] - (row[i] - mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn size_skips_small_cross_sections() {
        let p = small_panel(3, 2, 8);
        let f = random_factor(&p, 9);
        let (out, rep) = size_neutralize(&f, &p, &StrengthPath::constant(1.0, 2), Estimator::LeastSquares).unwrap();
        assert_eq!(out.values, f.values);
        assert_eq!(rep.skipped, vec![(0, Stage::Size), (1, Stage::Size)]);
    }

    #[test]
    fn strength_is_linear() {
        let p = small_panel(40, 3, 10);
        let f = random_factor(&p, 11);
        for stage in [Stage::Industry, Stage::Size, Stage::IndustrySize] {
            let run = |a: f64| {
                apply_stage(&f, &p, &StrengthPath::constant(a, 3), stage, Estimator::LeastSquares)
                    .unwrap()
                    .0
            };
            let one = run(1.0);
            for a in [0.0, 0.5, 1.0] {
                let out = run(a);
                for ((o, x), r) in out.values.values.iter().zip(f.values.values.iter()).zip(one.values.values.iter()) {
                    assert!((o - ((1.0 - a) * x + a * r)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn joint_stage_is_demeaned_and_orthogonal() {
        let p = small_panel(60, 3, 12);
        let f = random_factor(&p, 13);
        let (out, _) = industry_size_neutralize(&f, &p, &StrengthPath::constant(1.0, 3), Estimator::LeastSquares).unwrap();
        for t in 0..3 {
            let row = out.values.valid_in_row(t);
            assert!(max_abs_industry_mean(&row, &p) < 1e-10);
            let y: Vec<f64> = row.iter().map(|r| r.1).collect();
            let x: Vec<f64> = row.iter().map(|r| p.market_cap[[t, r.0]].ln()).collect();
            assert!(pearson(&y, &x).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn huber_resists_an_outlier() {
        let p = small_panel(30, 1, 14);
        let mut noise = SeededStream::new(19, 0, 0);
        let mut v = Array2::from_shape_fn((1, 30), |_| 0.01 * noise.standard_normal());
        let first = (0..30).find(|&i| p.industry[i] == 0).unwrap();
        v[[0, first]] = 1000.0;
        let f = FactorPanel::new("o", MaskedMatrix::from_values(v), vec![]);
        let s = StrengthPath::constant(1.0, 1);
        let (_, ls) = industry_neutralize(&f, &p, &s, Estimator::LeastSquares).unwrap();
        let (_, hub) = industry_neutralize(&f, &p, &s, Estimator::Huber).unwrap();
        let b_ls = ls.coefficient(0, Stage::Industry, "beta_industry_0").unwrap();
        let b_h = hub.coefficient(0, Stage::Industry, "beta_industry_0").unwrap();
        assert!(b_ls > 50.0);
        assert!(b_h < 1.0, "{b_h}");
    }

    #[test]
    fn adaptive_strength_examples() {
        let cfg = NeutralizationConfig {
            alpha0: 0.8,
            beta_vol: 0.5,
            vol_window_short: 3,
            vol_window_long: 6,
            ..Default::default()
        };
        let calm = [0.01, -0.01, 0.01];
        let k = {
            // Short-window amplitude giving σ_short/σ_long = 1.4 at t = 5.
            let mut lo = 0.0;
            let mut hi = 1.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let r: Vec<f64> = calm.iter().copied().chain([mid, -mid, mid]).collect();
                let ratio = mean_std(&r[3..]).1 / mean_std(&r).1;
                if ratio < 1.4 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let r: Vec<f64> = calm.iter().copied().chain([k, -k, k]).collect();
        let path = adaptive_strength(&r, &cfg).unwrap();
        assert!((path.alpha[5] - 0.96).abs() < 1e-9, "{}", path.alpha[5]);
        assert_eq!(path.alpha[..5], [0.8; 5]);
        assert_eq!(path.flags[0], Some(StrengthFlag::InsufficientHistory));

        let off = NeutralizationConfig {
            beta_vol: 0.0,
            ..cfg.clone()
        };
        assert!(adaptive_strength(&r, &off).unwrap().alpha.iter().all(|&a| a == 0.8));
        let flat = adaptive_strength(&[0.0; 8], &cfg).unwrap();
        assert_eq!(flat.flags[7], Some(StrengthFlag::ZeroLongVol));
        assert_eq!(flat.alpha[7], 0.8);
    }

    #[test]
    fn pca_examples() {
        let p = small_panel(50, 20, 15);
        let a = random_factor(&p, 16);
        let b = FactorPanel::new("b", MaskedMatrix::from_values(a.values.values.mapv(|v| 2.0 * v + 1.0)), vec![]);
        let out = pca_neutralize(&[a.clone(), b.clone()], 1).unwrap();
        for f in &out {
            assert!(f.values.values.iter().all(|v| v.abs() < 1e-10));
        }
        assert_eq!(pca_neutralize(&[a.clone(), b.clone()], 0).unwrap(), vec![a.clone(), b.clone()]);
        assert!(pca_neutralize(&[a, b], 2).is_err());

        let fs: Vec<FactorPanel> = (0..10).map(|s| random_factor(&p, 100 + s)).collect();
        let before = pca_neutralize_window(&fs, 1, 0..20).unwrap();
        // Second moments of the outputs, in the standardized units of the input.
        let rows: Vec<DVector<f64>> = (0..20)
            .flat_map(|t| (0..50).map(move |i| (t, i)))
            .map(|(t, i)| DVector::from_fn(10, |j, _| before.factors[j].values.values[[t, i]]))
            .collect();
        let mut cov = DMatrix::zeros(10, 10);
        for r in &rows {
            cov += r * r.transpose();
        }
        cov /= rows.len() as f64 - 1.0;
        let top_after = SymmetricEigen::new(cov).eigenvalues.max();
        assert!(top_after < before.eigenvalues[0]);
    }

    #[test]
    fn report_csv_columns() {
        let p = small_panel(10, 2, 17);
        let f = random_factor(&p, 18);
        let (_, rep) = size_neutralize(&f, &p, &StrengthPath::constant(1.0, 2), Estimator::LeastSquares).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf, &p.dates).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,stage,coef_name,value\n"));
        assert!(text.contains(",size,gamma,"));
    }
}
