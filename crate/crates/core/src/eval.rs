//! Factor evaluation: information coefficients, information ratio, IC decay
//! and the factor quality filter.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::{kernels::rank_row, FactorPanel};
use crate::matrix::{mean_std, pearson};
use crate::panel::{forward_returns, PanelError, PricePanel, ReturnPanel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("IC series has zero dispersion; IR is undefined")]
    ZeroDispersion,
    #[error("need at least {needed} non-missing IC values, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcMethod {
    Pearson,
    #[default]
    Spearman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcFlag {
    TooFewSecurities,
    ZeroVariance,
}

/// Per-date IC; `None` entries carry a flag explaining why.
#[derive(Debug, Clone, PartialEq)]
pub struct IcSeries {
    pub values: Vec<Option<f64>>,
    pub flags: Vec<Option<IcFlag>>,
}

impl IcSeries {
    pub fn valid(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// Minimum joint-valid securities for an IC.
pub const MIN_IC_SECURITIES: usize = 3;

fn ranks(xs: &[f64]) -> Vec<f64> {
    let indexed: Vec<(usize, f64)> = xs.iter().copied().enumerate().collect();
    let mut out = vec![0.0; xs.len()];
    for (i, r) in rank_row(&indexed) {
        out[i] = r;
    }
    out
}

/// IC for one cross-section of joint-valid `(factor, return)` pairs.
pub fn cross_section_ic(f: &[f64], r: &[f64], method: IcMethod) -> Result<f64, IcFlag> {
    if f.len() < MIN_IC_SECURITIES {
        return Err(IcFlag::TooFewSecurities);
    }
    let c = match method {
        IcMethod::Pearson => pearson(f, r),
        IcMethod::Spearman => pearson(&ranks(f), &ranks(r)),
    };
    c.ok_or(IcFlag::ZeroVariance)
}

/// `IC_t` between factor values and returns over securities valid in both.
pub fn information_coefficient(f: &FactorPanel, r: &ReturnPanel, method: IcMethod) -> Result<IcSeries, EvalError> {
    if f.dim() != r.returns.dim() {
        return Err(EvalError::Shape(format!(
            "factor is {:?}, returns are {:?}",
            f.dim(),
            r.returns.dim()
        )));
    }
    let (t_len, n) = f.dim();
    let per_date: Vec<Result<f64, IcFlag>> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                if let (Some(a), Some(b)) = (f.values.get(t, i), r.returns.get(t, i)) {
                    xs.push(a);
                    ys.push(b);
                }
            }
            cross_section_ic(&xs, &ys, method)
        })
        .collect();
    Ok(IcSeries {
        values: per_date.iter().map(|r| r.ok()).collect(),
        flags: per_date.iter().map(|r| r.err()).collect(),
    })
}

/// `mean(IC) / std(IC)` with the `n − 1` denominator.
pub fn information_ratio(ic: &[f64]) -> Result<f64, EvalError> {
    if ic.len() < 2 {
        return Err(EvalError::TooFewObservations {
            needed: 2,
            got: ic.len(),
        });
    }
    let (mean, sd) = mean_std(ic);
    if sd <= 1e-14 * mean.abs().max(1.0) {
        return Err(EvalError::ZeroDispersion);
    }
    Ok(mean / sd)
}

/// Mean IC against forward returns at each horizon.
pub fn ic_decay(
    f: &FactorPanel,
    panel: &PricePanel,
    horizons: &[usize],
    method: IcMethod,
) -> Result<Vec<(usize, Option<f64>)>, EvalError> {
    horizons
        .iter()
        .map(|&h| {
            let r = forward_returns(panel, h)?;
            let ic = information_coefficient(f, &r, method)?.valid();
            let mean = (!ic.is_empty()).then(|| ic.iter().sum::<f64>() / ic.len() as f64);
            Ok((h, mean))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub method: IcMethod,
    /// Forward-return horizon of the headline IC series.
    pub horizon: usize,
    pub decay_horizons: Vec<usize>,
    /// Trailing window of the rolling mean IC; `None` disables it.
    pub rolling_window: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: IcMethod::Spearman,
            horizon: 1,
            decay_horizons: vec![1, 5, 10, 20],
            rolling_window: Some(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorReport {
    pub name: String,
    pub ic_series: Vec<Option<f64>>,
    pub mean_ic: f64,
    pub ic_std: f64,
    /// `None` when the IC series has zero dispersion or fewer than two values.
    pub ir: Option<f64>,
    pub positive_ic_rate: f64,
    pub decay_profile: Vec<(usize, Option<f64>)>,
    pub n_dates_used: usize,
    pub rolling_mean_ic: Option<Vec<Option<f64>>>,
}

impl FactorReport {
    /// Summary statistics of an IC series.
    pub fn from_ic(name: impl Into<String>, ic_series: Vec<Option<f64>>) -> Self {
        let valid: Vec<f64> = ic_series.iter().flatten().copied().collect();
        let n = valid.len();
        let (mean_ic, ic_std) = mean_std(&valid);
        let positive = valid.iter().filter(|&&v| v > 0.0).count();
        Self {
            name: name.into(),
            mean_ic,
            ic_std,
            ir: information_ratio(&valid).ok(),
            positive_ic_rate: if n > 0 { positive as f64 / n as f64 } else { f64::NAN },
            decay_profile: Vec::new(),
            n_dates_used: n,
            rolling_mean_ic: None,
            ic_series,
        }
    }
}

/// Trailing mean of the available IC values; needs at least half the window.
pub fn rolling_mean_ic(ic: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    (0..ic.len())
        .map(|t| {
            if window == 0 || t + 1 < window {
                return None;
            }
            let vals: Vec<f64> = ic[t + 1 - window..=t].iter().flatten().copied().collect();
            (2 * vals.len() >= window).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

pub fn evaluate_factor(f: &FactorPanel, panel: &PricePanel, cfg: &EvalConfig) -> Result<FactorReport, EvalError> {
    let r = forward_returns(panel, cfg.horizon)?;
    let ic = information_coefficient(f, &r, cfg.method)?;
    let mut report = FactorReport::from_ic(f.name.clone(), ic.values);
    report.decay_profile = ic_decay(f, panel, &cfg.decay_horizons, cfg.method)?;
    report.rolling_mean_ic = cfg.rolling_window.map(|w| rolling_mean_ic(&report.ic_series, w));
    Ok(report)
}

/// Evaluates factors in parallel; reports keep the input order.
pub fn evaluate_factors(factors: &[FactorPanel], panel: &PricePanel, cfg: &EvalConfig) -> Result<Vec<FactorReport>, EvalError> {
    factors.par_iter().map(|f| evaluate_factor(f, panel, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityThresholds {
    pub min_abs_mean_ic: f64,
    pub min_ir: f64,
    pub min_positive_rate: f64,
}

pub fn passes(report: &FactorReport, th: &QualityThresholds) -> bool {
    let ir_ok = match report.ir {
        Some(ir) => ir.abs() >= th.min_ir,
        None => th.min_ir <= 0.0,
    };
    let p = report.positive_ic_rate;
    report.mean_ic.abs() >= th.min_abs_mean_ic && ir_ok && p.max(1.0 - p) >= th.min_positive_rate
}

/// Names of the reports that pass every threshold, in input order.
pub fn quality_filter(reports: &[FactorReport], th: &QualityThresholds) -> Vec<String> {
    reports.iter().filter(|r| passes(r, th)).map(|r| r.name.clone()).collect()
}

/// Writes `factor,mean_ic,ic_std,ir,positive_ic_rate,n_dates`; an undefined
/// IR is written as `undefined`.
pub fn write_reports_csv<W: Write>(reports: &[FactorReport], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| EvalError::Io(std::io::Error::other(e));
    w.write_record(["factor", "mean_ic", "ic_std", "ir", "positive_ic_rate", "n_dates"])
        .map_err(io)?;
    for r in reports {
        w.write_record([
            r.name.clone(),
            r.mean_ic.to_string(),
            r.ic_std.to_string(),
            r.ir.map_or_else(|| "undefined".to_string(), |v| v.to_string()),
            r.positive_ic_rate.to_string(),
            r.n_dates_used.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::MaskedMatrix;
    use crate::panel::Alignment;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn as_factor(v: Array2<f64>) -> FactorPanel {
        FactorPanel::new("f", MaskedMatrix::from_values(v), vec![])
    }

    fn as_returns(v: Array2<f64>) -> ReturnPanel {
        ReturnPanel {
            returns: MaskedMatrix::from_values(v),
            horizon: 1,
            alignment: Alignment::Forward,
        }
    }

    #[test]
    fn self_and_anti_correlation() {
        let r = Array2::from_shape_fn((4, 6), |(t, i)| ((t * 7 + i * 3) % 11) as f64 - 5.0);
        for method in [IcMethod::Pearson, IcMethod::Spearman] {
            let ic = information_coefficient(&as_factor(r.clone()), &as_returns(r.clone()), method).unwrap();
            assert!(ic.valid().iter().all(|&v| (v - 1.0).abs() < 1e-12));
            let ic = information_coefficient(&as_factor(-r.clone()), &as_returns(r.clone()), method).unwrap();
            assert!(ic.valid().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn three_point_spearman() {
        assert!((cross_section_ic(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0], IcMethod::Spearman).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            cross_section_ic(&[1.0, 2.0], &[1.0, 2.0], IcMethod::Pearson),
            Err(IcFlag::TooFewSecurities)
        );
        assert_eq!(
            cross_section_ic(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], IcMethod::Pearson),
            Err(IcFlag::ZeroVariance)
        );
    }

    #[test]
    fn ir_examples() {
        assert!(matches!(information_ratio(&[0.1, 0.1, 0.1]), Err(EvalError::ZeroDispersion)));
        assert!((information_ratio(&[0.2, 0.0]).unwrap() - 0.1 / 0.02f64.sqrt()).abs() < 1e-12);
        assert!(information_ratio(&[0.2]).is_err());
    }

    fn report(name: &str, mean_ic: f64, ir: f64, pos: f64) -> FactorReport {
        FactorReport {
            name: name.into(),
            ic_series: vec![],
            mean_ic,
            ic_std: mean_ic / ir,
            ir: Some(ir),
            positive_ic_rate: pos,
            decay_profile: vec![],
            n_dates_used: 0,
            rolling_mean_ic: None,
        }
    }

    #[test]
    fn quality_filter_table_values() {
        let th = QualityThresholds {
            min_abs_mean_ic: 0.02,
            min_ir: 0.3,
            min_positive_rate: 0.55,
        };
        let neutral = report("neutralized", 0.041, 0.461, 0.678);
        let raw = report("raw", 0.023, 0.147, 0.542);
        assert_eq!(quality_filter(&[raw.clone(), neutral.clone()], &th), vec!["neutralized"]);
        assert_eq!(
            quality_filter(&[raw, neutral], &QualityThresholds::default()),
            vec!["raw", "neutralized"]
        );
    }

    #[test]
    fn rolling_needs_half_window() {
        let ic = vec![Some(1.0), None, Some(3.0), None, None];
        assert_eq!(rolling_mean_ic(&ic, 2), vec![None, Some(1.0), Some(3.0), Some(3.0), None]);
    }

    #[test]
    fn csv_header_and_undefined_ir() {
        let mut r = report("a", 0.1, 1.0, 0.6);
        r.ir = None;
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("factor,mean_ic,ic_std,ir,positive_ic_rate,n_dates\n"));
        assert!(text.contains(",undefined,"));
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            f in prop::collection::vec(-5.0f64..5.0, 8),
            r in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let g: Vec<f64> = f.iter().map(|x| x.exp() * 3.0 + x.powi(3)).collect();
            let a = cross_section_ic(&f, &r, IcMethod::Spearman);
            let b = cross_section_ic(&g, &r, IcMethod::Spearman);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }

        #[test]
        fn negation_mirrors_the_report(
            ics in prop::collection::vec(prop::option::of(-1.0f64..1.0), 3..40),
        ) {
            let pos = FactorReport::from_ic("p", ics.clone());
            let neg = FactorReport::from_ic("n", ics.iter().map(|v| v.map(|x| -x)).collect());
            prop_assume!(pos.n_dates_used > 0);
            prop_assert!((pos.mean_ic + neg.mean_ic).abs() < 1e-12);
            if let (Some(a), Some(b)) = (pos.ir, neg.ir) {
                prop_assert!((a + b).abs() < 1e-9);
                prop_assert!(a == 0.0 || a.signum() == pos.mean_ic.signum());
            }
            let zeros = ics.iter().flatten().filter(|&&v| v == 0.0).count() as f64;
            let n = pos.n_dates_used as f64;
            prop_assert!((pos.positive_ic_rate - (1.0 - neg.positive_ic_rate - zeros / n)).abs() < 1e-12);
            prop_assert!(pos.ic_series.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
