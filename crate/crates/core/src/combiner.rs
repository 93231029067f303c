//! Pooled ridge regression of forward returns on standardized factors.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::FactorPanel;
use crate::panel::ReturnPanel;

#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("invalid combiner config: {0}")]
    Config(String),
    #[error("need at least {needed} pooled observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model file error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerConfig {
    pub ridge_lambda: f64,
    /// Forward-return horizon of the regression target, in days.
    pub target_horizon: usize,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            ridge_lambda: 1.0,
            target_horizon: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerModel {
    pub factor_names: Vec<String>,
    /// Return per unit of standardized exposure.
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Training-window mean and standard deviation of each factor.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub ridge_lambda: f64,
    pub training_window: Range<usize>,
}

/// `(XᵀX + λI)⁻¹ Xᵀ y`, no centering.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let k = x.ncols();
    let gram = x.transpose() * x + DMatrix::identity(k, k) * lambda;
    let rhs = x.transpose() * y;
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => crate::linalg::lstsq(&gram, &rhs),
    }
}

/// Fits on every `(t, i)` in `window` with all factors and the target valid.
///
/// Features are z-scored with pooled training statistics, the regression is
/// centered, and the intercept is `ȳ − z̄ᵀw`.
pub fn fit(
    factors: &[FactorPanel],
    target: &ReturnPanel,
    window: Range<usize>,
    ridge_lambda: f64,
) -> Result<CombinerModel, CombinerError> {
    if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
        return Err(CombinerError::Config(format!("ridge_lambda {ridge_lambda} must be finite and ≥ 0")));
    }
    if window.is_empty() || window.end > target.returns.rows() {
        return Err(CombinerError::Config(format!(
            "training window {window:?} is empty or outside {} dates",
            target.returns.rows()
        )));
    }
    if factors.iter().any(|f| f.dim() != target.returns.dim()) {
        return Err(CombinerError::Shape("factors and target are not aligned".into()));
    }
    let k = factors.len();
    let n = target.returns.cols();
    let mut cells = Vec::new();
    for t in window.clone() {
        for i in 0..n {
            if target.returns.mask[[t, i]] && factors.iter().all(|f| f.values.mask[[t, i]]) {
                cells.push((t, i));
            }
        }
    }
    if cells.len() < k + 2 {
        return Err(CombinerError::InsufficientData {
            needed: k + 2,
            got: cells.len(),
        });
    }
    let m = cells.len() as f64;
    let mut means = vec![0.0; k];
    let mut stds = vec![0.0; k];
    for (j, f) in factors.iter().enumerate() {
        let mu = cells.iter().map(|&(t, i)| f.values.values[[t, i]]).sum::<f64>() / m;
        let var = cells
            .iter()
            .map(|&(t, i)| (f.values.values[[t, i]] - mu).powi(2))
            .sum::<f64>()
            / (m - 1.0);
        means[j] = mu;
        stds[j] = var.sqrt();
    }
    let z = |j: usize, t: usize, i: usize| {
        if stds[j] > 0.0 {
            (factors[j].values.values[[t, i]] - means[j]) / stds[j]
        } else {
            0.0
        }
    };
    let x = DMatrix::from_fn(cells.len(), k, |r, j| z(j, cells[r].0, cells[r].1));
    let y = DVector::from_iterator(cells.len(), cells.iter().map(|&(t, i)| target.returns.values[[t, i]]));
    let xbar = DVector::from_fn(k, |j, _| x.column(j).mean());
    let ybar = y.mean();
    let xc = DMatrix::from_fn(cells.len(), k, |r, j| x[(r, j)] - xbar[j]);
    let yc = y.add_scalar(-ybar);
    let w = ridge_solve(&xc, &yc, ridge_lambda);
    let intercept = ybar - xbar.dot(&w);
    Ok(CombinerModel {
        factor_names: factors.iter().map(|f| f.name.clone()).collect(),
        weights: w.iter().copied().collect(),
        intercept,
        means,
        stds,
        ridge_lambda,
        training_window: window,
    })
}

impl CombinerModel {
    fn check(&self, factors: &[FactorPanel]) -> Result<(), CombinerError> {
        let names: Vec<&str> = factors.iter().map(|f| f.name.as_str()).collect();
        let expected: Vec<&str> = self.factor_names.iter().map(String::as_str).collect();
        if names != expected {
            return Err(CombinerError::Shape(format!("model expects factors {expected:?}, got {names:?}")));
        }
        Ok(())
    }

    /// `intercept + Σ_j w_j · z_j` with training-window z-scores; `None`
    /// where any exposure is missing.
    pub fn predict(&self, factors: &[FactorPanel], t: usize) -> Result<Vec<Option<f64>>, CombinerError> {
        self.check(factors)?;
        let n = factors.first().map_or(0, |f| f.dim().1);
        Ok((0..n)
            .map(|i| {
                let xs: Option<Vec<f64>> = factors.iter().map(|f| f.values.get(t, i)).collect();
                xs.map(|xs| self.intercept + self.linear_part(&xs))
            })
            .collect())
    }

    /// The intercept-free part of a prediction for one raw exposure vector.
    pub fn linear_part(&self, raw: &[f64]) -> f64 {
        raw.iter()
            .enumerate()
            .map(|(j, x)| {
                let z = if self.stds[j] > 0.0 {
                    (x - self.means[j]) / self.stds[j]
                } else {
                    0.0
                };
                self.weights[j] * z
            })
            .sum()
    }

    /// CSV with columns `factor,weight,mean,std`; model-level values are
    /// stored on rows named `(intercept)`, `(ridge_lambda)`,
    /// `(window_start)` and `(window_end)` in the weight column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CombinerError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| CombinerError::Format(e.to_string());
        w.write_record(["factor", "weight", "mean", "std"]).map_err(err)?;
        for j in 0..self.weights.len() {
            w.write_record([
                self.factor_names[j].clone(),
                self.weights[j].to_string(),
                self.means[j].to_string(),
                self.stds[j].to_string(),
            ])
            .map_err(err)?;
        }
        for (name, v) in [
            ("(intercept)", self.intercept),
            ("(ridge_lambda)", self.ridge_lambda),
            ("(window_start)", self.training_window.start as f64),
            ("(window_end)", self.training_window.end as f64),
        ] {
            w.write_record([name.to_string(), v.to_string(), String::new(), String::new()])
                .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, CombinerError> {
        let mut rd = csv::Reader::from_reader(input);
        let mut model = CombinerModel {
            factor_names: vec![],
            weights: vec![],
            intercept: f64::NAN,
            means: vec![],
            stds: vec![],
            ridge_lambda: f64::NAN,
            training_window: 0..0,
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| CombinerError::Format(format!("`{s}`: {e}")));
        let (mut start, mut end) = (None, None);
        for rec in rd.records() {
            let rec = rec.map_err(|e| CombinerError::Format(e.to_string()))?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            match get(0) {
                "(intercept)" => model.intercept = num(get(1))?,
                "(ridge_lambda)" => model.ridge_lambda = num(get(1))?,
                "(window_start)" => start = Some(num(get(1))? as usize),
                "(window_end)" => end = Some(num(get(1))? as usize),
                name => {
                    model.factor_names.push(name.to_string());
                    model.weights.push(num(get(1))?);
                    model.means.push(num(get(2))?);
                    model.stds.push(num(get(3))?);
                }
            }
        }
        match (start, end) {
            (Some(s), Some(e)) if model.intercept.is_finite() => model.training_window = s..e,
            _ => return Err(CombinerError::Format("missing intercept or training window rows".into())),
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::MaskedMatrix;
    use crate::panel::Alignment;
    use crate::rng::SeededStream;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn panel_from(v: Array2<f64>, name: &str) -> FactorPanel {
        FactorPanel::new(name, MaskedMatrix::from_values(v), vec![])
    }

    fn target(v: Array2<f64>) -> ReturnPanel {
        ReturnPanel {
            returns: MaskedMatrix::from_values(v),
            horizon: 1,
            alignment: Alignment::Forward,
        }
    }

    fn random(seed: u64, t: usize, n: usize) -> Array2<f64> {
        let mut s = SeededStream::new(seed, 0, 0);
        Array2::from_shape_fn((t, n), |_| s.standard_normal())
    }

    #[test]
    fn toy_normal_equations() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 2.0]);
        let w = ridge_solve(&x, &y, 1.0);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn exact_fit_on_standardized_target() {
        let raw = random(1, 10, 20);
        let mean = raw.mean().unwrap();
        let sd = (raw.mapv(|v| (v - mean).powi(2)).sum() / (raw.len() as f64 - 1.0)).sqrt();
        let y = raw.mapv(|v| (v - mean) / sd);
        let m = fit(&[panel_from(y.clone(), "y")], &target(y), 0..10, 0.0).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
    }

    #[test]
    fn heavy_ridge_predicts_the_mean() {
        let x = random(2, 8, 15);
        let y = random(3, 8, 15).mapv(|v| 0.01 * v + 0.002);
        let m = fit(&[panel_from(x.clone(), "x")], &target(y.clone()), 0..8, 1e12).unwrap();
        assert!(m.weights[0].abs() < 1e-10);
        let p = m.predict(&[panel_from(x, "x")], 3).unwrap();
        assert!(p.iter().all(|v| (v.unwrap() - y.mean().unwrap()).abs() < 1e-10));
    }

    #[test]
    fn predict_pass_through_and_missing() {
        let x = random(4, 5, 6);
        let mut m = fit(&[panel_from(x.clone(), "a"), panel_from(x.clone(), "b")], &target(x.clone()), 0..5, 1.0).unwrap();
        m.weights = vec![1.0, 0.0];
        let mut x2 = x.clone();
        x2[[2, 3]] = f64::NAN;
        let p = m.predict(&[panel_from(x2.clone(), "a"), panel_from(x2, "b")], 2).unwrap();
        assert_eq!(p[3], None);
        let z = (x[[2, 0]] - m.means[0]) / m.stds[0];
        assert!((p[0].unwrap() - (m.intercept + z)).abs() < 1e-15);
        m.weights = vec![0.0, 0.0];
        let p = m.predict(&[panel_from(x.clone(), "a"), panel_from(x, "b")], 1).unwrap();
        assert!(p.iter().all(|v| v.unwrap() == m.intercept));
    }

    #[test]
    fn statistics_come_from_the_window_only() {
        let x = random(5, 30, 10);
        let y = random(6, 30, 10);
        let a = fit(&[panel_from(x.clone(), "x")], &target(y.clone()), 0..20, 1.0).unwrap();
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        for t in 20..30 {
            for i in 0..10 {
                x2[[t, i]] += 100.0;
                y2[[t, i]] = -y2[[t, i]];
            }
        }
        let b = fit(&[panel_from(x2, "x")], &target(y2), 0..20, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let x = random(7, 6, 9);
        let m = fit(&[panel_from(x.clone(), "f1"), panel_from(x.mapv(|v| v * v), "f2")], &target(random(8, 6, 9)), 1..5, 0.5).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("factor,weight,mean,std\n"));
        assert_eq!(CombinerModel::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn empty_window_is_config_error() {
        let x = random(9, 4, 4);
        assert!(matches!(
            fit(&[panel_from(x.clone(), "x")], &target(x), 2..2, 1.0),
            Err(CombinerError::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn ridge_path_shrinks(seed in 0u64..500, l1 in 0.0f64..50.0, dl in 0.001f64..50.0) {
            let x = random(seed, 6, 8);
            let x2 = x.mapv(|v| v * v + 0.3 * v);
            let y = random(seed + 1000, 6, 8);
            let fs = [panel_from(x, "a"), panel_from(x2, "b")];
            let a = fit(&fs, &target(y.clone()), 0..6, l1).unwrap();
            let b = fit(&fs, &target(y), 0..6, l1 + dl).unwrap();
            let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm(&a.weights) >= norm(&b.weights) - 1e-12);
        }

        #[test]
        fn prediction_is_affine(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random(seed, 5, 7);
            let fs = [panel_from(x.clone(), "a"), panel_from(x.mapv(f64::sin), "b")];
            let m = fit(&fs, &target(random(seed + 1, 5, 7)), 0..5, 1.0).unwrap();
            let x1 = [0.3, -1.2];
            let x2 = [1.1, 0.4];
            let mix: Vec<f64> = (0..2).map(|j| a * x1[j] + b * x2[j]).collect();
            // The map from raw exposures is affine through the standardization offsets.
            let offset = m.linear_part(&[0.0, 0.0]);
            let lhs = m.linear_part(&mix) - offset;
            let rhs = a * (m.linear_part(&x1) - offset) + b * (m.linear_part(&x2) - offset);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
