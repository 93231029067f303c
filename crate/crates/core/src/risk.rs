//! Multi-factor risk model `Σ̃ = BΩBᵀ + diag(Δ) + εI`.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::FactorPanel;
use crate::linalg::{independent_columns, lstsq};
use crate::matrix::{mean_std, MaskedMatrix};
use crate::panel::ReturnPanel;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("invalid risk model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid risk model: {0}")]
    Invalid(String),
    #[error("singular system")]
    Singular,
    #[error("csv error: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    /// EWMA decay of the factor covariance.
    pub lambda: f64,
    /// Ridge added to the diagonal, in the model's return² units.
    pub epsilon: f64,
    pub idio_floor: f64,
    /// Trailing dates used to estimate Ω and Δ.
    pub window: usize,
    /// Factors used as risk factors; `None` means all.
    pub factors: Option<Vec<String>>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            lambda: 0.97,
            epsilon: 1e-6,
            idio_floor: 1e-8,
            window: 250,
            factors: None,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<(), RiskError> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(RiskError::Config(format!("lambda {} outside (0, 1)", self.lambda)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(RiskError::Config(format!("epsilon {} must be ≥ 0", self.epsilon)));
        }
        if !(self.idio_floor > 0.0) {
            return Err(RiskError::Config("idio_floor must be > 0".into()));
        }
        if self.window < 2 {
            return Err(RiskError::Config("window must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Cross-sectional z-scores (sample std) of each factor at date `t`.
///
/// Returns an `N×K` matrix and the securities valid in every factor. A
/// factor with zero dispersion gets all-zero exposures.
pub fn standardized_exposures(factors: &[FactorPanel], t: usize) -> (Array2<f64>, Vec<bool>) {
    let n = factors.first().map_or(0, |f| f.dim().1);
    let valid: Vec<bool> = (0..n).map(|i| factors.iter().all(|f| f.values.mask[[t, i]])).collect();
    (zscores(factors, t, &valid), valid)
}

pub(crate) fn zscores(factors: &[FactorPanel], t: usize, include: &[bool]) -> Array2<f64> {
    let n = include.len();
    let mut out = Array2::zeros((n, factors.len()));
    for (j, f) in factors.iter().enumerate() {
        let xs: Vec<f64> = (0..n).filter(|&i| include[i]).map(|i| f.values.values[[t, i]]).collect();
        if xs.len() < 2 {
            continue;
        }
        let (m, sd) = mean_std(&xs);
        for i in (0..n).filter(|&i| include[i]) {
            out[[i, j]] = if sd > 0.0 { (f.values.values[[t, i]] - m) / sd } else { 0.0 };
        }
    }
    out
}

/// Per-date cross-sectional regression output.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorReturns {
    /// `T×K`; NaN on dates that could not be estimated.
    pub returns: Array2<f64>,
    pub intercept: Vec<f64>,
    /// Fitted returns (`T×N`), masked where the regression did not use the cell.
    pub fitted: MaskedMatrix,
    /// `(date, factor)` pairs dropped for collinearity; their return is 0.
    pub dropped: Vec<(usize, usize)>,
}

impl FactorReturns {
    /// Residual returns `r − fitted`.
    pub fn residuals(&self, returns: &ReturnPanel) -> MaskedMatrix {
        crate::factor::kernels::combine(&returns.returns, &self.fitted, |a, b| a - b)
    }
}

/// Regresses each date's returns on an intercept plus standardized factor
/// exposures. Collinear columns are dropped greedily, keeping lower indices.
/// Dates with fewer than `K + 1` (and at least 3) joint-valid securities
/// are left missing.
pub fn factor_returns(factors: &[FactorPanel], returns: &ReturnPanel) -> Result<FactorReturns, RiskError> {
    let dim = returns.returns.dim();
    if factors.iter().any(|f| f.dim() != dim) {
        return Err(RiskError::Shape("factors and returns are not aligned".into()));
    }
    let (t_len, n) = dim;
    let k = factors.len();
    let per_date: Vec<_> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let include: Vec<bool> = (0..n)
                .map(|i| returns.returns.mask[[t, i]] && factors.iter().all(|f| f.values.mask[[t, i]]))
                .collect();
            let rows: Vec<usize> = (0..n).filter(|&i| include[i]).collect();
            if rows.len() < (k + 1).max(3) {
                return None;
            }
            let zs = zscores(factors, t, &include);
            let x = DMatrix::from_fn(rows.len(), k, |r, j| zs[[rows[r], j]]);
            let kept = independent_columns(&x, 1e-8);
            let design = DMatrix::from_fn(rows.len(), kept.len() + 1, |r, c| {
                if c == 0 {
                    1.0
                } else {
                    x[(r, kept[c - 1])]
                }
            });
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| returns.returns.values[[t, i]]));
            let b = lstsq(&design, &y);
            let fitted = &design * &b;
            let mut f = vec![0.0; k];
            for (c, &j) in kept.iter().enumerate() {
                f[j] = b[c + 1];
            }
            let dropped: Vec<usize> = (0..k).filter(|j| !kept.contains(j)).collect();
            let fitted: Vec<(usize, f64)> = rows.iter().zip(fitted.iter()).map(|(&i, &v)| (i, v)).collect();
            Some((f, b[0], fitted, dropped))
        })
        .collect();
    let mut fr = Array2::from_elem((t_len, k), f64::NAN);
    let mut intercept = vec![f64::NAN; t_len];
    let mut fv = Array2::from_elem((t_len, n), f64::NAN);
    let mut fm = Array2::from_elem((t_len, n), false);
    let mut dropped = Vec::new();
    for (t, res) in per_date.into_iter().enumerate() {
        if let Some((f, a, fitted, d)) = res {
            for j in 0..k {
                fr[[t, j]] = f[j];
            }
            intercept[t] = a;
            for (i, v) in fitted {
                fv[[t, i]] = v;
                fm[[t, i]] = true;
            }
            dropped.extend(d.into_iter().map(|j| (t, j)));
        }
    }
    Ok(FactorReturns {
        returns: fr,
        intercept,
        fitted: MaskedMatrix::new(fv, fm),
        dropped,
    })
}

/// EWMA second-moment matrix of the rows of `f` (oldest first).
///
/// Weights are `λ^s` with `s = 0` on the most recent finite row, renormalized
/// to sum to one. Rows containing non-finite values are skipped.
pub fn ewma_cov(f: &Array2<f64>, lambda: f64) -> Result<Array2<f64>, RiskError> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(RiskError::Config(format!("lambda {lambda} outside (0, 1)")));
    }
    let k = f.ncols();
    let rows: Vec<usize> = (0..f.nrows())
        .filter(|&t| f.row(t).iter().all(|v| v.is_finite()))
        .collect();
    let mut omega = Array2::zeros((k, k));
    if rows.is_empty() {
        return Ok(omega);
    }
    let mut total = 0.0;
    let mut w = 1.0;
    for &t in rows.iter().rev() {
        let r = f.row(t);
        for a in 0..k {
            for b in a..k {
                omega[[a, b]] += w * r[a] * r[b];
            }
        }
        total += w;
        w *= lambda;
    }
    for a in 0..k {
        for b in a..k {
            let v = omega[[a, b]] / total;
            omega[[a, b]] = v;
            omega[[b, a]] = v;
        }
    }
    Ok(omega)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdioVariance {
    pub var: Array1<f64>,
    /// Securities with fewer than two residuals (given the floor).
    pub flagged: Vec<bool>,
}

/// Per-security sample variance of residual returns, floored at `floor`.
pub fn idio_variance_from_residuals(residuals: &MaskedMatrix, floor: f64) -> IdioVariance {
    let n = residuals.cols();
    let mut var = Array1::from_elem(n, floor);
    let mut flagged = vec![false; n];
    for i in 0..n {
        let xs: Vec<f64> = (0..residuals.rows()).filter_map(|t| residuals.get(t, i)).collect();
        if xs.len() < 2 {
            flagged[i] = true;
            continue;
        }
        var[i] = mean_std(&xs).1.powi(2).max(floor);
    }
    IdioVariance { var, flagged }
}

/// Residual variance of `returns − fitted`.
pub fn idio_variance(returns: &ReturnPanel, fitted: &MaskedMatrix, floor: f64) -> Result<IdioVariance, RiskError> {
    if returns.returns.dim() != fitted.dim() {
        return Err(RiskError::Shape("returns and fitted values are not aligned".into()));
    }
    let resid = crate::factor::kernels::combine(&returns.returns, fitted, |a, b| a - b);
    Ok(idio_variance_from_residuals(&resid, floor))
}

/// `Σ̃ = BΩBᵀ + diag(Δ) + εI`, held in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub securities: Vec<String>,
    pub factor_names: Vec<String>,
    /// `N×K` exposures.
    pub loadings: Array2<f64>,
    /// `K×K` factor covariance.
    pub factor_cov: Array2<f64>,
    pub idio_var: Array1<f64>,
    pub epsilon: f64,
}

/// Largest `N` for which [`RiskModel::dense`] will materialize `Σ̃`.
pub const MAX_DENSE: usize = 1000;

impl RiskModel {
    pub fn new(
        securities: Vec<String>,
        factor_names: Vec<String>,
        loadings: Array2<f64>,
        factor_cov: Array2<f64>,
        idio_var: Array1<f64>,
        epsilon: f64,
    ) -> Result<Self, RiskError> {
        let (n, k) = loadings.dim();
        if factor_cov.dim() != (k, k) || idio_var.len() != n || securities.len() != n || factor_names.len() != k {
            return Err(RiskError::Shape(format!(
                "B is {n}×{k}, Ω is {:?}, Δ has {}, {} ids, {} names",
                factor_cov.dim(),
                idio_var.len(),
                securities.len(),
                factor_names.len()
            )));
        }
        if !(epsilon >= 0.0) {
            return Err(RiskError::Config(format!("epsilon {epsilon} must be ≥ 0")));
        }
        if idio_var.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(RiskError::Invalid("idiosyncratic variances must be finite and ≥ 0".into()));
        }
        if loadings.iter().chain(factor_cov.iter()).any(|v| !v.is_finite()) {
            return Err(RiskError::Invalid("non-finite loading or covariance".into()));
        }
        let scale = factor_cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for a in 0..k {
            for b in 0..a {
                if (factor_cov[[a, b]] - factor_cov[[b, a]]).abs() > 1e-12 * scale {
                    return Err(RiskError::Invalid("factor covariance is not symmetric".into()));
                }
            }
        }
        if k > 0 {
            let eig = nalgebra::SymmetricEigen::new(to_dmatrix(&factor_cov));
            if eig.eigenvalues.min() < -1e-10 * scale {
                return Err(RiskError::Invalid(format!(
                    "factor covariance has eigenvalue {}",
                    eig.eigenvalues.min()
                )));
            }
        }
        Ok(Self {
            securities,
            factor_names,
            loadings,
            factor_cov,
            idio_var,
            epsilon,
        })
    }

    pub fn n(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn k(&self) -> usize {
        self.loadings.ncols()
    }

    /// `Σ̃ w` without forming `Σ̃`.
    pub fn matvec(&self, w: &[f64]) -> Vec<f64> {
        let w = ndarray::ArrayView1::from(w);
        let bt_w = self.loadings.t().dot(&w);
        let sys = self.loadings.dot(&self.factor_cov.dot(&bt_w));
        (0..w.len())
            .map(|i| sys[i] + (self.idio_var[i] + self.epsilon) * w[i])
            .collect()
    }

    /// `wᵀ Σ̃ w`.
    pub fn quad_form(&self, w: &[f64]) -> f64 {
        let wv = ndarray::ArrayView1::from(w);
        let bt_w = self.loadings.t().dot(&wv);
        let sys = bt_w.dot(&self.factor_cov.dot(&bt_w));
        sys + w
            .iter()
            .zip(self.idio_var.iter())
            .map(|(x, d)| (d + self.epsilon) * x * x)
            .sum::<f64>()
    }

    /// Materialized `Σ̃` for `N ≤ 1000`.
    pub fn dense(&self) -> Result<Array2<f64>, RiskError> {
        if self.n() > MAX_DENSE {
            return Err(RiskError::Config(format!(
                "refusing to materialize a {0}×{0} covariance",
                self.n()
            )));
        }
        let mut s = self.loadings.dot(&self.factor_cov).dot(&self.loadings.t());
        for i in 0..self.n() {
            s[[i, i]] += self.idio_var[i] + self.epsilon;
        }
        // Exact symmetry regardless of summation order.
        for a in 0..self.n() {
            for b in 0..a {
                let v = 0.5 * (s[[a, b]] + s[[b, a]]);
                s[[a, b]] = v;
                s[[b, a]] = v;
            }
        }
        Ok(s)
    }

    /// Same model with every variance multiplied by `h` (e.g. a horizon in days).
    pub fn scaled(&self, h: f64) -> Self {
        Self {
            factor_cov: &self.factor_cov * h,
            idio_var: &self.idio_var * h,
            epsilon: self.epsilon * h,
            ..self.clone()
        }
    }

    /// Model restricted to the given securities, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            securities: idx.iter().map(|&i| self.securities[i].clone()).collect(),
            loadings: self.loadings.select(ndarray::Axis(0), idx),
            idio_var: self.idio_var.select(ndarray::Axis(0), idx),
            ..self.clone()
        }
    }

    /// Factorization of `scale·Σ̃_SS + shift·I` on the index subset `S`.
    pub fn shifted_solver(&self, subset: &[usize], scale: f64, shift: f64) -> Result<ShiftedSolver, RiskError> {
        let m = subset.len();
        let k = self.k();
        let d: Vec<f64> = subset
            .iter()
            .map(|&i| scale * (self.idio_var[i] + self.epsilon) + shift)
            .collect();
        let b = DMatrix::from_fn(m, k, |r, c| self.loadings[[subset[r], c]]);
        let omega = to_dmatrix(&self.factor_cov) * scale;
        let dmax = d.iter().cloned().fold(0.0, f64::max);
        if m > 0 && d.iter().all(|&v| v > 1e-12 * dmax.max(f64::MIN_POSITIVE)) {
            // Woodbury: M⁻¹ = D⁻¹ − D⁻¹B (I + ΩBᵀD⁻¹B)⁻¹ ΩBᵀD⁻¹.
            let dinv_b = DMatrix::from_fn(m, k, |r, c| b[(r, c)] / d[r]);
            let core = DMatrix::identity(k, k) + &omega * b.transpose() * &dinv_b;
            let lu = core.lu();
            if lu.is_invertible() {
                return Ok(ShiftedSolver::Woodbury { d, dinv_b, omega_bt: &omega * b.transpose(), lu });
            }
        }
        let mut dense = &b * &omega * b.transpose();
        for r in 0..m {
            dense[(r, r)] += d[r];
        }
        let lu = dense.lu();
        if !lu.is_invertible() {
            return Err(RiskError::Singular);
        }
        Ok(ShiftedSolver::Dense(lu))
    }

    /// Writes `loadings.csv`, `factor_cov.csv` and `idio_var.csv` into `dir`.
    pub fn write_csv(&self, dir: &std::path::Path) -> Result<(), RiskError> {
        std::fs::create_dir_all(dir)?;
        let csv_err = |e: csv::Error| RiskError::Csv(e.to_string());
        let mut w = csv::Writer::from_path(dir.join("loadings.csv")).map_err(csv_err)?;
        let mut header = vec!["security".to_string()];
        header.extend(self.factor_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, id) in self.securities.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.loadings.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("factor_cov.csv")).map_err(csv_err)?;
        let mut header = vec!["factor".to_string()];
        header.extend(self.factor_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (a, name) in self.factor_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.factor_cov.row(a).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("idio_var.csv")).map_err(csv_err)?;
        w.write_record(["security", "idio_var"]).map_err(csv_err)?;
        for (id, v) in self.securities.iter().zip(self.idio_var.iter()) {
            w.write_record([id.clone(), v.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the three files written by [`RiskModel::write_csv`].
    pub fn read_csv(dir: &std::path::Path, epsilon: f64) -> Result<Self, RiskError> {
        let open = |name: &str| -> Result<Vec<Vec<String>>, RiskError> {
            let file = std::fs::File::open(dir.join(name))?;
            read_rows(file)
        };
        let loadings = open("loadings.csv")?;
        let cov = open("factor_cov.csv")?;
        let idio = open("idio_var.csv")?;
        let names: Vec<String> = loadings[0][1..].to_vec();
        let k = names.len();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| RiskError::Csv(format!("{s}: {e}")));
        let n = loadings.len() - 1;
        let mut b = Array2::zeros((n, k));
        let mut ids = Vec::with_capacity(n);
        for (r, row) in loadings[1..].iter().enumerate() {
            if row.len() != k + 1 {
                return Err(RiskError::Csv(format!("loadings row {} has {} fields", r + 2, row.len())));
            }
            ids.push(row[0].clone());
            for c in 0..k {
                b[[r, c]] = parse(&row[c + 1])?;
            }
        }
        if cov.len() != k + 1 || cov[0][1..] != names[..] {
            return Err(RiskError::Csv("factor_cov.csv does not match the loadings factors".into()));
        }
        let mut omega = Array2::zeros((k, k));
        for (r, row) in cov[1..].iter().enumerate() {
            for c in 0..k {
                omega[[r, c]] = parse(&row[c + 1])?;
            }
        }
        let mut delta = Array1::zeros(n);
        if idio.len() != n + 1 {
            return Err(RiskError::Csv("idio_var.csv does not match the loadings securities".into()));
        }
        for (r, row) in idio[1..].iter().enumerate() {
            if row[0] != ids[r] {
                return Err(RiskError::Csv(format!("security {} out of order in idio_var.csv", row[0])));
            }
            delta[r] = parse(&row[1])?;
        }
        Self::new(ids, names, b, omega, delta, epsilon)
    }
}

fn read_rows<R: Read>(r: R) -> Result<Vec<Vec<String>>, RiskError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let rows: Result<Vec<Vec<String>>, _> = rd
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect();
    let rows = rows.map_err(|e| RiskError::Csv(e.to_string()))?;
    if rows.is_empty() {
        return Err(RiskError::Csv("empty file".into()));
    }
    Ok(rows)
}

pub(crate) fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// Solver for `scale·Σ̃_SS + shift·I`.
pub enum ShiftedSolver {
    Woodbury {
        d: Vec<f64>,
        dinv_b: DMatrix<f64>,
        omega_bt: DMatrix<f64>,
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl ShiftedSolver {
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            ShiftedSolver::Woodbury { d, dinv_b, omega_bt, lu } => {
                let dinv_r = DVector::from_fn(rhs.len(), |i, _| rhs[i] / d[i]);
                if dinv_b.ncols() == 0 {
                    return dinv_r;
                }
                let inner = omega_bt * &dinv_r;
                let y = lu.solve(&inner).expect("factorization checked at construction");
                dinv_r - dinv_b * y
            }
            ShiftedSolver::Dense(lu) => lu.solve(rhs).expect("factorization checked at construction"),
        }
    }

    pub fn solve_many(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            out.set_column(c, &self.solve(&rhs.column(c).into_owned()));
        }
        out
    }
}

/// Estimates a model for date `t` from regression history strictly before `t`.
///
/// `fr` comes from [`factor_returns`] on one-day forward returns, so row
/// `s` is realized at `s + 1`; rows `t − window .. t − 1` are used. Loadings
/// are the standardized exposures at `t`, zero where a security is missing.
pub fn estimate_at(
    factors: &[FactorPanel],
    fr: &FactorReturns,
    daily_forward: &ReturnPanel,
    t: usize,
    securities: &[String],
    cfg: &RiskConfig,
) -> Result<RiskModel, RiskError> {
    cfg.validate()?;
    let selected: Vec<usize> = match &cfg.factors {
        None => (0..factors.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                factors
                    .iter()
                    .position(|f| &f.name == n)
                    .ok_or_else(|| RiskError::Config(format!("unknown risk factor `{n}`")))
            })
            .collect::<Result<_, _>>()?,
    };
    let lo = t.saturating_sub(cfg.window);
    let hist = fr.returns.slice(ndarray::s![lo..t, ..]).select(ndarray::Axis(1), &selected);
    let omega = ewma_cov(&hist, cfg.lambda)?;
    let resid = fr.residuals(daily_forward).slice_rows(lo, t);
    let delta = idio_variance_from_residuals(&resid, cfg.idio_floor).var;
    let chosen: Vec<FactorPanel> = selected.iter().map(|&j| factors[j].clone()).collect();
    let (b, _) = standardized_exposures(&chosen, t);
    RiskModel::new(
        securities.to_vec(),
        chosen.iter().map(|f| f.name.clone()).collect(),
        b,
        omega,
        delta,
        cfg.epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Alignment;
    use crate::rng::SeededStream;

    fn random_model(n: usize, k: usize, seed: u64, eps: f64) -> RiskModel {
        let mut s = SeededStream::new(seed, 2, 0);
        let b = Array2::from_shape_fn((n, k), |_| s.standard_normal());
        let g = Array2::from_shape_fn((k, k), |_| 0.1 * s.standard_normal());
        let omega = g.dot(&g.t());
        let omega = (&omega + &omega.t()) * 0.5;
        let delta = Array1::from_shape_fn(n, |_| s.uniform(0.0, 0.05));
        RiskModel::new(
            (0..n).map(|i| format!("S{i}")).collect(),
            (0..k).map(|j| format!("F{j}")).collect(),
            b,
            omega,
            delta,
            eps,
        )
        .unwrap()
    }

    fn ret_panel(v: Array2<f64>) -> ReturnPanel {
        ReturnPanel {
            returns: MaskedMatrix::from_values(v),
            horizon: 1,
            alignment: Alignment::Forward,
        }
    }

    #[test]
    fn self_regression_returns_dispersion() {
        let mut s = SeededStream::new(3, 0, 0);
        let r = Array2::from_shape_fn((5, 30), |_| 0.02 * s.standard_normal());
        let f = FactorPanel::new("r", MaskedMatrix::from_values(r.clone()), vec![]);
        let fr = factor_returns(&[f], &ret_panel(r.clone())).unwrap();
        for t in 0..5 {
            let row: Vec<f64> = r.row(t).to_vec();
            assert!((fr.returns[[t, 0]] - mean_std(&row).1).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_factor_dropped() {
        let mut s = SeededStream::new(4, 0, 0);
        let x = Array2::from_shape_fn((3, 20), |_| s.standard_normal());
        let r = Array2::from_shape_fn((3, 20), |_| s.standard_normal());
        let f = FactorPanel::new("a", MaskedMatrix::from_values(x), vec![]);
        let fr = factor_returns(&[f.clone(), f], &ret_panel(r)).unwrap();
        assert_eq!(fr.dropped, vec![(0, 1), (1, 1), (2, 1)]);
        assert!(fr.returns.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ewma_examples() {
        let f = Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap();
        assert!((ewma_cov(&f, 0.5).unwrap()[[0, 0]] - 1.0).abs() < 1e-15);
        let v = [0.3, -0.1];
        let c = Array2::from_shape_fn((7, 2), |(_, j)| v[j]);
        let o = ewma_cov(&c, 0.9).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((o[[a, b]] - v[a] * v[b]).abs() < 1e-15);
            }
        }
        let mut s = SeededStream::new(5, 0, 0);
        let f = Array2::from_shape_fn((1000, 3), |_| s.standard_normal());
        let o = ewma_cov(&f, 0.9999).unwrap();
        let plain = f.t().dot(&f) / 1000.0;
        for (a, b) in o.iter().zip(plain.iter()) {
            assert!((a - b).abs() <= 0.01 * plain[[0, 0]].max(b.abs()));
        }
        assert!(ewma_cov(&f, 1.0).is_err());
    }

    #[test]
    fn idio_examples() {
        let z = MaskedMatrix::from_values(Array2::zeros((4, 1)));
        assert_eq!(idio_variance_from_residuals(&z, 1e-8).var[0], 1e-8);
        let r = MaskedMatrix::from_values(Array2::from_shape_vec((2, 1), vec![0.01, -0.01]).unwrap());
        assert!((idio_variance_from_residuals(&r, 1e-8).var[0] - 2e-4).abs() < 1e-18);
        let one = MaskedMatrix::from_values(Array2::from_elem((1, 1), 0.3));
        let v = idio_variance_from_residuals(&one, 1e-8);
        assert!(v.flagged[0] && v.var[0] == 1e-8);
    }

    #[test]
    fn idio_recovers_known_noise() {
        let (t, n) = (2000, 40);
        let mut s = SeededStream::new(6, 0, 0);
        let x = Array2::from_shape_fn((t, n), |_| s.standard_normal());
        let r = Array2::from_shape_fn((t, n), |(a, i)| 0.002 * x[[a, i]] + 0.01 * s.standard_normal());
        let f = FactorPanel::new("x", MaskedMatrix::from_values(x), vec![]);
        let rp = ret_panel(r);
        let fr = factor_returns(&[f], &rp).unwrap();
        let v = idio_variance(&rp, &fr.fitted, 1e-8).unwrap();
        let inside = v.var.iter().filter(|&&d| (0.9e-4..=1.1e-4).contains(&d)).count();
        assert!(inside as f64 >= 0.95 * n as f64, "{inside}");
    }

    #[test]
    fn diagonal_and_single_factor_forms() {
        let d = RiskModel::new(
            vec!["a".into(), "b".into()],
            vec!["f".into()],
            Array2::zeros((2, 1)),
            Array2::from_elem((1, 1), 0.3),
            Array1::from(vec![0.1, 0.2]),
            0.0,
        )
        .unwrap();
        assert!((d.quad_form(&[1.0, 2.0]) - 0.9).abs() < 1e-15);
        let m = RiskModel::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["mkt".into()],
            Array2::ones((3, 1)),
            Array2::from_elem((1, 1), 0.04),
            Array1::zeros(3),
            0.0,
        )
        .unwrap();
        assert!((m.quad_form(&[1.0, 0.5, 0.5]) - 0.04 * 4.0).abs() < 1e-15);
        assert_eq!(m.quad_form(&[0.5, -0.25, -0.25]), 0.0);
        assert!(RiskModel::new(vec![], vec![], Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array1::zeros(0), -1.0).is_err());
    }

    #[test]
    fn operator_matches_dense_and_solver_inverts() {
        let m = random_model(10, 3, 7, 1e-6);
        let dense = m.dense().unwrap();
        let mut s = SeededStream::new(8, 0, 0);
        for _ in 0..20 {
            let w: Vec<f64> = (0..10).map(|_| s.standard_normal()).collect();
            let wa = Array1::from(w.clone());
            assert!((m.quad_form(&w) - wa.dot(&dense.dot(&wa))).abs() < 1e-12);
            let mv = m.matvec(&w);
            let dv = dense.dot(&wa);
            assert!(mv.iter().zip(dv.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let subset = [1, 4, 5, 9];
        for (scale, shift) in [(2.0, 0.5), (1.0, 0.0)] {
            let solver = m.shifted_solver(&subset, scale, shift).unwrap();
            let rhs = DVector::from_fn(4, |i, _| i as f64 - 1.5);
            let x = solver.solve(&rhs);
            let sub = to_dmatrix(&dense).select_rows(&subset).select_columns(&subset) * scale
                + DMatrix::identity(4, 4) * shift;
            assert!((sub * x - rhs).amax() < 1e-10);
        }
        let zero = RiskModel { idio_var: Array1::zeros(10), epsilon: 0.0, ..m.clone() };
        assert!(matches!(zero.shifted_solver(&[0, 1, 2], 1.0, 0.0), Ok(ShiftedSolver::Dense(_))));
    }

    #[test]
    fn csv_round_trip() {
        let m = random_model(6, 2, 9, 1e-6);
        let dir = tempfile::tempdir().unwrap();
        m.write_csv(dir.path()).unwrap();
        let back = RiskModel::read_csv(dir.path(), 1e-6).unwrap();
        assert_eq!(back, m);
    }
}
