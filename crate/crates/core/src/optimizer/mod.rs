//! Market-neutral mean-variance portfolio construction with linear
//! transaction costs, position limits, a gross leverage cap and sector
//! neutrality.
//!
//! The problem is solved in minimization form,
//!
//! ```text
//! min  (λ/2) wᵀΣ̃w − μ̂ᵀw + γ Σ c_i |w_i − w_prev,i|
//! s.t. Aw = 0,  |w_i| ≤ w_max,  Σ|w_i| ≤ L
//! ```
//!
//! by ADMM on the split `x = z`: the `x` step is the equality-constrained
//! quadratic (solved through the risk model's shifted operator and a small
//! Schur complement), and the `z` step is the exact prox of the cost, box
//! and leverage terms. Once the iterates settle, a polish step fixes the
//! coordinates sitting on kinks or bounds and solves the remaining KKT
//! system directly. A solution is reported optimal only after
//! [`verify_kkt`] passes.

pub mod prox;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{independent_columns, lstsq};
use crate::risk::{RiskError, RiskModel};

pub use prox::{prox_scalar, prox_vector};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioProblem {
    pub securities: Vec<String>,
    pub mu_hat: Vec<f64>,
    /// Must list the same securities in the same order.
    pub risk: RiskModel,
    pub lambda_risk: f64,
    pub gamma_tc: f64,
    pub costs: Vec<f64>,
    pub prev_weights: Vec<f64>,
    pub w_max: f64,
    pub leverage: f64,
    /// Sector code per security; every sector's net weight is held at zero.
    pub sectors: Option<Vec<u32>>,
    /// Net weight across all securities held at zero.
    pub market_neutral: bool,
}

/// Default per-unit-turnover cost.
pub const DEFAULT_COST: f64 = 0.0015;

impl PortfolioProblem {
    pub fn n(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let n = self.n();
        let bad = |m: String| Err(OptimizerError::Problem(m));
        if self.securities.len() != n || self.costs.len() != n || self.prev_weights.len() != n || self.risk.n() != n {
            return bad(format!(
                "lengths differ: {} ids, {} mu, {} costs, {} prev, risk N = {}",
                self.securities.len(),
                n,
                self.costs.len(),
                self.prev_weights.len(),
                self.risk.n()
            ));
        }
        if self.risk.securities != self.securities {
            return bad("risk model securities do not match the problem".into());
        }
        if let Some(s) = &self.sectors {
            if s.len() != n {
                return bad(format!("{} sector codes for {n} securities", s.len()));
            }
        }
        if self.mu_hat.iter().chain(&self.prev_weights).any(|v| !v.is_finite()) {
            return bad("mu_hat and prev_weights must be finite".into());
        }
        if self.costs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return bad("costs must be finite and ≥ 0".into());
        }
        if !(self.lambda_risk >= 0.0) || !(self.gamma_tc >= 0.0) || !self.lambda_risk.is_finite() || !self.gamma_tc.is_finite() {
            return bad("lambda_risk and gamma_tc must be finite and ≥ 0".into());
        }
        if !(self.w_max > 0.0) || !(self.leverage > 0.0) {
            return bad("w_max and leverage must be > 0".into());
        }
        let gross: f64 = self.prev_weights.iter().map(|w| w.abs()).sum();
        if gross > self.leverage + 1e-9 {
            log::warn!("previous weights have gross exposure {gross} above the leverage limit {}", self.leverage);
        }
        Ok(())
    }

    /// Equality constraint rows: the market row, then one row per sector
    /// (codes ascending).
    pub fn constraint_rows(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut rows = Vec::new();
        if self.market_neutral {
            rows.push(vec![1.0; n]);
        }
        if let Some(s) = &self.sectors {
            let mut codes = s.clone();
            codes.sort_unstable();
            codes.dedup();
            for c in codes {
                rows.push(s.iter().map(|&x| if x == c { 1.0 } else { 0.0 }).collect());
            }
        }
        rows
    }

    fn cost_weights(&self) -> Vec<f64> {
        self.costs.iter().map(|c| self.gamma_tc * c).collect()
    }

    /// `μ̂ᵀw − (λ/2)wᵀΣ̃w − γ Σ c_i|w_i − w_prev,i|` (to be maximized).
    pub fn objective(&self, w: &[f64]) -> f64 {
        let ret: f64 = self.mu_hat.iter().zip(w).map(|(m, x)| m * x).sum();
        let cost: f64 = (0..self.n())
            .map(|i| self.gamma_tc * self.costs[i] * (w[i] - self.prev_weights[i]).abs())
            .sum();
        ret - 0.5 * self.lambda_risk * self.risk.quad_form(w) - cost
    }

    pub fn residuals(&self, w: &[f64]) -> ConstraintResiduals {
        let sum_w = w.iter().sum();
        let mut sector_sums = Vec::new();
        if let Some(s) = &self.sectors {
            let mut codes = s.clone();
            codes.sort_unstable();
            codes.dedup();
            for c in codes {
                sector_sums.push(w.iter().zip(s).filter(|(_, &x)| x == c).map(|(v, _)| v).sum());
            }
        }
        let gross: f64 = w.iter().map(|x| x.abs()).sum();
        ConstraintResiduals {
            sum_w,
            sector_sums,
            max_position_violation: w.iter().map(|x| (x.abs() - self.w_max).max(0.0)).fold(0.0, f64::max),
            leverage_slack: self.leverage - gross,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    pub sum_w: f64,
    pub sector_sums: Vec<f64>,
    /// `max_i max(|w_i| − w_max, 0)`.
    pub max_position_violation: f64,
    /// `L − Σ|w_i|`; negative when violated.
    pub leverage_slack: f64,
}

impl ConstraintResiduals {
    /// Largest absolute violation across all constraints.
    pub fn max_violation(&self, market_neutral: bool) -> f64 {
        let mut v = self.max_position_violation.max((-self.leverage_slack).max(0.0));
        if market_neutral {
            v = v.max(self.sum_w.abs());
        }
        self.sector_sums.iter().fold(v, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Multipliers and solver state carried between solves.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    /// One per row of [`PortfolioProblem::constraint_rows`].
    pub nu: Vec<f64>,
    /// Leverage multiplier.
    pub theta: f64,
    /// Scaled ADMM dual of the `x = z` split.
    pub u: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioSolution {
    pub securities: Vec<String>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub residuals: ConstraintResiduals,
    pub iterations: usize,
    pub warm_started: bool,
    pub status: SolveStatus,
    pub duals: Duals,
    pub kkt: KktReport,
    /// Explanation when the status is not optimal.
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub over_relaxation: f64,
    /// Initial ADMM penalty; chosen from the problem scale when absent.
    pub rho: Option<f64>,
    /// Iterations between polish attempts.
    pub polish_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50_000,
            over_relaxation: 1.6,
            rho: None,
            polish_every: 10,
        }
    }
}

/// Problem-level settings shared by every rebalance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    pub lambda_risk: f64,
    pub gamma_tc: f64,
    /// Per-unit-turnover cost `c_i`, the same for every security.
    pub cost: f64,
    pub w_max: f64,
    pub leverage: f64,
    pub market_neutral: bool,
    /// Hold each industry's net weight at zero.
    pub sector_neutral: bool,
    pub solver: SolverOptions,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            lambda_risk: 10.0,
            gamma_tc: 1.0,
            cost: DEFAULT_COST,
            w_max: 0.05,
            leverage: 2.0,
            market_neutral: true,
            sector_neutral: true,
            solver: SolverOptions::default(),
        }
    }
}

impl PortfolioConfig {
    /// Assembles a problem; `sectors` is used only when sector neutrality is on.
    pub fn problem(&self, mu_hat: Vec<f64>, risk: RiskModel, prev_weights: Vec<f64>, sectors: Vec<u32>) -> PortfolioProblem {
        let n = mu_hat.len();
        PortfolioProblem {
            securities: risk.securities.clone(),
            mu_hat,
            risk,
            lambda_risk: self.lambda_risk,
            gamma_tc: self.gamma_tc,
            costs: vec![self.cost; n],
            prev_weights,
            w_max: self.w_max,
            leverage: self.leverage,
            sectors: self.sector_neutral.then_some(sectors),
            market_neutral: self.market_neutral,
        }
    }
}

/// Prior solution used to initialize a solve, matched by security id.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub securities: Vec<String>,
    pub weights: Vec<f64>,
    pub u: Vec<f64>,
    pub rho: f64,
}

impl From<&PortfolioSolution> for WarmStart {
    fn from(s: &PortfolioSolution) -> Self {
        Self {
            securities: s.securities.clone(),
            weights: s.weights.clone(),
            u: s.duals.u.clone(),
            rho: s.duals.rho,
        }
    }
}

/// Maximum violation of each KKT condition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Points within this distance of a kink or bound count as sitting on it.
pub const KINK_TOL: f64 = 1e-10;

/// Checks the KKT conditions of `weights` with multipliers `nu`, `theta`.
///
/// Stationarity is the largest distance from `−∇(smooth part)_i − (Aᵀν)_i`
/// to the subdifferential of the cost, leverage and box terms at `w_i`.
pub fn verify_kkt_with(problem: &PortfolioProblem, weights: &[f64], nu: &[f64], theta: f64) -> KktReport {
    let n = problem.n();
    let rows = problem.constraint_rows();
    let sigma_w = problem.risk.matvec(weights);
    let a = problem.cost_weights();
    let mut stationarity: f64 = 0.0;
    for i in 0..n {
        let mut g = problem.lambda_risk * sigma_w[i] - problem.mu_hat[i];
        for (r, row) in rows.iter().enumerate() {
            g += row[i] * nu.get(r).copied().unwrap_or(0.0);
        }
        let target = -g;
        let (mut lo, mut hi) = (0.0, 0.0);
        let mut add = |coef: f64, x: f64| {
            if coef <= 0.0 {
                return;
            }
            if x.abs() <= KINK_TOL {
                lo -= coef;
                hi += coef;
            } else {
                lo += coef * x.signum();
                hi += coef * x.signum();
            }
        };
        add(a[i], weights[i] - problem.prev_weights[i]);
        add(theta.max(0.0), weights[i]);
        if weights[i] >= problem.w_max - KINK_TOL {
            hi = f64::INFINITY;
        }
        if weights[i] <= -problem.w_max + KINK_TOL {
            lo = f64::NEG_INFINITY;
        }
        let d = (lo - target).max(target - hi).max(0.0);
        stationarity = stationarity.max(d);
    }
    let res = problem.residuals(weights);
    let slack = res.leverage_slack;
    KktReport {
        stationarity,
        primal: res.max_violation(problem.market_neutral),
        dual: (-theta).max(0.0),
        complementarity: (theta.max(0.0) * slack).abs(),
    }
}

/// KKT check of a solution using its own multipliers.
pub fn verify_kkt(problem: &PortfolioProblem, solution: &PortfolioSolution) -> KktReport {
    verify_kkt_with(problem, &solution.weights, &solution.duals.nu, solution.duals.theta)
}

/// Solver workspace for one penalty value.
struct XStep {
    solver: crate::risk::ShiftedSolver,
    minv_at: DMatrix<f64>,
    schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn x_step_factor(problem: &PortfolioProblem, a: &DMatrix<f64>, rho: f64) -> Result<XStep, OptimizerError> {
    let all: Vec<usize> = (0..problem.n()).collect();
    let solver = problem.risk.shifted_solver(&all, problem.lambda_risk, rho)?;
    let minv_at = solver.solve_many(&a.transpose());
    let schur = (a * &minv_at).lu();
    Ok(XStep { solver, minv_at, schur })
}

fn x_step(xs: &XStep, a: &DMatrix<f64>, q: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let minv_q = xs.solver.solve(q);
    if a.nrows() == 0 {
        return (minv_q, DVector::zeros(0));
    }
    let nu = xs.schur.solve(&(a * &minv_q)).unwrap_or_else(|| DVector::zeros(a.nrows()));
    (minv_q - &xs.minv_at * &nu, nu)
}

/// Solves the KKT system with the coordinates outside `free` fixed at `w`.
///
/// `lev_signs` adds the active leverage row `Σ s_i w_i = L` with multiplier
/// `θ`. Returns the new weights and the multipliers of `rows` and `θ`.
fn polish(
    problem: &PortfolioProblem,
    rows: &[Vec<f64>],
    w: &[f64],
    free: &[usize],
    lin: &[f64],
    lev_signs: Option<&[f64]>,
) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let n = problem.n();
    let is_free = {
        let mut v = vec![false; n];
        for &i in free {
            v[i] = true;
        }
        v
    };
    let fixed: Vec<f64> = (0..n).map(|i| if is_free[i] { 0.0 } else { w[i] }).collect();
    let sigma_fixed = problem.risk.matvec(&fixed);
    let f = free.len();
    let m = rows.len();
    let r = m + usize::from(lev_signs.is_some());
    // Constraint block restricted to the free coordinates and its right-hand side.
    let c = DMatrix::from_fn(r, f, |row, col| {
        let i = free[col];
        if row < m {
            rows[row][i]
        } else {
            lev_signs.unwrap()[i]
        }
    });
    let d = DVector::from_fn(r, |row, _| {
        if row < m {
            -(0..n).map(|i| rows[row][i] * fixed[i]).sum::<f64>()
        } else {
            problem.leverage - fixed.iter().map(|x| x.abs()).sum::<f64>()
        }
    });
    let b = DVector::from_fn(f, |col, _| {
        let i = free[col];
        problem.mu_hat[i] - lin[i] - problem.lambda_risk * sigma_fixed[i]
    });
    let (wf, y) = if problem.lambda_risk > 0.0 && f > 0 {
        let solver = problem.risk.shifted_solver(free, problem.lambda_risk, 0.0).ok()?;
        let minv_b = solver.solve(&b);
        if r == 0 {
            (minv_b, DVector::zeros(0))
        } else {
            let minv_ct = solver.solve_many(&c.transpose());
            let s = &c * &minv_ct;
            let y = lstsq(&s, &(&c * &minv_b - &d));
            (minv_b - minv_ct * &y, y)
        }
    } else {
        // No curvature: solve the full (possibly singular) KKT matrix.
        let dim = f + r;
        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        if f > 0 {
            let dense = problem.risk.subset(free).dense().ok()?;
            for p in 0..f {
                for q in 0..f {
                    k[(p, q)] = problem.lambda_risk * dense[[p, q]];
                }
                rhs[p] = b[p];
            }
        }
        for row in 0..r {
            for col in 0..f {
                k[(f + row, col)] = c[(row, col)];
                k[(col, f + row)] = c[(row, col)];
            }
            rhs[f + row] = d[row];
        }
        let sol = lstsq(&k, &rhs);
        (sol.rows(0, f).into_owned(), sol.rows(f, r).into_owned())
    };
    let mut out = fixed;
    for (col, &i) in free.iter().enumerate() {
        out[i] = wf[col];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let nu: Vec<f64> = (0..m).map(|k| y[k]).collect();
    let theta = if lev_signs.is_some() { y[m] } else { 0.0 };
    Some((out, nu, theta))
}

/// Builds and checks polished candidates from the prox output `z`.
fn try_polish(problem: &PortfolioProblem, rows: &[Vec<f64>], z: &[f64], theta: f64, tol: f64) -> Option<(Vec<f64>, Vec<f64>, f64, KktReport)> {
    let n = problem.n();
    let a = problem.cost_weights();
    let gross: f64 = z.iter().map(|v| v.abs()).sum();
    let mut options = vec![theta > 0.0 || gross >= problem.leverage - 1e-12];
    options.push(!options[0]);
    for lev_active in options {
        let mut free = Vec::new();
        let mut lin = vec![0.0; n];
        let mut signs = vec![0.0; n];
        for i in 0..n {
            let zi = z[i];
            let on_bound = zi.abs() == problem.w_max;
            let on_zero = lev_active && zi == 0.0;
            let on_prev = a[i] > 0.0 && zi == problem.prev_weights[i];
            if on_bound || on_zero || on_prev {
                signs[i] = zi.signum() * f64::from(zi != 0.0);
                continue;
            }
            free.push(i);
            if a[i] > 0.0 {
                lin[i] = a[i] * (zi - problem.prev_weights[i]).signum();
            }
            signs[i] = zi.signum();
        }
        let (w, nu, th) = match polish(problem, rows, z, &free, &lin, lev_active.then_some(&signs[..])) {
            Some(p) => p,
            None => continue,
        };
        let report = verify_kkt_with(problem, &w, &nu, th);
        if report.passes(tol) {
            return Some((w, nu, th, report));
        }
    }
    None
}

/// Solves one portfolio problem.
pub fn solve(problem: &PortfolioProblem, warm: Option<&WarmStart>, opts: &SolverOptions) -> Result<PortfolioSolution, OptimizerError> {
    problem.validate()?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(OptimizerError::Problem("tol must be > 0 and max_iter ≥ 1".into()));
    }
    let n = problem.n();
    let rows_all = problem.constraint_rows();
    // Linearly independent equality rows; dependent rows keep a zero multiplier.
    let kept_rows = if rows_all.is_empty() {
        Vec::new()
    } else {
        let at = DMatrix::from_fn(n, rows_all.len(), |i, r| rows_all[r][i]);
        independent_columns(&at, 1e-10)
    };
    let rows: Vec<Vec<f64>> = kept_rows.iter().map(|&r| rows_all[r].clone()).collect();
    let a_mat = DMatrix::from_fn(rows.len(), n, |r, i| rows[r][i]);
    let expand_nu = |nu: &[f64]| {
        let mut full = vec![0.0; rows_all.len()];
        for (k, &r) in kept_rows.iter().enumerate() {
            full[r] = nu[k];
        }
        full
    };
    let a_cost = problem.cost_weights();

    let mut z = vec![0.0; n];
    let mut u = vec![0.0; n];
    let diag_scale = (0..n)
        .map(|i| problem.risk.idio_var[i] + problem.risk.epsilon + {
            let b = problem.risk.loadings.row(i);
            b.dot(&problem.risk.factor_cov.dot(&b))
        })
        .sum::<f64>()
        / n.max(1) as f64;
    let mu_scale = problem.mu_hat.iter().fold(0.0f64, |m, v| m.max(v.abs())) / problem.w_max;
    let mut rho = opts.rho.unwrap_or((problem.lambda_risk * diag_scale).max(mu_scale).max(1e-8));
    let mut warm_started = false;
    if let Some(ws) = warm {
        let index: HashMap<&str, usize> = ws.securities.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        for (i, id) in problem.securities.iter().enumerate() {
            if let Some(&k) = index.get(id.as_str()) {
                z[i] = ws.weights[k].clamp(-problem.w_max, problem.w_max);
                u[i] = ws.u.get(k).copied().unwrap_or(0.0);
            }
        }
        if ws.rho > 0.0 && ws.rho.is_finite() {
            rho = ws.rho;
        }
        warm_started = true;
    }

    let finish = |w: Vec<f64>, nu: Vec<f64>, theta: f64, u: Vec<f64>, rho: f64, iterations: usize, status: SolveStatus, kkt: KktReport, message: Option<String>| {
        PortfolioSolution {
            securities: problem.securities.clone(),
            objective: problem.objective(&w),
            residuals: problem.residuals(&w),
            weights: w,
            iterations,
            warm_started,
            status,
            duals: Duals {
                nu: expand_nu(&nu),
                theta,
                u,
                rho,
            },
            kkt,
            message,
        }
    };

    if warm_started {
        let gross: f64 = z.iter().map(|v| v.abs()).sum();
        let theta_guess = if gross >= problem.leverage - 1e-12 { 1.0 } else { 0.0 };
        if let Some((w, nu, th, kkt)) = try_polish(problem, &rows, &z, theta_guess, opts.tol) {
            return Ok(finish(w, nu, th, u, rho, 0, SolveStatus::Optimal, kkt, None));
        }
    }

    let mut xs = x_step_factor(problem, &a_mat, rho)?;
    let mut theta = 0.0;
    let mut nu = DVector::zeros(rows.len());
    let alpha = opts.over_relaxation;
    for it in 1..=opts.max_iter {
        let q = DVector::from_fn(n, |i, _| problem.mu_hat[i] + rho * (z[i] - u[i]));
        let (x, nu_new) = x_step(&xs, &a_mat, &q);
        nu = nu_new;
        let x_hat: Vec<f64> = (0..n).map(|i| alpha * x[i] + (1.0 - alpha) * z[i]).collect();
        let v: Vec<f64> = (0..n).map(|i| x_hat[i] + u[i]).collect();
        let (z_new, th) = prox_vector(&v, rho, &a_cost, &problem.prev_weights, problem.w_max, problem.leverage);
        theta = th;
        let mut r_prim: f64 = 0.0;
        let mut r_dual: f64 = 0.0;
        for i in 0..n {
            u[i] += x_hat[i] - z_new[i];
            r_prim = r_prim.max((x[i] - z_new[i]).abs());
            r_dual = r_dual.max(rho * (z_new[i] - z[i]).abs());
        }
        z = z_new;

        if it % opts.polish_every.max(1) == 0 || (r_prim <= opts.tol && r_dual <= opts.tol) {
            if let Some((w, nu_p, th, kkt)) = try_polish(problem, &rows, &z, theta, opts.tol) {
                return Ok(finish(w, nu_p, th, u, rho, it, SolveStatus::Optimal, kkt, None));
            }
            if r_prim <= opts.tol && r_dual <= opts.tol {
                let nu_v: Vec<f64> = nu.iter().copied().collect();
                let kkt = verify_kkt_with(problem, &z, &nu_v, theta);
                if kkt.passes(opts.tol) {
                    return Ok(finish(z, nu_v, theta, u, rho, it, SolveStatus::Optimal, kkt, None));
                }
            }
        }
        if it % 10 == 0 {
            let scale = if r_prim > 10.0 * r_dual {
                2.0
            } else if r_dual > 10.0 * r_prim {
                0.5
            } else {
                1.0
            };
            if scale != 1.0 && (rho * scale).is_finite() && rho * scale > 1e-12 {
                rho *= scale;
                for ui in u.iter_mut() {
                    *ui /= scale;
                }
                xs = x_step_factor(problem, &a_mat, rho)?;
            }
        }
    }
    let nu_v: Vec<f64> = nu.iter().copied().collect();
    let kkt = verify_kkt_with(problem, &z, &nu_v, theta);
    Ok(finish(
        z,
        nu_v,
        theta,
        u,
        rho,
        opts.max_iter,
        SolveStatus::MaxIter,
        kkt,
        Some(format!("no KKT-verified point within {} iterations", opts.max_iter)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartPolicy {
    None,
    #[default]
    Previous,
}

/// Solves a time-ordered list of problems, optionally warm-starting each
/// from the previous solution.
pub fn rebalance_sequence(
    problems: &[PortfolioProblem],
    policy: WarmStartPolicy,
    opts: &SolverOptions,
) -> Result<Vec<PortfolioSolution>, OptimizerError> {
    let mut out: Vec<PortfolioSolution> = Vec::with_capacity(problems.len());
    for p in problems {
        let warm = match (policy, out.last()) {
            (WarmStartPolicy::Previous, Some(prev)) => Some(WarmStart::from(prev)),
            _ => None,
        };
        out.push(solve(p, warm.as_ref(), opts)?);
    }
    Ok(out)
}

/// Writes `security_id,weight` rows.
pub fn write_weights_csv<W: std::io::Write>(solution: &PortfolioSolution, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["security_id", "weight"])?;
    for (id, x) in solution.securities.iter().zip(&solution.weights) {
        w.write_record([id.clone(), x.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;
    use ndarray::{Array1, Array2};

    fn identity_risk(n: usize) -> RiskModel {
        RiskModel::new(
            (0..n).map(|i| format!("S{i}")).collect(),
            vec![],
            Array2::zeros((n, 0)),
            Array2::zeros((0, 0)),
            Array1::ones(n),
            0.0,
        )
        .unwrap()
    }

    fn two_asset() -> PortfolioProblem {
        PortfolioProblem {
            securities: vec!["S0".into(), "S1".into()],
            mu_hat: vec![1.0, -1.0],
            risk: identity_risk(2),
            lambda_risk: 1.0,
            gamma_tc: 0.0,
            costs: vec![DEFAULT_COST; 2],
            prev_weights: vec![0.0; 2],
            w_max: 0.5,
            leverage: 2.0,
            sectors: Some(vec![0, 0]),
            market_neutral: true,
        }
    }

    #[test]
    fn analytic_two_asset() {
        let p = two_asset();
        let s = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.weights[0] - 0.5).abs() < 1e-9 && (s.weights[1] + 0.5).abs() < 1e-9);
        assert!(verify_kkt(&p, &s).passes(1e-8));
        assert!(!s.warm_started);

        let mut bumped = s.clone();
        bumped.weights[0] += 0.01;
        assert!(verify_kkt(&p, &bumped).stationarity > 1e-3 || verify_kkt(&p, &bumped).primal > 1e-3);
    }

    #[test]
    fn interior_optimum_is_the_linear_solve() {
        let mut p = two_asset();
        p.sectors = None;
        p.market_neutral = false;
        p.mu_hat = vec![0.1, -0.2];
        p.w_max = 10.0;
        p.leverage = 10.0;
        let s = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.weights[0] - 0.1).abs() < 1e-9 && (s.weights[1] + 0.2).abs() < 1e-9);
    }

    #[test]
    fn huge_cost_keeps_previous_weights() {
        let mut p = two_asset();
        p.prev_weights = vec![0.2, -0.2];
        p.gamma_tc = 1e6;
        let s = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.weights[0] - 0.2).abs() < 1e-12 && (s.weights[1] + 0.2).abs() < 1e-12);
    }

    fn random_problem(n: usize, k: usize, seed: u64) -> PortfolioProblem {
        let mut s = SeededStream::new(seed, 3, 0);
        let ids: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
        let b = Array2::from_shape_fn((n, k), |_| s.standard_normal());
        let g = Array2::from_shape_fn((k, k), |_| 0.02 * s.standard_normal());
        let omega = g.dot(&g.t());
        let risk = RiskModel::new(
            ids.clone(),
            (0..k).map(|j| format!("F{j}")).collect(),
            b,
            (&omega + &omega.t()) * 0.5,
            Array1::from_shape_fn(n, |_| s.uniform(1e-4, 4e-4)),
            1e-6,
        )
        .unwrap();
        PortfolioProblem {
            securities: ids,
            mu_hat: (0..n).map(|_| 0.01 * s.standard_normal()).collect(),
            risk,
            lambda_risk: 5.0,
            gamma_tc: 1.0,
            costs: vec![DEFAULT_COST; n],
            prev_weights: (0..n).map(|_| 0.0).collect(),
            w_max: 0.1,
            leverage: 1.0,
            sectors: Some((0..n as u32).map(|i| i % 4).collect()),
            market_neutral: true,
        }
    }

    #[test]
    fn random_instance_is_kkt_optimal() {
        for seed in 0..5 {
            let p = random_problem(60, 3, seed);
            let s = solve(&p, None, &SolverOptions::default()).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal, "seed {seed}: {:?}", s.kkt);
            assert!(s.kkt.passes(1e-8));
            assert!(s.residuals.max_violation(true) <= 1e-8);
            assert!(s.objective >= p.objective(&vec![0.0; 60]) - 1e-12);
        }
    }

    #[test]
    fn warm_start_on_identical_problem_is_fast() {
        let p = random_problem(40, 2, 11);
        let cold = solve(&p, None, &SolverOptions::default()).unwrap();
        let warm = solve(&p, Some(&WarmStart::from(&cold)), &SolverOptions::default()).unwrap();
        assert!(warm.warm_started);
        assert_eq!(warm.status, SolveStatus::Optimal);
        assert!(warm.iterations as f64 <= 0.1 * cold.iterations as f64);
        assert!((warm.objective - cold.objective).abs() <= 2e-8);
    }

    #[test]
    fn weights_csv_header() {
        let s = solve(&two_asset(), None, &SolverOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_weights_csv(&s, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("security_id,weight\n"));
    }

    fn small_problem(seed: u64) -> PortfolioProblem {
        let mut p = random_problem(3, 1, seed);
        p.sectors = None;
        p.w_max = 0.3;
        p.leverage = 0.5;
        p.lambda_risk = 50.0;
        p.gamma_tc = 5.0;
        p.mu_hat = p.mu_hat.iter().map(|m| m * 3.0).collect();
        p.prev_weights = vec![0.05, -0.1, 0.05];
        p
    }

    /// Brute force over the plane Σw = 0 (w = a·e1 + b·e2 with w3 = −a − b).
    fn grid_best(p: &PortfolioProblem) -> f64 {
        let steps = 600;
        let h = 2.0 * p.w_max / steps as f64;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                let w = [-p.w_max + i as f64 * h, -p.w_max + j as f64 * h];
                let w = [w[0], w[1], -w[0] - w[1]];
                if w[2].abs() > p.w_max || w.iter().map(|x| x.abs()).sum::<f64>() > p.leverage {
                    continue;
                }
                best = best.max(p.objective(&w));
            }
        }
        best
    }

    #[test]
    fn matches_grid_search() {
        for seed in 0..4 {
            let p = small_problem(seed);
            let s = solve(&p, None, &SolverOptions::default()).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            let g = grid_best(&p);
            assert!(s.objective >= g - 1e-12, "seed {seed}: {} < {g}", s.objective);
            assert!(s.objective - g < 1e-4, "seed {seed}: grid too far below");
        }
    }

    fn turnover(p: &PortfolioProblem, w: &[f64]) -> f64 {
        w.iter().zip(&p.prev_weights).map(|(a, b)| (a - b).abs()).sum()
    }

    #[test]
    fn turnover_falls_with_cost_aversion() {
        let mut p = random_problem(30, 2, 5);
        p.prev_weights = (0..30).map(|i| if i % 2 == 0 { 0.02 } else { -0.02 }).collect();
        let mut last = f64::INFINITY;
        for gamma in [0.0, 1.0, 5.0, 20.0, 100.0] {
            p.gamma_tc = gamma;
            let s = solve(&p, None, &SolverOptions::default()).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            let t = turnover(&p, &s.weights);
            assert!(t <= last + 1e-9, "gamma {gamma}: {t} > {last}");
            last = t;
        }
    }

    #[test]
    fn scaling_mu_and_lambda_together_keeps_weights() {
        let p = random_problem(25, 2, 8);
        let a = solve(&p, None, &SolverOptions::default()).unwrap();
        let mut q = p.clone();
        q.mu_hat = q.mu_hat.iter().map(|m| m * 4.0).collect();
        q.lambda_risk *= 4.0;
        q.gamma_tc *= 4.0;
        let b = solve(&q, None, &SolverOptions::default()).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn warm_policy_does_not_change_solutions() {
        let mut problems = Vec::new();
        let mut prev = vec![0.0; 30];
        for k in 0..4 {
            let mut p = random_problem(30, 2, 20 + k);
            p.prev_weights = prev.clone();
            let s = solve(&p, None, &SolverOptions::default()).unwrap();
            prev = s.weights.clone();
            problems.push(p);
        }
        let cold = rebalance_sequence(&problems, WarmStartPolicy::None, &SolverOptions::default()).unwrap();
        let warm = rebalance_sequence(&problems, WarmStartPolicy::Previous, &SolverOptions::default()).unwrap();
        for (c, w) in cold.iter().zip(&warm) {
            assert_eq!(c.status, SolveStatus::Optimal);
            assert_eq!(w.status, SolveStatus::Optimal);
            assert!((c.objective - w.objective).abs() < 1e-8);
        }
        assert!(!warm[0].warm_started && warm[1].warm_started);
    }
}
