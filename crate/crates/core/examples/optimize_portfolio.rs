//! Solves a market- and sector-neutral portfolio, checks its optimality
//! conditions and shows how transaction-cost aversion shrinks turnover.
//!
//! ```text
//! cargo run --release --example optimize_portfolio
//! ```

use crossalpha::optimizer::{solve, verify_kkt, PortfolioConfig, SolverOptions, WarmStart};
use crossalpha::risk::RiskModel;
use crossalpha::rng::SeededStream;
use ndarray::{Array1, Array2};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, k) = (100, 4);
    let mut rng = SeededStream::new(42, 0, 0);
    let securities: Vec<String> = (0..n).map(|i| format!("S{i:03}")).collect();
    let loadings = Array2::from_shape_fn((n, k), |_| rng.standard_normal());
    let factor_cov = Array2::from_shape_fn((k, k), |(a, b)| if a == b { 4e-4 } else { 5e-5 });
    let idio = Array1::from_shape_fn(n, |_| 1e-4 * rng.uniform(1.0, 2.0));
    let risk = RiskModel::new(securities, (0..k).map(|j| format!("f{j}")).collect(), loadings, factor_cov, idio, 1e-6)?;
    let mu: Vec<f64> = (0..n).map(|_| 0.002 * rng.standard_normal()).collect();
    let sectors: Vec<u32> = (0..n as u32).map(|i| i % 5).collect();
    let prev: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();

    let opts = SolverOptions::default();
    let mut warm: Option<WarmStart> = None;
    for gamma in [0.0, 0.5, 1.0, 4.0] {
        let cfg = PortfolioConfig {
            gamma_tc: gamma,
            ..PortfolioConfig::default()
        };
        let problem = cfg.problem(mu.clone(), risk.clone(), prev.clone(), sectors.clone());
        let sol = solve(&problem, warm.as_ref(), &opts)?;
        let turnover: f64 = sol.weights.iter().zip(&prev).map(|(w, p)| (w - p).abs()).sum();
        let gross: f64 = sol.weights.iter().map(|w| w.abs()).sum();
        println!(
            "gamma {gamma:<4} {:?} in {:>4} iters  turnover {turnover:.4}  gross {gross:.4}  kkt {:.1e}",
            sol.status,
            sol.iterations,
            verify_kkt(&problem, &sol).max()
        );
        warm = Some(WarmStart::from(&sol));
    }
    Ok(())
}
