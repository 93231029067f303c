//! Estimates a factor risk model and compares predicted with realized
//! portfolio volatility for a few random books.
//!
//! ```text
//! cargo run --release --example risk_model
//! ```

use crossalpha::factor::pipeline::{evaluate_chunked, Pipeline};
use crossalpha::panel::forward_returns;
use crossalpha::risk::{estimate_at, factor_returns, RiskConfig};
use crossalpha::rng::SeededStream;
use crossalpha::synth::{generate_market, MarketConfig, PlantedSignalSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let market = MarketConfig {
        n_securities: 120,
        n_days: 800,
        ..MarketConfig::default()
    };
    let (panel, _) = generate_market(&market, &PlantedSignalSpec::default(), 8)?;
    let defs = [
        r#"factor "mom20" = delta(close, 20) / lag(close, 20)"#,
        r#"factor "vol20" = rolling_std(returns(1), 20)"#,
        r#"factor "beta60" = rolling_beta(60)"#,
    ];
    let pipelines = defs.iter().map(|d| Pipeline::parse(d)).collect::<Result<Vec<_>, _>>()?;
    let factors = evaluate_chunked(&panel, &pipelines, 256)?;
    let daily = forward_returns(&panel, 1)?;
    let fr = factor_returns(&factors, &daily)?;

    let t = 500;
    let model = estimate_at(&factors, &fr, &daily, t, &panel.securities, &RiskConfig::default())?;
    println!("factor covariance (daily):\n{:.3e}", model.factor_cov);
    let mean_idio = model.idio_var.mean().unwrap_or(f64::NAN);
    println!("mean idiosyncratic vol (annual) {:.3}", (mean_idio * 252.0).sqrt());

    let mut rng = SeededStream::new(1, 0, 0);
    let n = panel.n_securities();
    for book in 0..3 {
        let w: Vec<f64> = (0..n).map(|_| rng.standard_normal() / n as f64).collect();
        let predicted = model.quad_form(&w).sqrt();
        let realized: Vec<f64> = (t..t + 250)
            .map(|s| (0..n).filter_map(|i| daily.returns.get(s, i).map(|r| r * w[i])).sum())
            .collect();
        let m = realized.iter().sum::<f64>() / realized.len() as f64;
        let sd = (realized.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (realized.len() - 1) as f64).sqrt();
        println!("book {book}: predicted daily vol {predicted:.5}, realized {sd:.5}");
    }
    Ok(())
}
