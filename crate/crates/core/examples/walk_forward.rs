//! Walk-forward backtest of a planted signal on a synthetic market.
//!
//! ```text
//! cargo run --release --example walk_forward -- [seed] [strength]
//! ```

use crossalpha::backtest::{attribution_report, run_backtest, BacktestConfig};
use crossalpha::synth::{generate_market, MarketConfig, PlantedSignalSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(7), |s| s.parse())?;
    let strength: f64 = args.next().map_or(Ok(0.3), |s| s.parse())?;

    // 1250 training days, a 20-day purge, 750 test days and 20 days of
    // forward-return tail that the planted signal cannot cover.
    let market = MarketConfig {
        n_securities: 200,
        n_days: 2041,
        ..MarketConfig::default()
    };
    let signal = PlantedSignalSpec {
        strength,
        horizon: 20,
        seed,
    };
    let (panel, factor) = generate_market(&market, &signal, seed)?;
    let cfg = BacktestConfig {
        test_end: Some(panel.dates[2020]),
        cost_rate: 0.0,
        ..BacktestConfig::default()
    };
    let factors = vec![factor];
    let started = std::time::Instant::now();
    let result = run_backtest(&panel, &factors, &cfg)?;
    let elapsed = started.elapsed();

    let m = &result.metrics;
    println!("rebalances       {}", result.rebalances.len());
    println!("annual return    {:.4}", m.annualized_return);
    println!("annual vol       {:.4}", m.annualized_vol);
    println!("sharpe           {:?}", m.sharpe);
    println!("max drawdown     {:.4}", m.max_drawdown);
    println!("mean turnover    {:?}", m.mean_turnover);
    println!(
        "solver iters     {}",
        result.rebalances.iter().map(|r| r.iterations).sum::<usize>()
    );
    let attribution = attribution_report(&result, &panel, &factors)?;
    for (name, c) in &attribution.factors {
        println!("attribution      {name}: {c:.4}");
    }
    println!("residual         {:.4}", attribution.residual);
    println!("elapsed          {elapsed:.2?}");
    Ok(())
}
