//! Simulates a market, checks the GBM calibration of one path and the
//! planted signal's realized correlation.
//!
//! ```text
//! cargo run --release --example synth_market -- [seed]
//! ```

use crossalpha::eval::{information_coefficient, IcMethod};
use crossalpha::panel::forward_returns;
use crossalpha::synth::{estimate_gbm, generate_market, simulate_gbm, GbmParams, MarketConfig, PlantedSignalSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(11), |s| s.parse())?;

    let params = GbmParams {
        mu: 0.08,
        sigma: 0.25,
        dt: 1.0 / 252.0,
        s0: 50.0,
    };
    let path = simulate_gbm(&params, 252 * 20, seed);
    let fit = estimate_gbm(&path, params.dt)?;
    println!("gbm   true mu {:.3} sigma {:.3}", params.mu, params.sigma);
    println!("gbm   fit  mu {:.3} sigma {:.3}", fit.mu, fit.sigma);

    let market = MarketConfig {
        n_securities: 150,
        n_days: 750,
        ..MarketConfig::default()
    };
    let signal = PlantedSignalSpec {
        strength: 0.2,
        horizon: 10,
        seed,
    };
    let (panel, planted) = generate_market(&market, &signal, seed)?;
    println!(
        "panel {} securities, {} days, {} industries, {} .. {}",
        panel.n_securities(),
        panel.n_dates(),
        panel.n_industries(),
        panel.dates[0],
        panel.dates[panel.n_dates() - 1]
    );
    let fwd = forward_returns(&panel, signal.horizon)?;
    let ic = information_coefficient(&planted, &fwd, IcMethod::Pearson)?;
    let vals: Vec<f64> = ic.values.iter().flatten().copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    println!("signal target {:.2}, realized mean IC {mean:.4} over {} dates", signal.strength, vals.len());
    Ok(())
}
