//! Contaminates a planted signal with industry and size exposure, then
//! removes it and compares the information coefficient before and after.
//!
//! ```text
//! cargo run --release --example neutralize_factors
//! ```

use crossalpha::eval::{information_coefficient, IcMethod};
use crossalpha::neutralize::{neutralize, NeutralizationConfig, Stage};
use crossalpha::panel::{equal_weight_market_returns, forward_returns};
use crossalpha::synth::{confound, generate_market, MarketConfig, PlantedSignalSpec};

fn mean_ic(f: &crossalpha::factor::FactorPanel, r: &crossalpha::panel::ReturnPanel) -> Result<f64, Box<dyn std::error::Error>> {
    let ic = information_coefficient(f, r, IcMethod::Pearson)?;
    let v: Vec<f64> = ic.values.iter().flatten().copied().collect();
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let market = MarketConfig {
        n_securities: 200,
        n_days: 500,
        ..MarketConfig::default()
    };
    let signal = PlantedSignalSpec {
        strength: 0.1,
        horizon: 5,
        seed: 5,
    };
    let (panel, planted) = generate_market(&market, &signal, 5)?;
    let dirty = confound(&planted, &panel, 1.0, 0.5, 99);
    let fwd = forward_returns(&panel, signal.horizon)?;
    let market_returns = equal_weight_market_returns(&panel);

    println!("clean      IC {:.4}", mean_ic(&planted, &fwd)?);
    println!("confounded IC {:.4}", mean_ic(&dirty, &fwd)?);
    for stages in [vec![Stage::Industry], vec![Stage::Industry, Stage::Size], vec![Stage::IndustrySize]] {
        let cfg = NeutralizationConfig {
            stages: stages.clone(),
            ..NeutralizationConfig::default()
        };
        let (out, reports) = neutralize(
            std::slice::from_ref(&dirty),
            &panel,
            market_returns.as_slice().unwrap(),
            &cfg,
            0..panel.n_dates(),
        )?;
        let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
        println!(
            "{:<20} IC {:.4}  ({} coefficients recorded)",
            names.join("+"),
            mean_ic(&out[0], &fwd)?,
            reports[0].records.len()
        );
    }
    Ok(())
}
