//! IC report with decay profile for a planted signal and a noise factor.
//!
//! ```text
//! cargo run --release --example factor_eval
//! ```

use crossalpha::eval::{evaluate_factors, write_reports_csv, EvalConfig, IcMethod};
use crossalpha::factor::pipeline::{evaluate_chunked, Pipeline};
use crossalpha::synth::{generate_market, MarketConfig, PlantedSignalSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let market = MarketConfig {
        n_securities: 150,
        n_days: 600,
        ..MarketConfig::default()
    };
    let signal = PlantedSignalSpec {
        strength: 0.15,
        horizon: 10,
        seed: 21,
    };
    let (panel, planted) = generate_market(&market, &signal, 21)?;
    let mom = Pipeline::parse(r#"factor "mom20" = delta(close, 20) / lag(close, 20) |> cross_rank_norm"#)?;
    let mut factors = evaluate_chunked(&panel, &[mom], 256)?;
    factors.insert(0, planted);

    let cfg = EvalConfig {
        method: IcMethod::Spearman,
        horizon: 10,
        decay_horizons: vec![1, 5, 10, 20, 40],
        rolling_window: Some(120),
    };
    let reports = evaluate_factors(&factors, &panel, &cfg)?;
    write_reports_csv(&reports, std::io::stdout().lock())?;
    for r in &reports {
        let decay: Vec<String> = r
            .decay_profile
            .iter()
            .map(|(h, ic)| format!("{h}:{}", ic.map_or("-".into(), |v| format!("{v:.3}"))))
            .collect();
        println!("{} decay {}", r.name, decay.join(" "));
    }
    Ok(())
}
