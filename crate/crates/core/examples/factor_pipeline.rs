//! Parses factor definitions, evaluates them on a synthetic panel and
//! writes one factor in long CSV format to stdout.
//!
//! ```text
//! cargo run --release --example factor_pipeline
//! ```

use crossalpha::factor::pipeline::{evaluate_chunked, Pipeline};
use crossalpha::io::write_factor_csv;
use crossalpha::synth::{generate_market, MarketConfig, PlantedSignalSpec};

const DEFINITIONS: &[&str] = &[
    r#"factor "mom20" = delta(close, 20) / lag(close, 20) |> cross_rank_norm"#,
    r#"factor "vol20" = rolling_std(returns(1), 20) |> cross_rank_norm"#,
    r#"factor "amv10" = alpha_momentum_volume(10)"#,
    r#"factor "beta60" = rolling_beta(60) |> ewma(0.1)"#,
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let market = MarketConfig {
        n_securities: 40,
        n_days: 300,
        ..MarketConfig::default()
    };
    let (panel, _) = generate_market(&market, &PlantedSignalSpec::default(), 3)?;

    let pipelines = DEFINITIONS.iter().map(|d| Pipeline::parse(d)).collect::<Result<Vec<_>, _>>()?;
    for p in &pipelines {
        println!("{:<8} lookback {:>3}  {}", p.name, p.lookback(), p.expr);
    }
    let factors = evaluate_chunked(&panel, &pipelines, 128)?;
    for f in &factors {
        println!("{:<8} {} valid cells, lineage {:?}", f.name, f.values.count_valid(), f.lineage);
    }

    // Last three dates of the momentum factor.
    let tail = 3;
    let start = panel.n_dates() - tail;
    let mom = &factors[0];
    let recent = crossalpha::factor::FactorPanel::new(&mom.name, mom.values.slice_rows(start, panel.n_dates()), vec![]);
    write_factor_csv(&recent, &panel.dates[start..], &panel.securities, std::io::stdout().lock())?;

    if let Err(e) = Pipeline::parse(r#"factor "bad" = rolling_mean(close"#) {
        println!("parse error: {e}");
    }
    Ok(())
}
