//! Times factor pipelines on a random 512×128 panel, whole and in chunks.
//!
//! ```text
//! cargo run --release --example kernel_throughput
//! ```

use std::time::Instant;

use crossalpha::factor::pipeline::{evaluate, evaluate_chunked, Pipeline};
use crossalpha::synth::{generate_market, MarketConfig, PlantedSignalSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let market = MarketConfig {
        n_securities: 128,
        n_days: 512,
        ..MarketConfig::default()
    };
    let (panel, _) = generate_market(&market, &PlantedSignalSpec::default(), 1)?;
    let defs = [
        r#"factor "vol15" = rolling_std(close, 15) |> ewma(0.3)"#,
        r#"factor "mom5" = delta(close, 5) / lag(close, 5) |> cross_rank_norm"#,
        r#"factor "cov12" = rolling_cov(close, volume, 12) - cs_mean(close)"#,
        r#"factor "range8" = rolling_max(high, 8) - rolling_min(low, 8) |> rolling_sum(4)"#,
        r#"factor "amv10" = alpha_momentum_volume(10)"#,
        r#"factor "beta30" = rolling_beta(30) |> cross_rank"#,
    ];
    let pipelines: Vec<Pipeline> = defs.iter().map(|d| Pipeline::parse(d)).collect::<Result<_, _>>()?;
    let reps = 20;
    for p in &pipelines {
        let started = Instant::now();
        for _ in 0..reps {
            evaluate(&panel, p)?;
        }
        let per = started.elapsed() / reps;
        let cells = (panel.n_dates() * panel.n_securities()) as f64;
        println!("{:<8} {:>10.2?}  {:>7.1} Mcells/s", p.name, per, cells / per.as_secs_f64() / 1e6);
    }
    let lookback = pipelines.iter().map(Pipeline::lookback).max().unwrap_or(0);
    for chunk in [lookback.max(1), 100, panel.n_dates()] {
        let started = Instant::now();
        evaluate_chunked(&panel, &pipelines, chunk)?;
        println!("all pipelines, chunk {chunk:>4}: {:.2?}", started.elapsed());
    }
    Ok(())
}
