use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crossalpha::backtest::{self, BacktestError, RunManifest};
use crossalpha::eval::{self, IcMethod};
use crossalpha::factor::pipeline::{evaluate_chunked, Pipeline};
use crossalpha::factor::FactorPanel;
use crossalpha::io::{read_factor_csv, write_factor_csv};
use crossalpha::neutralize;
use crossalpha::optimizer::{self, SolveStatus};
use crossalpha::panel::{self, PricePanel};
use crossalpha::risk::RiskModel;
use crossalpha::synth::{self, PlantedSignalSpec};
use log::info;

use crate::config::RunConfig;
use crate::{BacktestArgs, CliError, EvalArgs, FactorsArgs, NeutralizeArgs, OptimizeArgs, SynthArgs};

pub struct Context {
    pub cfg: RunConfig,
    pub config_text: String,
    pub seed: u64,
}

impl Context {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.config_text, self.seed)
    }

    fn write_manifest(&self, command: &str, path: &Path) -> Result<(), CliError> {
        self.manifest(command).write(path).map_err(io_err(path))
    }

    fn load_panel(&self, path: &Path) -> Result<PricePanel, CliError> {
        panel::load_panel(path, &self.cfg.panel).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Domain(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Sidecar manifest for a single output file: `x.csv` gets `x.manifest.txt`.
fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.manifest.txt"))
}

fn write_factors(dir: &Path, factors: &[FactorPanel], panel: &PricePanel) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for f in factors {
        let path = dir.join(format!("{}.csv", f.name));
        write_factor_csv(f, &panel.dates, &panel.securities, create(&path)?).map_err(domain)?;
    }
    Ok(())
}

/// Reads every `*.csv` in `dir` as a factor named after the file, in name order.
fn read_factors(dir: &Path, panel: &PricePanel) -> Result<Vec<FactorPanel>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Domain(format!("no factor CSVs in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy();
            let file = File::open(p).map_err(io_err(p))?;
            read_factor_csv(&name, &panel.dates, &panel.securities, file)
                .map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<(), CliError> {
    let mut market = ctx.cfg.synth.market.clone();
    if let Some(n) = a.securities {
        market.n_securities = n;
    }
    if let Some(d) = a.days {
        market.n_days = d;
    }
    let signal = PlantedSignalSpec {
        strength: a.signal_strength.unwrap_or(ctx.cfg.synth.signal_strength),
        horizon: ctx.cfg.synth.signal_horizon,
        seed: ctx.seed,
    };
    let (panel, planted) = synth::generate_market(&market, &signal, ctx.seed).map_err(|e| match e {
        synth::SynthError::Config(m) => CliError::Config(m),
        other => domain(other),
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    panel::write_panel(&panel, &a.out).map_err(domain)?;
    if let Some(path) = &a.factor_out {
        write_factor_csv(&planted, &panel.dates, &panel.securities, create(path)?).map_err(domain)?;
    }
    ctx.write_manifest("synth", &sidecar(&a.out))?;
    println!(
        "wrote {} securities × {} days to {}",
        panel.n_securities(),
        panel.n_dates(),
        a.out.display()
    );
    Ok(())
}

pub fn factors(ctx: &Context, a: FactorsArgs) -> Result<(), CliError> {
    let panel = ctx.load_panel(&a.panel)?;
    let pipelines: Vec<Pipeline> = ctx
        .cfg
        .factors
        .definitions
        .iter()
        .map(|d| Pipeline::parse(d).map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    if pipelines.is_empty() {
        return Err(CliError::Config("factors.definitions is empty".into()));
    }
    let factors = evaluate_chunked(&panel, &pipelines, ctx.cfg.factors.chunk_days).map_err(domain)?;
    write_factors(&a.out, &factors, &panel)?;
    ctx.write_manifest("factors", &a.out.join("manifest.txt"))?;
    for f in &factors {
        println!("{}: {} valid cells", f.name, f.values.count_valid());
    }
    Ok(())
}

pub fn neutralize(ctx: &Context, a: NeutralizeArgs) -> Result<(), CliError> {
    let panel = ctx.load_panel(&a.panel)?;
    let factors = read_factors(&a.factors, &panel)?;
    let market = panel::equal_weight_market_returns(&panel);
    let (neutral, reports) = neutralize::neutralize(
        &factors,
        &panel,
        market.as_slice().expect("contiguous"),
        &ctx.cfg.neutralize,
        0..panel.n_dates(),
    )
    .map_err(domain)?;
    write_factors(&a.out, &neutral, &panel)?;
    let report_dir = a.out.join("reports");
    std::fs::create_dir_all(&report_dir).map_err(io_err(&report_dir))?;
    for (f, r) in neutral.iter().zip(&reports) {
        let path = report_dir.join(format!("{}.csv", f.name));
        r.write_csv(create(&path)?, &panel.dates).map_err(domain)?;
    }
    ctx.write_manifest("neutralize", &a.out.join("manifest.txt"))?;
    info!("neutralized {} factors", neutral.len());
    Ok(())
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    let panel = ctx.load_panel(&a.panel)?;
    let factors = read_factors(&a.factors, &panel)?;
    let mut cfg = ctx.cfg.eval.clone();
    if let Some(h) = a.horizon {
        if h == 0 {
            return Err(CliError::Config("--horizon must be ≥ 1".into()));
        }
        cfg.horizon = h;
    }
    match a.method.as_deref() {
        Some("pearson") => cfg.method = IcMethod::Pearson,
        Some("spearman") => cfg.method = IcMethod::Spearman,
        _ => {}
    }
    let reports = eval::evaluate_factors(&factors, &panel, &cfg).map_err(domain)?;
    eval::write_reports_csv(&reports, create(&a.report)?).map_err(domain)?;
    ctx.write_manifest("eval", &sidecar(&a.report))?;
    for r in &reports {
        let ir = r.ir.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"));
        println!("{}: mean IC {:.4}, IR {ir}, {} dates", r.name, r.mean_ic, r.n_dates_used);
    }
    Ok(())
}

pub fn backtest(ctx: &Context, a: BacktestArgs) -> Result<(), CliError> {
    let panel = ctx.load_panel(&a.panel)?;
    let factors = read_factors(&a.factors, &panel)?;
    let result = backtest::run_backtest(&panel, &factors, &ctx.cfg.backtest).map_err(|e| match e {
        BacktestError::Config(m) => CliError::Config(m),
        other => domain(other),
    })?;
    let attribution = backtest::attribution_report(&result, &panel, &factors).map_err(domain)?;
    backtest::write_bundle(&a.out, &result, &attribution, &ctx.manifest("backtest")).map_err(domain)?;
    let m = &result.metrics;
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"));
    println!("annualized return {:.4}", m.annualized_return);
    println!("annualized vol    {:.4}", m.annualized_vol);
    println!("sharpe            {}", opt(m.sharpe));
    println!("max drawdown      {:.4}", m.max_drawdown);
    println!("rebalances        {}", result.rebalances.len());
    Ok(())
}

fn read_keyed<T: std::str::FromStr>(path: &Path, columns: [&str; 2]) -> Result<HashMap<String, T>, CliError> {
    let bad = |m: String| CliError::Domain(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
    if header != columns {
        return Err(bad(format!("expected header {}", columns.join(","))));
    }
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let v = rec[1].parse().map_err(|_| bad(format!("bad value `{}`", &rec[1])))?;
        if out.insert(rec[0].to_string(), v).is_some() {
            return Err(bad(format!("duplicate security `{}`", &rec[0])));
        }
    }
    Ok(out)
}

pub fn optimize(ctx: &Context, a: OptimizeArgs) -> Result<(), CliError> {
    let risk = RiskModel::read_csv(&a.risk, ctx.cfg.risk.epsilon).map_err(domain)?;
    let mu: HashMap<String, f64> = read_keyed(&a.mu, ["security_id", "mu"])?;
    let prev: HashMap<String, f64> = match &a.prev {
        Some(p) => read_keyed(p, ["security_id", "weight"])?,
        None => HashMap::new(),
    };
    let mu_hat: Vec<f64> = risk
        .securities
        .iter()
        .map(|id| mu.get(id).copied().ok_or_else(|| CliError::Domain(format!("no mu for `{id}`"))))
        .collect::<Result<_, _>>()?;
    let prev_w: Vec<f64> = risk.securities.iter().map(|id| prev.get(id).copied().unwrap_or(0.0)).collect();
    let mut cfg = ctx.cfg.optimizer.clone();
    let sectors: Vec<u32> = match &a.sectors {
        Some(p) => {
            let map: HashMap<String, u32> = read_keyed(p, ["security_id", "industry"])?;
            risk.securities
                .iter()
                .map(|id| map.get(id).copied().ok_or_else(|| CliError::Domain(format!("no industry for `{id}`"))))
                .collect::<Result<_, _>>()?
        }
        None => {
            if cfg.sector_neutral {
                log::warn!("no --sectors given; solving without sector constraints");
            }
            cfg.sector_neutral = false;
            Vec::new()
        }
    };
    let problem = cfg.problem(mu_hat, risk, prev_w, sectors);
    let sol = optimizer::solve(&problem, None, &cfg.solver).map_err(domain)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let path = a.out.join("weights.csv");
    optimizer::write_weights_csv(&sol, create(&path)?).map_err(io_err(&path))?;
    ctx.write_manifest("optimize", &a.out.join("manifest.txt"))?;
    let gross: f64 = sol.weights.iter().map(|w| w.abs()).sum();
    println!("status      {:?}", sol.status);
    println!("iterations  {}", sol.iterations);
    println!("objective   {:.6e}", sol.objective);
    println!("gross       {gross:.4}");
    println!("kkt         {:.2e}", sol.kkt.max());
    if sol.status != SolveStatus::Optimal {
        return Err(CliError::Domain(format!("solver stopped with status {:?}: {}", sol.status, sol.message.as_deref().unwrap_or(""))));
    }
    Ok(())
}
