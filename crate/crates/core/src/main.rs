use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use contact_intensity::grid::{AgeGrid, Direction};
use contact_intensity::inference::{elpd_and_ppc, sample, Diagnostics, InitStrategy, PosteriorDraws, SamplerConfig};
use contact_intensity::io::{self, DataConfig, Manifest, RunConfig};
use contact_intensity::kernels::KernelFamily;
use contact_intensity::model::{Parameterization, PopulationTable, RateConsistencyModel};
use contact_intensity::postprocess::{
    conditional_intensity, intensity_draws, intensity_summary, marginal_intensity, median_mae, relative_change,
    GenderAggregation, MarginalSummary,
};
use contact_intensity::simulate::{replicate_suite, Scenario, SAMPLE_SIZES};
use contact_intensity::{Error, Result};

const OUT_ENV: &str = "CONTACT_INTENSITY_OUT";

#[derive(Parser)]
#[command(name = "contact-intensity", version, about = "Fine-age contact intensities from coarse survey data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic replicate datasets.
    Simulate(SimulateArgs),
    /// Fit the model to a dataset and store draws and diagnostics.
    Fit(FitArgs),
    /// Summarise the draws of a fit.
    Report(ReportArgs),
    /// Print convergence diagnostics of a fit.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// `pre`, `in` or `all`.
    #[arg(long, default_value = "all")]
    scenario: String,
    #[arg(long, default_value_t = 2000)]
    n: u64,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Population CSV (age, gender, pop); uniform when absent.
    #[arg(long)]
    population: Option<PathBuf>,
    /// Every scenario, every sample size, ten replicates.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (counts.csv, participants.csv, ...).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    param: Option<Parameterization>,
    #[arg(long)]
    kernel: Option<KernelFamily>,
    #[arg(long)]
    m1: Option<usize>,
    #[arg(long)]
    m2: Option<usize>,
    #[arg(long)]
    boundary_factor: Option<f64>,
    /// Single-wave model without wave, repeat or detail terms.
    #[arg(long)]
    cross_sectional: bool,
    #[arg(long)]
    no_fatigue: bool,
    #[arg(long)]
    no_detail: bool,
    /// 2 chains, 200 warmup, 200 draws.
    #[arg(long, conflicts_with = "paper_scale")]
    desk: bool,
    /// 8 chains, 500 warmup, 1000 draws.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tree_depth: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitStrategy>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a `fit`.
    #[arg(long)]
    run: PathBuf,
    /// Draws used for derived quantities, evenly strided.
    #[arg(long, default_value_t = 1000)]
    max_draws: usize,
    /// Ages for which to report contact-age profiles.
    #[arg(long = "conditional-age")]
    conditional_ages: Vec<u32>,
    #[arg(long, default_value = "population-weighted")]
    aggregation: GenderAggregation,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    /// Print every parameter instead of the twenty worst.
    #[arg(long)]
    all: bool,
}

fn parse_init(s: &str) -> std::result::Result<InitStrategy, String> {
    match s {
        "uniform" => Ok(InitStrategy::Uniform),
        "map" => Ok(InitStrategy::Map),
        other => Err(format!("unknown init strategy {other:?}, expected uniform or map")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Report(a) => report(a),
        Command::Diagnose(a) => diagnose(a),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

/// Restricts a population table to `grid`.
fn restrict_population(pop: &PopulationTable, grid: AgeGrid) -> Result<PopulationTable> {
    if pop.grid() == grid {
        return Ok(pop.clone());
    }
    let vals =
        grid.ages().map(|age| pop.grid().index_of(age as i64).map(|i| pop.values()[i])).collect::<Result<Vec<_>>>()?;
    PopulationTable::new(grid, vals)
}

fn simulate(a: SimulateArgs) -> Result<serde_json::Value> {
    let grid = AgeGrid::simulation();
    let pop = match &a.population {
        Some(p) => restrict_population(&io::read_population(p)?, grid)?,
        None => PopulationTable::uniform(grid, 1.0)?,
    };
    let scenarios: Vec<Scenario> =
        if a.paper_scale || a.scenario == "all" { Scenario::ALL.to_vec() } else { vec![a.scenario.parse()?] };
    let (sizes, reps) = if a.paper_scale { (SAMPLE_SIZES.to_vec(), 10) } else { (vec![a.n], a.replicates) };
    let mut dirs = Vec::new();
    for &s in &scenarios {
        for &n in &sizes {
            for ds in replicate_suite(s, n, reps, a.seed, &pop)? {
                let dir = a.out.join(s.label()).join(format!("n{n}")).join(format!("rep{}", ds.replicate));
                io::write_dataset(&dir, &ds)?;
                dirs.push(dir.strip_prefix(&a.out).unwrap_or(&dir).display().to_string());
            }
        }
    }
    let settings = format!(
        "scenarios={:?} sizes={sizes:?} replicates={reps} seed={} population={:?}",
        scenarios.iter().map(|s| s.label()).collect::<Vec<_>>(),
        a.seed,
        a.population
    );
    Manifest::new("simulate", io::sha256_hex(settings.as_bytes()), a.seed, dirs.clone()).write(&a.out)?;
    Ok(json!({ "out": a.out, "datasets": dirs }))
}

fn resolve_fit_config(a: &FitArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.desk {
        let d = SamplerConfig::desk();
        cfg.sampler = SamplerConfig { seed: cfg.sampler.seed, init: cfg.sampler.init, ..d };
    }
    if a.paper_scale {
        let p = SamplerConfig::paper();
        cfg.sampler = SamplerConfig { seed: cfg.sampler.seed, init: cfg.sampler.init, ..p };
    }
    if let Some(d) = &a.data {
        cfg.data = DataConfig { truncation_cap: cfg.data.truncation_cap, ..DataConfig::from_dir(d) };
    }
    let m = &mut cfg.model;
    if let Some(v) = a.param {
        m.parameterization = v;
    }
    if let Some(v) = a.kernel {
        m.kernel = v;
    }
    if let Some(v) = a.m1 {
        m.m1 = v;
    }
    if let Some(v) = a.m2 {
        m.m2 = v;
    }
    if let Some(v) = a.boundary_factor {
        m.boundary_factor = v;
    }
    if a.cross_sectional {
        m.cross_sectional = true;
        m.fatigue = false;
        m.detail_proportion = false;
    }
    if a.no_fatigue {
        m.fatigue = false;
    }
    if a.no_detail {
        m.detail_proportion = false;
    }
    let s = &mut cfg.sampler;
    if let Some(v) = a.chains {
        s.chains = v;
    }
    if let Some(v) = a.warmup {
        s.warmup_iters = v;
    }
    if let Some(v) = a.samples {
        s.sampling_iters = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.max_tree_depth {
        s.max_tree_depth = v;
    }
    if let Some(v) = a.init {
        s.init = v;
    }
    if let Some(o) = &a.out {
        cfg.output.directory = o.clone();
    }
    cfg.data = absolute_data(cfg.data)?;
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    Ok(if p.is_absolute() { p } else { std::env::current_dir()?.join(p) })
}

fn absolute_data(mut d: DataConfig) -> Result<DataConfig> {
    for p in [&mut d.dir, &mut d.counts, &mut d.participants, &mut d.population, &mut d.detail, &mut d.aggregates] {
        if let Some(v) = p.take() {
            *p = Some(absolute(v)?);
        }
    }
    Ok(d)
}

fn fit(a: FitArgs) -> Result<serde_json::Value> {
    let cfg = resolve_fit_config(&a)?;
    let (table, pop) = io::load_survey(&cfg.data)?;
    let model = RateConsistencyModel::new(cfg.model, &table, &pop)?;
    let draws = sample(&model, &cfg.sampler)?;
    let diag = Diagnostics::from_draws(&draws, cfg.sampler.max_tree_depth);
    let out = &cfg.output.directory;
    io::write_draws(out, &draws)?;
    io::write_json(&out.join(io::DIAGNOSTICS_FILE), &diag)?;
    std::fs::write(out.join(io::CONFIG_FILE), cfg.to_toml_string()?)?;
    let files = [
        io::CONFIG_FILE,
        io::DRAWS_FILE,
        io::UNCONSTRAINED_FILE,
        io::STATS_FILE,
        io::CHAINS_FILE,
        io::DIAGNOSTICS_FILE,
    ];
    Manifest::new("fit", cfg.hash()?, cfg.sampler.seed, files.iter().map(|s| s.to_string()).collect()).write(out)?;
    Ok(json!({
        "out": out,
        "parameters": model.dim(),
        "cells": model.n_cells(),
        "divergences": diag.divergences,
        "max_r_hat": diag.max_r_hat,
        "min_ess_bulk": diag.min_ess_bulk,
        "warnings": diag.warnings,
    }))
}

/// Keeps at most `max` draws, evenly strided over the pooled chains.
fn thin(draws: &PosteriorDraws, max: usize) -> PosteriorDraws {
    let total = draws.total_draws();
    if max == 0 || total <= max {
        return draws.clone();
    }
    let stride = total.div_ceil(max);
    let mut out = draws.clone();
    let mut k = 0;
    for ch in &mut out.chains {
        let keep: Vec<bool> = (0..ch.unconstrained.len())
            .map(|_| {
                let b = k % stride == 0;
                k += 1;
                b
            })
            .collect();
        let filt = |v: &mut Vec<Vec<f64>>| {
            let mut i = 0;
            v.retain(|_| {
                i += 1;
                keep[i - 1]
            });
        };
        filt(&mut ch.unconstrained);
        filt(&mut ch.constrained);
    }
    out
}

fn load_run(run: &Path) -> Result<(RunConfig, PosteriorDraws)> {
    let cfg_path = run.join(io::CONFIG_FILE);
    let cfg =
        RunConfig::from_toml_str(&std::fs::read_to_string(&cfg_path).map_err(|e| {
            Error::Validation(format!("{}: {e}; is this a fit output directory?", cfg_path.display()))
        })?)?;
    Ok((cfg, io::read_draws(run)?))
}

#[derive(serde::Serialize)]
struct MarginalRow {
    wave: u32,
    gender: String,
    age: u32,
    median: f64,
    lower: f64,
    upper: f64,
}

#[derive(serde::Serialize)]
struct ConditionalRow {
    wave: u32,
    part_age: u32,
    cont_age: u32,
    median: f64,
    lower: f64,
    upper: f64,
}

fn marginal_rows(m: &[MarginalSummary], waves: &[u32]) -> Vec<MarginalRow> {
    m.iter()
        .map(|r| MarginalRow {
            wave: waves[r.wave],
            gender: r.gender.to_string(),
            age: r.age,
            median: r.summary.median,
            lower: r.summary.lower,
            upper: r.summary.upper,
        })
        .collect()
}

fn report(a: ReportArgs) -> Result<serde_json::Value> {
    let (cfg, draws) = load_run(&a.run)?;
    let (table, pop) = io::load_survey(&cfg.data)?;
    let model = RateConsistencyModel::new(cfg.model, &table, &pop)?;
    let draws = thin(&draws, a.max_draws);
    let check = elpd_and_ppc(&model, &draws, a.seed)?;
    let fields = intensity_draws(&model, &draws)?;
    let cells = intensity_summary(&fields)?;
    let grid = model.grid();
    let nb = grid.len();
    let waves = model.waves().to_vec();
    let out = a.run.join("report");
    std::fs::create_dir_all(&out)?;

    #[derive(serde::Serialize)]
    struct CellRow {
        wave: u32,
        part_age: u32,
        part_gender: String,
        cont_age: u32,
        cont_gender: String,
        median: f64,
        lower: f64,
        upper: f64,
    }
    let mut rows = Vec::with_capacity(cells.len());
    for t in 0..waves.len() {
        for dir in Direction::ALL {
            for a_ in 0..nb {
                for b in 0..nb {
                    let s = cells[((t * 4 + dir.index()) * nb + a_) * nb + b];
                    rows.push(CellRow {
                        wave: waves[t],
                        part_age: grid.age_at(a_),
                        part_gender: dir.participant().to_string(),
                        cont_age: grid.age_at(b),
                        cont_gender: dir.contact().to_string(),
                        median: s.median,
                        lower: s.lower,
                        upper: s.upper,
                    });
                }
            }
        }
    }
    io::write_records(&out.join("intensity.csv"), &rows)?;
    io::write_records(&out.join("marginal.csv"), &marginal_rows(&marginal_intensity(&fields)?, &waves))?;
    let mut files = vec!["intensity.csv".to_string(), "marginal.csv".to_string(), "report.json".to_string()];
    if waves.len() > 1 {
        io::write_records(&out.join("relative_change.csv"), &marginal_rows(&relative_change(&fields, 0)?, &waves))?;
        files.push("relative_change.csv".into());
    }
    for &age in &a.conditional_ages {
        let name = format!("conditional_{age}.csv");
        let rows: Vec<ConditionalRow> = conditional_intensity(&fields, age, &pop, a.aggregation)?
            .into_iter()
            .map(|c| ConditionalRow {
                wave: waves[c.wave],
                part_age: age,
                cont_age: c.contact_age,
                median: c.summary.median,
                lower: c.summary.lower,
                upper: c.summary.upper,
            })
            .collect();
        io::write_records(&out.join(&name), &rows)?;
        files.push(name);
    }
    let mae = match cfg.data.dir.as_ref().map(|d| d.join(io::TRUTH_FILE)) {
        Some(p) if p.exists() => Some(median_mae(&cells, &io::read_intensity(&p, grid)?)?),
        _ => None,
    };
    let summary = json!({
        "draws_used": draws.total_draws(),
        "elpd": check.elpd,
        "ppc_coverage": check.ppc_coverage,
        "cells": check.n_cells,
        "mae": mae,
    });
    io::write_json(&out.join("report.json"), &summary)?;
    Manifest::new("report", cfg.hash()?, a.seed, files).write(&out)?;
    Ok(summary)
}

fn diagnose(a: DiagnoseArgs) -> Result<serde_json::Value> {
    let (cfg, draws) = load_run(&a.run)?;
    let diag = Diagnostics::from_draws(&draws, cfg.sampler.max_tree_depth);
    let mut params = diag.parameters.clone();
    params.sort_by(|x, y| y.r_hat.total_cmp(&x.r_hat));
    if !a.all {
        params.truncate(20);
    }
    eprintln!("{:<32} {:>12} {:>12} {:>8} {:>10}", "parameter", "mean", "sd", "R-hat", "ESS bulk");
    for p in &params {
        eprintln!("{:<32} {:>12.4e} {:>12.4e} {:>8.4} {:>10.1}", p.name, p.mean, p.sd, p.r_hat, p.ess_bulk);
    }
    Ok(json!({
        "chains": diag.chains,
        "draws_per_chain": diag.draws_per_chain,
        "divergences": diag.divergences,
        "mean_accept_stat": diag.mean_accept_stat,
        "max_tree_depth_hits": diag.max_tree_depth_hits,
        "step_sizes": diag.step_sizes,
        "max_r_hat": diag.max_r_hat,
        "min_ess_bulk": diag.min_ess_bulk,
        "warnings": diag.warnings,
    }))
}
