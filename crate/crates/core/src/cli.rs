//! `lmmsel` command-line front-end.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numeric or
//! convergence failure. Errors are printed to stderr as
//! `{"error": {"kind": ..., "message": ...}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ecm::{self, neg2_penalized_marginal, EcmConfig, FitResult};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{find_intercept, Covariate, MixedModelData, RandomEffectSpec, Relationship};
use crate::penalized_ls::SelectorKind;
use crate::simgen::{self, metric_names, Method, ModelName, SimulationScenario, StudyOptions, StudyResult};
use crate::tuning::{self, Criterion, TuneConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "lmmsel", version, about = "Joint fixed- and random-effect selection in linear mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at a fixed penalty.
    Fit(FitArgs),
    /// Fit along a penalty grid and choose lambda by BIC or EBIC.
    Tune(TuneArgs),
    /// Monte Carlo study on a built-in scenario.
    Simulate(SimulateArgs),
    /// Recompute the objective of a saved fit from its parameters.
    Verify(VerifyArgs),
    /// Write one replicate of a built-in scenario as CSV input files.
    Generate(GenerateArgs),
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct DataArgs {
    /// Response, one column with header.
    #[arg(long)]
    pub y: PathBuf,
    /// Design matrix with a header row of column names.
    #[arg(long)]
    pub x: PathBuf,
    /// One column of 1-based integer levels per grouping factor.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Per grouping factor, the X column (name or 0-based index) its effect
    /// interacts with, or `none` for a random intercept. Comma separated.
    #[arg(long, value_delimiter = ',')]
    pub covariate_cols: Vec<String>,
    /// Relationship matrix for a factor, as `FACTOR=path.csv` (no header).
    #[arg(long)]
    pub relationship: Vec<String>,
    /// Penalize the all-ones column instead of leaving it free.
    #[arg(long)]
    pub penalize_intercept: bool,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct EcmArgs {
    #[arg(long, default_value = "lasso")]
    pub selector: String,
    #[arg(long, default_value_t = 5000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub delete_ratio: f64,
    /// Maximum admissible |J| (default min(n-1, p) - 1).
    #[arg(long)]
    pub support_cap: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ecm: EcmArgs,
    #[arg(long)]
    pub lambda: f64,
    /// Also report unpenalized estimates on the selected model.
    #[arg(long)]
    pub refit: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ecm: EcmArgs,
    #[arg(long, default_value_t = 50)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub min_ratio: f64,
    #[arg(long, default_value = "bic")]
    pub criterion: String,
    #[arg(long)]
    pub cold_start: bool,
    /// Bisection steps between the last admissible grid point and the
    /// first truncated one.
    #[arg(long, default_value_t = 8)]
    pub edge_refine: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub refit: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "lasso+")]
    pub method: String,
    /// Testing level of the multiple-testing selectors, which are not
    /// available; present only to reject it explicitly.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub refit: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub min_ratio: f64,
    /// M2: keep the three random support indices fixed across replicates.
    #[arg(long)]
    pub m2_fixed_support: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `fit.json` written by `fit` or `tune`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub arguments: serde_json::Value,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub version: String,
    pub timings_seconds: BTreeMap<String, f64>,
}

/// Saved output of `fit` and `tune`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitOutput {
    pub schema_version: u32,
    pub column_names: Vec<String>,
    pub effect_names: Vec<String>,
    pub fit: FitResult,
    pub refit: Option<FitResult>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Dimension(_)
        | Error::Grouping(_)
        | Error::DegenerateColumn { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 3,
        Error::Numeric { .. }
        | Error::NonConvergence { .. }
        | Error::SupportCap { .. }
        | Error::Rank(_)
        | Error::Tuning(_)
        | Error::Selector { .. } => 4,
    }
}

fn resolve_column(spec: &str, names: &[String]) -> Result<Option<usize>> {
    let s = spec.trim();
    if s.eq_ignore_ascii_case("none") || s == "-" || s.is_empty() {
        return Ok(None);
    }
    if let Some(j) = names.iter().position(|n| n == s) {
        return Ok(Some(j));
    }
    match s.parse::<usize>() {
        Ok(j) if j < names.len() => Ok(Some(j)),
        _ => Err(usage(format!("covariate column '{s}' not found in X"))),
    }
}

fn load_data(args: &DataArgs, inputs: &mut BTreeMap<String, String>) -> Result<MixedModelData> {
    let (_, y) = io::read_vector(&args.y)?;
    inputs.insert(args.y.display().to_string(), io::sha256_file(&args.y)?);
    let x = io::read_table(&args.x)?;
    inputs.insert(args.x.display().to_string(), io::sha256_file(&args.x)?);

    let factors = match &args.groups {
        Some(p) => {
            inputs.insert(p.display().to_string(), io::sha256_file(p)?);
            io::read_groups(p)?
        }
        None => Vec::new(),
    };
    if !args.covariate_cols.is_empty() && args.covariate_cols.len() != factors.len() {
        return Err(usage(format!(
            "--covariate-cols has {} entries for {} grouping factors",
            args.covariate_cols.len(),
            factors.len()
        )));
    }
    let mut relationships = BTreeMap::new();
    for r in &args.relationship {
        let (name, path) = r
            .split_once('=')
            .ok_or_else(|| usage(format!("--relationship expects FACTOR=path, got '{r}'")))?;
        if !factors.iter().any(|(n, _)| n == name) {
            return Err(usage(format!("--relationship names unknown factor '{name}'")));
        }
        let path = Path::new(path);
        inputs.insert(path.display().to_string(), io::sha256_file(path)?);
        relationships.insert(name.to_string(), Relationship::new(io::read_square(path)?)?);
    }

    let mut effects = Vec::with_capacity(factors.len());
    for (i, (name, factor)) in factors.into_iter().enumerate() {
        let col = match args.covariate_cols.get(i) {
            Some(s) => resolve_column(s, &x.names)?,
            None => None,
        };
        let mut spec = RandomEffectSpec {
            name: match col {
                Some(j) => format!("{name}:{}", x.names[j]),
                None => name.clone(),
            },
            factor,
            covariate: col.map_or(Covariate::None, Covariate::Column),
            relationship: None,
        };
        if let Some(rel) = relationships.remove(&name) {
            spec = spec.with_relationship(rel);
        }
        effects.push(spec);
    }
    let mut unpenalized = BTreeSet::new();
    if !args.penalize_intercept {
        if let Some(j) = find_intercept(&x.values) {
            unpenalized.insert(j);
        }
    }
    MixedModelData::new(y, x.values, Some(x.names), effects, unpenalized)
}

fn ecm_config(a: &EcmArgs, lambda: f64) -> Result<EcmConfig> {
    let cfg = EcmConfig {
        lambda,
        selector: a.selector.parse::<SelectorKind>()?,
        max_iter: a.max_iter,
        delete_ratio: a.delete_ratio,
        support_cap: a.support_cap,
        ..EcmConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn fit_output(data: &MixedModelData, fit: FitResult, refit: Option<FitResult>) -> FitOutput {
    FitOutput {
        schema_version: SCHEMA_VERSION,
        column_names: data.column_names().to_vec(),
        effect_names: data.effects().iter().map(|e| e.spec.name.clone()).collect(),
        fit,
        refit,
    }
}

fn manifest(
    command: &str,
    args: &impl Serialize,
    config: &impl Serialize,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
) -> Result<RunManifest> {
    Ok(RunManifest {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        arguments: serde_json::to_value(args)?,
        config: serde_json::to_value(config)?,
        seed,
        inputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timings_seconds: timings,
    })
}

fn do_refit(data: &MixedModelData, fit: &FitResult) -> Result<FitResult> {
    ecm::refit(data, &fit.support, &fit.state.active)
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let mut timings = BTreeMap::new();
    let t0 = Instant::now();
    let data = load_data(&a.data, &mut inputs)?;
    timings.insert("load".into(), t0.elapsed().as_secs_f64());
    if a.lambda == 0.0 && data.p() >= data.n() {
        return Err(usage("penalty required when p ≥ n"));
    }
    let cfg = ecm_config(&a.ecm, a.lambda)?;
    let t1 = Instant::now();
    let fit = ecm::fit(&data, &cfg)?;
    timings.insert("fit".into(), t1.elapsed().as_secs_f64());
    let refit = if a.refit {
        let t2 = Instant::now();
        let r = do_refit(&data, &fit)?;
        timings.insert("refit".into(), t2.elapsed().as_secs_f64());
        Some(r)
    } else {
        None
    };
    ensure_dir(&a.out_dir)?;
    io::write_json(&a.out_dir.join("fit.json"), &fit_output(&data, fit, refit))?;
    let m = manifest("fit", a, &cfg, None, inputs, timings)?;
    io::write_json(&a.out_dir.join("manifest.json"), &m)
}

fn cmd_tune(a: &TuneArgs) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let mut timings = BTreeMap::new();
    let t0 = Instant::now();
    let data = load_data(&a.data, &mut inputs)?;
    timings.insert("load".into(), t0.elapsed().as_secs_f64());
    let criterion: Criterion = a.criterion.parse()?;
    if a.threads == Some(0) {
        return Err(usage("--threads must be >= 1"));
    }
    let cfg = TuneConfig {
        grid_size: a.grid_size,
        min_ratio: a.min_ratio,
        criterion,
        cold_start: a.cold_start,
        threads: a.threads,
        edge_refine: a.edge_refine,
        ecm: ecm_config(&a.ecm, 1.0)?,
        ..TuneConfig::default()
    };
    let grid = tuning::lambda_grid(&data, cfg.grid_size, cfg.min_ratio, cfg.ecm.selector)?;
    let t1 = Instant::now();
    let res = tuning::tune(&data, &grid, &cfg)?;
    timings.insert("tune".into(), t1.elapsed().as_secs_f64());

    ensure_dir(&a.out_dir)?;
    let header: Vec<String> = ["lambda", "bic", "ebic", "support_size", "sigma2_e", "degenerate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = res
        .path
        .iter()
        .map(|e| {
            let v = &e.value;
            vec![
                io::fmt_f64(v.lambda),
                io::fmt_f64(v.bic),
                io::fmt_f64(v.ebic),
                v.support_size.to_string(),
                io::fmt_f64(v.sigma2_e),
                u8::from(v.degenerate).to_string(),
            ]
        })
        .collect();
    io::write_csv(&a.out_dir.join("path.csv"), &header, &rows)?;
    let refit = if a.refit { Some(do_refit(&data, &res.chosen)?) } else { None };
    io::write_json(&a.out_dir.join("tuning.json"), &serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "criterion": res.criterion,
        "chosen_point": res.chosen_point,
        "chosen_lambda": res.chosen_lambda,
        "path": res.path,
        "edge": res.edge,
    }))?;
    io::write_json(&a.out_dir.join("fit.json"), &fit_output(&data, res.chosen, refit))?;
    let m = manifest("tune", a, &cfg, None, inputs, timings)?;
    io::write_json(&a.out_dir.join("manifest.json"), &m)
}

fn scenario_of(name: &str) -> Result<SimulationScenario> {
    let model: ModelName = name.parse()?;
    Ok(SimulationScenario::new(model))
}

fn aggregate_rows(res: &StudyResult, q: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let metrics = metric_names(&res.scenario, q);
    let mut header = vec!["method".to_string(), "statistic".to_string()];
    header.extend(metrics.iter().cloned());
    header.extend(["replicates".to_string(), "failures".to_string()]);
    let mut rows = Vec::new();
    for agg in std::iter::once(&res.aggregate).chain(res.refit_aggregate.as_ref()) {
        for stat in ["mean", "sd"] {
            let mut row = vec![agg.label.clone(), stat.to_string()];
            for m in &metrics {
                let s = agg.get(m).expect("metric present");
                row.push(match stat {
                    "mean" => io::fmt_f64(s.mean),
                    _ => s.sd.map(io::fmt_f64).unwrap_or_default(),
                });
            }
            row.push(agg.replicates.to_string());
            row.push(agg.failures.to_string());
            rows.push(row);
        }
    }
    (header, rows)
}

fn replicate_rows(res: &StudyResult, q: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let metrics = metric_names(&res.scenario, q);
    let mut header = vec!["replicate".to_string(), "pass".to_string(), "status".to_string(), "lambda".to_string()];
    header.extend(metrics.iter().cloned());
    header.push("error".to_string());
    let mut rows = Vec::new();
    for r in &res.replicates {
        let passes = [("penalized", &r.report, &r.error), ("refit", &r.refit, &r.refit_error)];
        for (pass, rep, err) in passes {
            if pass == "refit" && rep.is_none() && err.is_none() {
                continue;
            }
            let mut row = vec![r.replicate.to_string(), pass.to_string()];
            match rep {
                Some(rep) => {
                    row.push("ok".into());
                    row.push(io::fmt_f64(rep.lambda));
                    row.extend(simgen::report_values(rep).into_iter().map(io::fmt_f64));
                    row.push(String::new());
                }
                None => {
                    row.push("failed".into());
                    row.push(String::new());
                    row.extend(metrics.iter().map(|_| String::new()));
                    row.push(err.clone().unwrap_or_default());
                }
            }
            rows.push(row);
        }
    }
    (header, rows)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    if let Some(alpha) = a.alpha {
        return Err(usage(format!(
            "--alpha {alpha}: multiple-testing selectors are not supported (methods: lasso, adlasso, lasso+, adlasso+)"
        )));
    }
    let method: Method = a.method.parse()?;
    let mut scenario = scenario_of(&a.model)?;
    scenario.fixed_support = a.m2_fixed_support;
    if a.threads == Some(0) {
        return Err(usage("--threads must be >= 1"));
    }
    let opts = StudyOptions {
        refit: a.refit,
        threads: a.threads,
        tune: TuneConfig {
            grid_size: a.grid_size,
            min_ratio: a.min_ratio,
            ..TuneConfig::default()
        },
    };
    let t0 = Instant::now();
    let res = simgen::run_study(&scenario, a.reps as usize, method, a.seed, &opts)?;
    let mut timings = BTreeMap::new();
    timings.insert("study".into(), t0.elapsed().as_secs_f64());

    ensure_dir(&a.out_dir)?;
    let q = if method.mixed() { scenario.fitted_q } else { 0 };
    let (h, rows) = aggregate_rows(&res, q);
    io::write_csv(&a.out_dir.join("aggregate.csv"), &h, &rows)?;
    let (h, rows) = replicate_rows(&res, q);
    io::write_csv(&a.out_dir.join("replicates.csv"), &h, &rows)?;
    io::write_json(&a.out_dir.join("study.json"), &res)?;
    let m = manifest("simulate", a, &opts, Some(a.seed), BTreeMap::new(), timings)?;
    io::write_json(&a.out_dir.join("manifest.json"), &m)
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    stored: f64,
    recomputed: f64,
    abs_diff: f64,
    ok: bool,
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let data = load_data(&a.data, &mut inputs)?;
    let text = std::fs::read_to_string(&a.fit)?;
    let saved: FitOutput = serde_json::from_str(&text)?;
    if saved.column_names != data.column_names() {
        return Err(Error::Data("fit was produced on different columns".into()));
    }
    let f = &saved.fit;
    let recomputed = neg2_penalized_marginal(&data, &f.state, f.lambda, &f.penalty_weights)?;
    let abs_diff = (recomputed - f.objective).abs();
    let report = VerifyReport {
        stored: f.objective,
        recomputed,
        abs_diff,
        ok: abs_diff <= a.tol * f.objective.abs().max(1.0),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.ok {
        Ok(())
    } else {
        Err(Error::numeric(format!("objective mismatch {abs_diff:e}"), f64::NAN))
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let s = scenario_of(&a.model)?;
    let (data, truth) = simgen::generate(&s, a.seed, a.replicate)?;
    ensure_dir(&a.out_dir)?;
    io::write_table(&a.out_dir.join("y.csv"), &["y".to_string()], &nalgebra::DMatrix::from_column_slice(data.n(), 1, data.y().as_slice()))?;
    io::write_table(&a.out_dir.join("x.csv"), data.column_names(), data.x())?;
    let names: Vec<String> = (1..=data.q()).map(|k| format!("g{k}")).collect();
    let rows: Vec<Vec<String>> = (0..data.n())
        .map(|i| {
            data.effects()
                .iter()
                .map(|e| (e.spec.factor.assignment()[i] + 1).to_string())
                .collect()
        })
        .collect();
    io::write_csv(&a.out_dir.join("groups.csv"), &names, &rows)?;
    let cov: Vec<String> = data
        .effects()
        .iter()
        .map(|e| match e.spec.covariate {
            Covariate::Column(j) if j > 0 => data.column_names()[j].clone(),
            _ => "none".to_string(),
        })
        .collect();
    io::write_json(&a.out_dir.join("truth.json"), &serde_json::json!({
        "scenario": s,
        "seed": a.seed,
        "replicate": a.replicate,
        "covariate_cols": cov.join(","),
        "truth": truth,
    }))
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Generate(a) => cmd_generate(a),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let payload = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{payload}");
            exit_code(&e)
        }
    }
}
