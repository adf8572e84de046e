//! Command-line surface and the files each command writes.
//!
//! Every CSV starts with a `config_hash` column holding the first 16 hex
//! digits of the resolved configuration's SHA-256. Manifests carry the full
//! hash, the resolved configuration and the seeds; they hold no timestamps.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use oran_diffql::agent::LearningCurve;
use oran_diffql::esa::{predicted_count, write_dataset, Dataset};
use oran_diffql::metrics::{aggregate_report, write_aggregate_csv, ComparisonMetrics, RunOutput};
use oran_diffql::model::Service;
use oran_diffql::nn::{load_checkpoint, save_checkpoint};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{
    evaluate_policy, label_dataset, run_sweep, train_policy, Checkpoint, EvalReport, Policy, SweepVar, CHECKPOINT_KIND,
};
use crate::{CliError, WORKERS_ENV};

/// Version of the CSV column layouts below.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "diffql", version, about = "O-RAN slicing experiments with a Q-guided diffusion policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent per seed; writes curve.csv, checkpoint.json and manifest.json.
    Train(TrainArgs),
    /// Label random instances with the exhaustive search (JSON lines).
    Oracle(OracleArgs),
    /// Score a checkpoint against an oracle dataset.
    Evaluate(EvaluateArgs),
    /// Train and score over a grid of one variable; writes sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML configuration; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds, one run each.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Agent to train: diffql, dqn or random.
    #[arg(long, default_value = "diffql", value_parser = parse_method)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Instance count; defaults to `eval.instances`.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Dataset seed; defaults to `eval.dataset_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Overrides the evaluation settings stored in the checkpoint.
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub load_checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// num_ues, ru_power, slice_power or interference_power.
    #[arg(long)]
    pub sweep: String,
    /// Comma-separated grid values (dBm for powers).
    #[arg(long, value_delimiter = ',', required = true)]
    pub points: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Score this policy at every point instead of training one per point and seed.
    #[arg(long)]
    pub load_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "diffql" => Ok(Method::Diffql),
        "dqn" => Ok(Method::Dqn),
        "random" => Ok(Method::Random),
        other => Err(format!("unknown method `{other}` (expected diffql, dqn or random)")),
    }
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig, CliError> {
    match &arg.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV}: expected a positive integer, found `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let pool = worker_pool()?;
    pool.install(|| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    csv_schema_version: u32,
    command: &'static str,
    config_hash: String,
    seeds: &'a [u64],
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<&'a [f64]>,
    config: &'a ExperimentConfig,
}

impl<'a> Manifest<'a> {
    fn new(command: &'static str, cfg: &'a ExperimentConfig, seeds: &'a [u64]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            csv_schema_version: CSV_SCHEMA_VERSION,
            command,
            config_hash: cfg.hash(),
            seeds,
            method: None,
            sweep: None,
            points: None,
            config: cfg,
        }
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let seeds: Vec<u64> = match args.seed {
        Some(s) => vec![s],
        None if args.seeds.is_empty() => vec![0],
        None => args.seeds.clone(),
    };
    let hash = cfg.hash();
    let short = cfg.short_hash();
    let runs = seeds
        .par_iter()
        .map(|&seed| train_policy(&cfg, args.method, seed).map(|r| (seed, r)))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(&args.out)?;
    for (seed, (policy, curve)) in runs {
        let dir = args.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        write_curve(&dir.join("curve.csv"), &curve, &short)?;
        let ckpt = Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config_hash: hash.clone(),
            seed,
            config: cfg.clone(),
            policy,
        };
        save_checkpoint(&dir.join("checkpoint.json"), &ckpt)?;
        let seeds = [seed];
        let mut manifest = Manifest::new("train", &cfg, &seeds);
        manifest.method = Some(args.method.name());
        manifest.write(&dir.join("manifest.json"))?;
        println!("{}: {} episodes, tail-50 reward {}", dir.display(), curve.episodes.len(), fmt_opt(curve.tail_mean(50)));
    }
    Ok(())
}

pub fn write_curve(path: &Path, curve: &LearningCurve, short_hash: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    curve.write_csv(&mut w, Some(("config_hash", short_hash)))?;
    w.flush()?;
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let instances = args.instances.unwrap_or(cfg.eval.instances);
    let seed = args.seed.unwrap_or(cfg.eval.dataset_seed);
    let predicted = predicted_count(&cfg.network, &cfg.esa);
    if predicted > cfg.esa.max_candidates {
        return Err(CliError::Runtime(format!(
            "instance too large: the exhaustive search would visit {predicted} candidates per instance \
             (esa.max_candidates = {})",
            cfg.esa.max_candidates
        )));
    }
    let dataset = label_dataset(&cfg.network, &cfg.esa, instances, seed, &cfg.hash())?;
    let mut w = create(&args.out)?;
    write_dataset(&mut w, &dataset.header, &dataset.records)?;
    w.flush()?;
    let feasible = dataset.records.iter().filter(|r| r.feasible).count();
    println!(
        "{}: {instances} instances, {feasible} feasible, {predicted} candidates each",
        args.out.display()
    );
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read(BufReader::new(file)).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let ckpt: Checkpoint = load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if ckpt.kind != CHECKPOINT_KIND {
        return Err(CliError::Runtime(format!("{}: not an agent checkpoint", path.display())));
    }
    Ok(ckpt)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&args.load_checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    let mut cfg = ckpt.config.clone();
    if args.config.config.is_some() {
        cfg.eval = load_config(&args.config)?.eval;
    }
    let report = evaluate_policy(
        &ckpt.policy,
        &cfg.network,
        &cfg.env,
        &dataset,
        &cfg.eval,
    )?;
    fs::create_dir_all(&args.out)?;
    let short = cfg.short_hash();
    write_eval(&args.out, &report, &short, ckpt.policy.method())?;
    let seeds = [ckpt.seed];
    let mut manifest = Manifest::new("evaluate", &cfg, &seeds);
    manifest.method = Some(ckpt.policy.method().name());
    manifest.write(&args.out.join("manifest.json"))?;
    let m = &report.aggregate;
    println!(
        "{} instances: MAE {:.4}, R2 {}, cosine {}, BAEP {:.2}%",
        report.instances.len(),
        m.mae,
        fmt_opt(m.r2),
        fmt_opt(m.cosine),
        m.baep
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

fn metric_cells(m: &ComparisonMetrics) -> String {
    format!("{:.17e},{},{},{:.17e}", m.mae, cell(m.r2), cell(m.cosine), m.baep)
}

/// `instances.csv` (one row per record) and `summary.csv` (pooled metrics).
pub fn write_eval(dir: &Path, report: &EvalReport, short_hash: &str, method: Method) -> Result<(), CliError> {
    let mut w = create(&dir.join("instances.csv"))?;
    writeln!(
        w,
        "config_hash,method,index,mae,r2,cosine,baep,throughput,esa_throughput,reward,feasible"
    )?;
    for s in &report.instances {
        writeln!(
            w,
            "{short_hash},{},{},{},{:.17e},{:.17e},{:.17e},{}",
            method.name(),
            s.index,
            metric_cells(&s.metrics),
            s.throughput,
            s.esa_throughput,
            s.reward,
            s.feasible
        )?;
    }
    w.flush()?;
    let mut w = create(&dir.join("summary.csv"))?;
    writeln!(w, "config_hash,method,instances,mae,r2,cosine,baep")?;
    writeln!(
        w,
        "{short_hash},{},{},{}",
        method.name(),
        report.instances.len(),
        metric_cells(&report.aggregate)
    )?;
    w.flush()?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let var = SweepVar::parse(&args.sweep)?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must list at least one seed".into()));
    }
    let cfg = load_config(&args.config)?;
    let preloaded: Option<Policy> = match &args.load_checkpoint {
        Some(p) => Some(read_checkpoint(p)?.policy),
        None => None,
    };
    let runs = run_sweep(&cfg, var, &args.points, &args.seeds, preloaded.as_ref())?;
    fs::create_dir_all(&args.out)?;
    write_sweep(&args.out.join("sweep.csv"), &cfg, var, &runs)?;
    let mut manifest = Manifest::new("sweep", &cfg, &args.seeds);
    manifest.sweep = Some(var.name());
    manifest.points = Some(&args.points);
    manifest.write(&args.out.join("manifest.json"))?;
    println!("{}: {} runs", args.out.join("sweep.csv").display(), runs.len());
    Ok(())
}

fn service_name(s: Service) -> &'static str {
    match s {
        Service::Embb => "embb",
        Service::Urllc => "urllc",
        Service::Mmtc => "mmtc",
    }
}

/// Aggregated rows per method and sweep value, methods in configured order.
pub fn write_sweep(path: &Path, cfg: &ExperimentConfig, var: SweepVar, runs: &[(Method, RunOutput)]) -> Result<(), CliError> {
    let slice_names: Vec<String> = cfg
        .network
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| format!("slice{i}_{}", service_name(s.service)))
        .collect();
    let short = cfg.short_hash();
    let mut w = create(path)?;
    for (i, &method) in cfg.sweep.methods.iter().enumerate() {
        let mine: Vec<RunOutput> = runs.iter().filter(|(m, _)| *m == method).map(|(_, r)| r.clone()).collect();
        let rows = aggregate_report(&mine)?;
        let mut buf = Vec::new();
        write_aggregate_csv(
            &mut buf,
            var.name(),
            &slice_names,
            &rows,
            &[("config_hash", short.as_str()), ("method", method.name())],
        )?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        // one header for the whole file
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |(_, b)| b) };
        w.write_all(body.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}
