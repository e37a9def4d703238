//! `swarm`: run, sweep and inspect gossip-SGD experiments.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort
//! (divergence guard).

mod experiment;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use swarm_core::bounds::{bound_check, BoundKind};
use swarm_core::engine::{EngineError, Experiment};
use swarm_core::metrics::{write_csv, write_jsonl};
use swarm_core::sweep::{run_sweep, write_sweep_csv, SweepAxis, SweepRow};
use swarm_core::{bound_lemma_gamma, bound_thm1, bound_thm2, estimate_moments, RunSummary, Topology, TopologyKind};

use crate::experiment::ExperimentFile;

#[derive(Parser, Debug)]
#[command(name = "swarm", version, about = "Decentralized gossip-SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment file and write metrics and summaries.
    Run(RunArgs),
    /// Run one experiment at several values of a single parameter.
    Sweep(SweepArgs),
    /// Evaluate a bound formula, or check summaries against their bounds.
    Bound(BoundArgs),
    /// Print a topology's size, degree and spectral gap.
    GraphInfo(GraphArgs),
    /// Estimate an experiment objective's constants.
    Moments(MomentsArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `objective.noise_std=0.5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentFile> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("master_seed={seed}"));
        }
        experiment::load(&self.config, &overrides)
    }
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output root; results go to `<out>/<name>/<seed>/`.
    #[arg(long, env = "SWARM_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for replicas and sweep points.
    #[arg(long, short)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Also write `metrics.csv` next to `metrics.jsonl`.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Parameter to vary: T, H, n, eta or variant.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    values: Vec<String>,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[command(subcommand)]
    which: BoundCommand,
}

#[derive(Subcommand, Debug)]
enum BoundCommand {
    /// Second-moment convergence bound.
    Thm1(Thm1Args),
    /// Non-i.i.d. convergence bound.
    Thm2(Thm2Args),
    /// Uniform bound on the expected potential.
    LemmaGamma(LemmaArgs),
    /// Compare `summary.json` files (replicas of one experiment) to their bounds.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GraphParams {
    #[arg(long)]
    n: usize,
    /// Degree `r`.
    #[arg(long)]
    r: f64,
    #[arg(long)]
    lambda2: f64,
}

#[derive(Args, Debug)]
struct Thm1Args {
    #[command(flatten)]
    graph: GraphParams,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    l: f64,
    #[arg(long)]
    m2: f64,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    f0_gap: f64,
}

#[derive(Args, Debug)]
struct Thm2Args {
    #[command(flatten)]
    graph: GraphParams,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    l: f64,
    #[arg(long)]
    sigma2: f64,
    #[arg(long)]
    rho2: f64,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    f0_gap: f64,
}

#[derive(Args, Debug)]
struct LemmaArgs {
    #[command(flatten)]
    graph: GraphParams,
    #[arg(long)]
    eta: f64,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    m2: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Thm1,
    Thm2,
    LemmaGamma,
}

impl From<KindArg> for BoundKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Thm1 => BoundKind::Thm1,
            KindArg::Thm2 => BoundKind::Thm2,
            KindArg::LemmaGamma => BoundKind::LemmaGamma,
        }
    }
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Run summaries of one experiment's replicas.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// Bounds to check.
    #[arg(long, value_delimiter = ',', required = true)]
    kinds: Vec<KindArg>,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    kind: TopologyKind,
    #[arg(long)]
    n: usize,
    /// Degree; implied for complete, ring and hypercube.
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include the edge list.
    #[arg(long)]
    edges: bool,
}

#[derive(Args, Debug)]
struct MomentsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides `moments.probe_points`.
    #[arg(long)]
    probe_points: Option<usize>,
    /// Overrides `moments.draws_per_point`.
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Serialize)]
struct BoundValue {
    bound: &'static str,
    value: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        bail!("--{name} must be positive, got {v}")
    }
}

fn check_non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        bail!("--{name} must be non-negative, got {v}")
    }
}

fn check_graph(g: &GraphParams) -> Result<()> {
    if g.n < 2 {
        bail!("--n must be at least 2");
    }
    check_positive("r", g.r)?;
    check_positive("lambda2", g.lambda2)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, value)?;
    writeln!(lock)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(j) = jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    set_jobs(args.output.jobs)?;
    let file = args.config.load()?;
    let exp = Experiment::prepare(&file.config)?;
    let result = exp.run_all()?;
    let root = args.output.out.join(&file.name);
    for (k, replica) in result.replicas.iter().enumerate() {
        let seed = file.config.replica_seed(k);
        let dir = root.join(seed.to_string());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let metrics = File::create(dir.join("metrics.jsonl")).context("creating metrics.jsonl")?;
        write_jsonl(BufWriter::new(metrics), &replica.snapshots)?;
        if args.csv {
            let csv = File::create(dir.join("metrics.csv")).context("creating metrics.csv")?;
            write_csv(BufWriter::new(csv), &replica.snapshots)?;
        }
        write_json(&dir.join("summary.json"), &replica.summary)?;
        let mut resolved = file.config.clone();
        resolved.master_seed = seed;
        resolved.replicas = 1;
        write_json(&dir.join("config.json"), &resolved)?;
        eprintln!(
            "replica {k} (seed {seed}): {:.3}s wall time, {}",
            replica.summary.wall_time_secs,
            dir.display()
        );
    }
    if result.replicas.len() > 1 {
        write_json(&root.join("aggregate.json"), &result.aggregate)?;
        print_json(&result.aggregate)?;
    } else {
        print_json(&result.replicas[0].summary)?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    set_jobs(args.output.jobs)?;
    let file = args.config.load()?;
    let results = run_sweep(&file.config, args.axis, &args.values);
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut first_err: Option<EngineError> = None;
    for (value, r) in args.values.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                eprintln!("sweep point {}={value} failed: {e}", args.axis);
                first_err.get_or_insert(e);
            }
        }
    }
    let root = args.output.out.join(&file.name);
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let path = root.join(format!("sweep-{}.csv", args.axis));
    write_sweep_csv(BufWriter::new(File::create(&path)?), &rows)?;
    print_json(&rows)?;
    eprintln!("{} of {} points written to {}", rows.len(), args.values.len(), path.display());
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_bound(args: &BoundArgs) -> Result<()> {
    match &args.which {
        BoundCommand::Thm1(a) => {
            check_graph(&a.graph)?;
            check_positive("h", a.h)?;
            check_positive("t", a.t)?;
            check_non_negative("l", a.l)?;
            check_non_negative("m2", a.m2)?;
            check_non_negative("f0-gap", a.f0_gap)?;
            let g = &a.graph;
            let value = bound_thm1(g.n, g.r, g.lambda2, a.h, a.l, a.m2, a.t, a.f0_gap);
            print_json(&BoundValue { bound: "thm1", value })
        }
        BoundCommand::Thm2(a) => {
            check_graph(&a.graph)?;
            check_positive("h", a.h)?;
            check_positive("t", a.t)?;
            check_non_negative("l", a.l)?;
            check_non_negative("sigma2", a.sigma2)?;
            check_non_negative("rho2", a.rho2)?;
            check_non_negative("f0-gap", a.f0_gap)?;
            let g = &a.graph;
            let value = bound_thm2(g.n, g.r, g.lambda2, a.h, a.l, a.sigma2, a.rho2, a.t, a.f0_gap);
            print_json(&BoundValue { bound: "thm2", value })
        }
        BoundCommand::LemmaGamma(a) => {
            check_graph(&a.graph)?;
            check_positive("eta", a.eta)?;
            check_positive("h", a.h)?;
            check_non_negative("m2", a.m2)?;
            let g = &a.graph;
            let value = bound_lemma_gamma(g.n, g.r, g.lambda2, a.eta, a.h, a.m2);
            print_json(&BoundValue {
                bound: "lemma_gamma",
                value,
            })
        }
        BoundCommand::Check(a) => {
            let runs = a
                .summaries
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<RunSummary>(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let kinds: Vec<BoundKind> = a.kinds.iter().map(|&k| k.into()).collect();
            print_json(&bound_check(&runs, &kinds)?)
        }
    }
}

#[derive(Serialize)]
struct GraphReport {
    #[serde(flatten)]
    info: swarm_core::topology::TopologyInfo,
    #[serde(skip_serializing_if = "Option::is_none")]
    edge_list: Option<Vec<(usize, usize)>>,
}

fn cmd_graph_info(args: &GraphArgs) -> Result<()> {
    let r = args
        .degree
        .or_else(|| args.kind.implied_degree(args.n))
        .ok_or_else(|| anyhow!("--degree is required for {} with n = {}", args.kind, args.n))?;
    let g = Topology::build(args.kind, args.n, r, args.seed)?;
    print_json(&GraphReport {
        info: g.info(),
        edge_list: args.edges.then(|| g.edges().to_vec()),
    })
}

fn cmd_moments(args: &MomentsArgs) -> Result<()> {
    let file = args.config.load()?;
    let spec = &file.config.moments;
    let objective = file.config.objective.build(file.config.n)?;
    let report = estimate_moments(
        objective.as_ref(),
        args.probe_points.unwrap_or(spec.probe_points),
        args.draws.unwrap_or(spec.draws_per_point),
        file.config.master_seed,
    )?;
    print_json(&report)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<EngineError>() {
        Some(e) if e.is_divergence() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bound(a) => cmd_bound(a),
        Command::GraphInfo(a) => cmd_graph_info(a),
        Command::Moments(a) => cmd_moments(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
