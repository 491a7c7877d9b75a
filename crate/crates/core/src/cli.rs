//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::placement::ClusterTopology;
use crate::predictor::LengthHistory;
use crate::profile::LatencyProfile;
use crate::simulator::{run_training, Event, StepPlanner, Strategy, TrainingConfig, TrainingReport, TrainingSummary};
use crate::workload::{generate_synthetic, load_trace, save_trace, DriftConfig, Prompt, SynthConfig, TraceFormat, TraceLimits};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rolloutsim", version, about = "Plan and simulate the generation phase of RL post-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every listed strategy over one trace and write results.
    Simulate(RunArgs),
    /// Re-run one strategy for each value of a parameter.
    Sweep(SweepArgs),
    /// Time the per-step planning pipeline.
    PlanBench(PlanBenchArgs),
    /// Write a seeded synthetic trace.
    GenTrace(GenTraceArgs),
    /// Check a trace or run config without simulating.
    Validate(ValidateArgs),
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<TraceFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Flags override the config file, which overrides built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recorded trace (csv or jsonl); a synthetic trace is generated otherwise.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Strategies to run: elastic, static, global-cut.
    #[arg(long = "strategy", value_delimiter = ',', value_parser = parse_strategy)]
    pub strategies: Vec<Strategy>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Predictor history window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Price per GPU-second.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Responses per prompt of the synthetic trace.
    #[arg(short = 'g', long)]
    pub responses_per_prompt: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn to_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.trace.is_some() {
            cfg.trace.path = self.trace.clone();
        }
        if !self.strategies.is_empty() {
            cfg.strategies = self.strategies.clone();
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(tau, lambda, window, alpha, n_min, n_max, seed);
        if self.profile.is_some() {
            cfg.profile = self.profile.clone();
        }
        if self.topology.is_some() {
            cfg.topology = self.topology.clone();
        }
        if self.rho.is_some() {
            cfg.rho = self.rho;
        }
        if self.responses_per_prompt.is_some() {
            cfg.responses_per_prompt = self.responses_per_prompt;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Tau,
    Lambda,
    Window,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Lambda => "lambda",
            SweepParam::Window => "window",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Tau => cfg.tau = value,
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Window => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("window must be a positive integer, got {value}")));
                }
                cfg.window = value as usize;
            }
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanBenchArgs {
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[arg(long, default_value_t = 8)]
    pub gpus_per_node: usize,
    /// Timed runs, each reported on its own line.
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GenTraceArgs {
    /// Destination; `.csv` also writes a `.prompts.jsonl` sidecar.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<TraceFormat>,
    /// TOML file with synthetic trace settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(short = 'g', long)]
    pub responses_per_prompt: Option<usize>,
    /// Constant lengths across epochs.
    #[arg(long)]
    pub no_drift: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<TraceFormat>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => cmd_simulate(&args.to_config()?).map(|_| ()),
        Command::Sweep(args) => cmd_sweep(&args.run.to_config()?, args.param, &args.values).map(|_| ()),
        Command::PlanBench(args) => {
            for (i, ms) in cmd_plan_bench(&args)?.iter().enumerate() {
                println!("run {}: {ms:.3} ms", i + 1);
            }
            Ok(())
        }
        Command::GenTrace(args) => cmd_gen_trace(&args),
        Command::Validate(args) => cmd_validate(&args),
    }
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| Error::output(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, |w| {
        for r in rows {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::output(path, e))
}

#[derive(Serialize)]
struct StepRow {
    step: u64,
    actors: usize,
    wall_time: f64,
    generation_time: f64,
    gpu_seconds: f64,
    dollars: f64,
    cuts: usize,
    migrations: usize,
    transfer_seconds: f64,
    prefill_tokens: u64,
    redundant_prefill_tokens: u64,
    prefix_length: Option<usize>,
    est_total_time: f64,
    est_cost: f64,
}

#[derive(Serialize)]
struct StepEvent<'a> {
    step: u64,
    #[serde(flatten)]
    event: &'a Event,
}

#[derive(Serialize)]
struct ComparisonRow {
    strategy: Strategy,
    baseline: Strategy,
    cost_reduction: f64,
    gpu_seconds_reduction: f64,
    speedup: f64,
}

fn write_report(dir: &Path, report: &TrainingReport) -> Result<()> {
    create_dir(dir)?;
    let rows: Vec<StepRow> = report
        .steps
        .iter()
        .map(|s| StepRow {
            step: s.result.step_idx,
            actors: s.plan.n_actors,
            wall_time: s.result.wall_time,
            generation_time: s.result.generation_time,
            gpu_seconds: s.result.gpu_seconds,
            dollars: s.result.dollars,
            cuts: s.result.cuts,
            migrations: s.result.migrations,
            transfer_seconds: s.result.transfer_seconds,
            prefill_tokens: s.result.prefill_tokens,
            redundant_prefill_tokens: s.result.redundant_prefill_tokens,
            prefix_length: match &s.plan.prefill {
                crate::planner::PrefillPlan::Deduplicated(r) => Some(r.choice.length),
                crate::planner::PrefillPlan::PerActor { .. } => None,
            },
            est_total_time: s.plan.est_total_time,
            est_cost: s.plan.est_cost,
        })
        .collect();
    write_csv(&dir.join("steps.csv"), &rows)?;
    write_jsonl(
        &dir.join("events.jsonl"),
        report
            .steps
            .iter()
            .flat_map(|s| s.result.events.iter().map(|event| StepEvent { step: s.result.step_idx, event })),
    )?;
    write_jsonl(
        &dir.join("plans.jsonl"),
        report.steps.iter().map(|s| {
            serde_json::json!({ "step": s.plan.step_idx, "plan": &s.plan, "placement": &s.placement })
        }),
    )
}

fn run_strategies(r: &Resolved, strategies: &[Strategy]) -> Result<Vec<TrainingReport>> {
    strategies
        .par_iter()
        .map(|&s| run_training(&r.trace, s, &r.training, &r.profile, &r.topology))
        .collect()
}

/// Runs every strategy on the same trace and writes per-strategy results,
/// `summary.csv` and, for two or more strategies, `comparison.csv`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<TrainingSummary>> {
    let resolved = cfg.resolve()?;
    let reports = run_strategies(&resolved, &cfg.strategies)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    for report in &reports {
        write_report(&out.join(report.summary.strategy.name()), report)?;
    }
    let summaries: Vec<TrainingSummary> = reports.into_iter().map(|r| r.summary).collect();
    write_csv(&out.join("summary.csv"), &summaries)?;
    if let [subject, baselines @ ..] = summaries.as_slice() {
        if !baselines.is_empty() {
            let rows: Vec<ComparisonRow> = baselines
                .iter()
                .map(|b| ComparisonRow {
                    strategy: subject.strategy,
                    baseline: b.strategy,
                    cost_reduction: 1.0 - subject.mean_cost / b.mean_cost,
                    gpu_seconds_reduction: 1.0 - subject.mean_gpu_seconds / b.mean_gpu_seconds,
                    speedup: b.mean_step_time / subject.mean_step_time,
                })
                .collect();
            write_csv(&out.join("comparison.csv"), &rows)?;
        }
    }
    for s in &summaries {
        println!(
            "{}: mean step time {:.3} s, mean cost ${:.6}, {} cuts",
            s.strategy, s.mean_step_time, s.mean_cost, s.total_cuts
        );
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub strategy: Strategy,
    pub mean_cost: f64,
    pub mean_step_time: f64,
    pub mean_gpu_seconds: f64,
    pub total_cuts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepDiagnostic {
    pub from: f64,
    pub to: f64,
    pub cost_change: f64,
    pub time_change: f64,
    /// Per-actor busy time never grows from `to` down to `from` with
    /// migration disabled; tau sweeps only.
    pub busy_time_monotone: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub diagnostics: Vec<SweepDiagnostic>,
}

/// Billed seconds of every actor in every step.
fn busy_times(report: &TrainingReport) -> Vec<Vec<f64>> {
    report
        .steps
        .iter()
        .map(|s| s.result.actors.iter().map(|a| a.release - a.invoke).collect())
        .collect()
}

/// One run per value on the same trace and seed, using the first listed
/// strategy. Writes `sweep_<param>.csv` and `sweep_<param>_diagnostics.csv`.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            param.apply(&mut c, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let base = cfg.resolve()?;
    let strategy = cfg.strategies[0];

    let run_point = |c: &RunConfig, training: TrainingConfig| {
        run_training(&base.trace, strategy, &training, &base.profile, &base.topology)
            .map(|r| (c.clone(), r))
    };
    let points: Vec<(RunConfig, TrainingReport)> =
        configs.par_iter().map(|c| run_point(c, c.training())).collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&points)
        .map(|(&value, (_, r))| SweepRow {
            value,
            strategy,
            mean_cost: r.summary.mean_cost,
            mean_step_time: r.summary.mean_step_time,
            mean_gpu_seconds: r.summary.mean_gpu_seconds,
            total_cuts: r.summary.total_cuts,
        })
        .collect();

    // busy-time check: same runs with migration disabled
    let frozen: Option<Vec<Vec<Vec<f64>>>> = if param == SweepParam::Tau {
        let reports: Vec<(RunConfig, TrainingReport)> = configs
            .par_iter()
            .map(|c| {
                let mut t = c.training();
                t.sim.migration_bytes_per_token = f64::INFINITY;
                run_point(c, t)
            })
            .collect::<Result<_>>()?;
        Some(reports.iter().map(|(_, r)| busy_times(r)).collect())
    } else {
        None
    };

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let diagnostics: Vec<SweepDiagnostic> = order
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            SweepDiagnostic {
                from: values[lo],
                to: values[hi],
                cost_change: rows[hi].mean_cost - rows[lo].mean_cost,
                time_change: rows[hi].mean_step_time - rows[lo].mean_step_time,
                busy_time_monotone: frozen.as_ref().map(|f| {
                    f[lo].iter().zip(&f[hi]).all(|(low, high)| {
                        low.len() == high.len() && low.iter().zip(high).all(|(a, b)| a <= b)
                    })
                }),
            }
        })
        .collect();

    let out = &cfg.output_dir;
    create_dir(out)?;
    write_csv(&out.join(format!("sweep_{}.csv", param.name())), &rows)?;
    write_csv(&out.join(format!("sweep_{}_diagnostics.csv", param.name())), &diagnostics)?;
    for r in &rows {
        println!(
            "{}={}: mean cost ${:.6}, mean step time {:.3} s",
            param.name(),
            r.value,
            r.mean_cost,
            r.mean_step_time
        );
    }
    for d in &diagnostics {
        let busy = match d.busy_time_monotone {
            Some(true) => ", busy time monotone",
            Some(false) => ", busy time NOT monotone",
            None => "",
        };
        println!(
            "{} -> {}: cost {:+.6}, time {:+.3} s{busy}",
            d.from, d.to, d.cost_change, d.time_change
        );
    }
    Ok(SweepOutcome { rows, diagnostics })
}

/// Wall milliseconds of the full planning pipeline per timed run. Each run
/// rebuilds every structure from scratch.
pub fn cmd_plan_bench(args: &PlanBenchArgs) -> Result<Vec<f64>> {
    if args.batch_size == 0 || args.nodes == 0 || args.gpus_per_node == 0 {
        return Err(Error::Argument("batch size, node count and GPUs per node must be positive".into()));
    }
    let synth = SynthConfig {
        prompts: args.batch_size,
        steps: 1,
        ..SynthConfig::default()
    };
    let trace = generate_synthetic(&synth, args.seed)?;
    let prompts: Vec<&Prompt> = trace.prompts().collect();
    let profile = LatencyProfile::reference();
    let topo = ClusterTopology::uniform(args.nodes, args.gpus_per_node, 64.0e9, 12.5e9, 2.min(args.gpus_per_node));
    topo.validate()?;
    let mut cfg = TrainingConfig::default();
    if let Some(n) = args.n_max {
        cfg.n_max = n;
    }
    cfg.n_min = cfg.n_min.min(cfg.n_max);
    cfg.validate()?;
    let history = LengthHistory::new(cfg.window, cfg.alpha, trace.limits().max_response_len)?;
    let planner = StepPlanner {
        cfg: &cfg,
        profile: &profile,
        topo: &topo,
    };
    let g = trace.responses_per_prompt();
    let mut timings = Vec::with_capacity(args.runs);
    for i in 0..args.warmup + args.runs {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let clock = Instant::now();
        let planned = planner.plan(Strategy::Elastic, 0, &prompts, g, &history, &mut rng)?;
        let ms = clock.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(planned);
        if i >= args.warmup {
            timings.push(ms);
        }
    }
    Ok(timings)
}

pub fn cmd_gen_trace(args: &GenTraceArgs) -> Result<()> {
    let mut synth: SynthConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::format(p, crate::profile::line_of(&text, e.span()), e.message()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.prompts {
        synth.prompts = v;
    }
    if let Some(v) = args.steps {
        synth.steps = v;
    }
    if args.batch_size.is_some() {
        synth.batch_size = args.batch_size;
    }
    if let Some(v) = args.responses_per_prompt {
        synth.responses_per_prompt = v;
    }
    if args.no_drift {
        synth.drift = DriftConfig::none();
        synth.calibrated_drift = false;
    }
    let format = match args.format {
        Some(f) => f,
        None => TraceFormat::from_path(&args.out)
            .ok_or_else(|| Error::Argument(format!("cannot tell the format of {}; pass --format", args.out.display())))?,
    };
    let trace = generate_synthetic(&synth, args.seed.unwrap_or(0))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_trace(&trace, &args.out, format)?;
    println!(
        "wrote {} steps, {} prompts to {}",
        trace.steps().len(),
        trace.prompt_count(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    if args.trace.is_none() && args.config.is_none() {
        return Err(Error::Argument("pass --trace and/or --config".into()));
    }
    if let Some(p) = &args.trace {
        let format = match args.format {
            Some(f) => f,
            None => TraceFormat::from_path(p)
                .ok_or_else(|| Error::Argument(format!("cannot tell the format of {}; pass --format", p.display())))?,
        };
        let trace = load_trace(p, format, TraceLimits::default())?;
        let responses: usize = trace.steps().iter().map(|s| s.total_responses()).sum();
        println!(
            "{}: ok ({} prompts, {} steps, {} responses per prompt, {} responses)",
            p.display(),
            trace.prompt_count(),
            trace.steps().len(),
            trace.responses_per_prompt(),
            responses
        );
    }
    if let Some(p) = &args.config {
        let resolved = RunConfig::load(p)?.resolve()?;
        println!(
            "{}: ok ({} steps, {} GPUs)",
            p.display(),
            resolved.trace.steps().len(),
            resolved.topology.gpu_total()
        );
    }
    Ok(())
}
