//! Command-line front end: oracle validation, benchmark sweeps and profile fits.
//!
//! Reports are JSON lines, one [`RunReport`] per workload point. Exit codes are
//! 0 on success, 1 when an oracle check misses its tolerance and 2 on usage,
//! schema or profile errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::naive_attention;
use crate::cost_model::{fit_affine, AffineFit, CostEstimator, CostTable, ProfileError};
use crate::element::Element;
use crate::executor::{execute, merge_schedule, round_count, sequential_schedule, BlockPool, ReduceOrder};
use crate::forest::{Forest, QueryBatch, RequestId};
use crate::metrics::{baseline_tasks, TrafficReport};
use crate::scheduler::{
    divide_and_schedule, identity_plan, tasks_from_forest, uniform_plan, DivisionPlan, Replanner, SearchMode, Task,
};
use crate::workloads::{Axis, WorkloadSpec};

/// Environment variable naming the default cost profile.
pub const PROFILE_ENV: &str = "CODEC_PROFILE";
pub const TOLERANCE_F64: f64 = 1e-10;
pub const TOLERANCE_F32: f64 = 1e-3;
/// Decode steps simulated for the replan summary.
pub const REPLAN_STEPS: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("spec: {0}")]
    Schema(String),
    #[error("profile: {0}")]
    Profile(#[from] ProfileError),
    #[error("{0}")]
    Run(String),
    #[error("max relative error {err:e} exceeds {tolerance:e}")]
    Tolerance { err: f64, tolerance: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance { .. } | CliError::Run(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "prefix-attn-bench",
    version,
    about = "Prefix-shared decode attention: validation and simulated benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a workload and compare it against the reference attention.
    Validate(RunArgs),
    /// Plan, count traffic and simulate makespans over a sweep.
    Bench(BenchArgs),
    /// Least-squares fit of cost = alpha + beta*n + gamma*n*n_q to a profile.
    ProfileFit(ProfileFitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Workload spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Cost profile CSV; defaults to $CODEC_PROFILE, then the bundled table.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Simulated thread blocks.
    #[arg(long, default_value_t = 8)]
    pub blocks: usize,
    /// Executor worker threads.
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Run in 32-bit floats.
    #[arg(long)]
    pub fp32: bool,
    /// Compare against the reference attention.
    #[arg(long)]
    pub oracle: bool,
    /// Write reports here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// AXIS=V1,V2,... with AXIS one of seq_len, batch, depth, shared_ratio, shape.
    #[arg(long)]
    pub sweep: Option<String>,
    /// NAME=on|off with NAME one of share_tree, partition, parallel_reduce.
    #[arg(long)]
    pub ablate: Vec<String>,
    /// Split every task into this many slices instead of searching.
    #[arg(long)]
    pub force_bk: Option<usize>,
    /// Re-run the division search every k decode steps.
    #[arg(long, default_value_t = Replanner::<CostTable>::DEFAULT_EVERY)]
    pub replan_every: usize,
    /// Also write a flat CSV projection of the reports.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileFitArgs {
    /// Profile CSV; defaults to $CODEC_PROFILE, then the bundled table.
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optimizations toggled by `--ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub share_tree: bool,
    pub partition: bool,
    pub parallel_reduce: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            share_tree: true,
            partition: true,
            parallel_reduce: true,
        }
    }
}

impl AblationFlags {
    pub fn parse(items: &[String]) -> Result<Self, CliError> {
        let mut flags = Self::default();
        for item in items {
            let (name, state) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--ablate expects NAME=on|off, got {item:?}")))?;
            let on = match state {
                "on" => true,
                "off" => false,
                _ => {
                    return Err(CliError::Usage(format!(
                        "--ablate state must be on or off, got {state:?}"
                    )))
                }
            };
            match name {
                "share_tree" => flags.share_tree = on,
                "partition" => flags.partition = on,
                "parallel_reduce" => flags.parallel_reduce = on,
                _ => return Err(CliError::Usage(format!("unknown ablation {name:?}"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: Axis,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub tasks: usize,
    pub subtasks: usize,
    pub makespan_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_l_ms: Option<f64>,
    pub search: SearchMode,
    /// Deepest per-request merge chain.
    pub reduction_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanSummary {
    pub every: usize,
    pub steps: usize,
    pub searches: usize,
    /// Mean makespan with split counts reused between searches.
    pub mean_makespan_ms: f64,
    /// Mean makespan when searching at every step.
    pub fresh_mean_makespan_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workload: WorkloadSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
    pub precision: String,
    pub blocks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rel_err_vs_oracle: Option<f64>,
    pub traffic: TrafficReport,
    pub plan_summary: PlanSummary,
    pub baseline_makespan_ms: f64,
    /// `baseline_makespan_ms / plan_summary.makespan_ms`.
    pub sim_speedup: f64,
    pub ablation_flags: AblationFlags,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_bk: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replan: Option<ReplanSummary>,
}

impl RunReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes") + "\n"
    }

    pub fn tolerance(&self) -> f64 {
        if self.precision == f32::NAME {
            TOLERANCE_F32
        } else {
            TOLERANCE_F64
        }
    }
}

/// Flat projection for plotting.
#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    family: &'a str,
    axis: &'a str,
    value: &'a str,
    precision: &'a str,
    blocks: usize,
    kv_rows_codec: u64,
    kv_rows_baseline: u64,
    reduction_ratio: f64,
    nq_bar: f64,
    subtasks: usize,
    makespan_ms: f64,
    baseline_makespan_ms: f64,
    sim_speedup: f64,
    max_rel_err_vs_oracle: Option<f64>,
}

pub fn write_csv(reports: &[RunReport], out: impl Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        let (axis, value) = r.sweep.as_ref().map_or(("", ""), |s| (s.axis.name(), s.value.as_str()));
        w.serialize(CsvRow {
            family: r.workload.family.name(),
            axis,
            value,
            precision: &r.precision,
            blocks: r.blocks,
            kv_rows_codec: r.traffic.kv_rows_codec,
            kv_rows_baseline: r.traffic.kv_rows_baseline,
            reduction_ratio: r.traffic.reduction_ratio,
            nq_bar: r.traffic.nq_bar,
            subtasks: r.plan_summary.subtasks,
            makespan_ms: r.plan_summary.makespan_ms,
            baseline_makespan_ms: r.baseline_makespan_ms,
            sim_speedup: r.sim_speedup,
            max_rel_err_vs_oracle: r.max_rel_err_vs_oracle,
        })
        .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads `path`, else `$CODEC_PROFILE`, else the bundled table.
pub fn load_profile(path: Option<&Path>) -> Result<CostTable, CliError> {
    let env = std::env::var_os(PROFILE_ENV).map(PathBuf::from);
    match path.map(Path::to_path_buf).or(env) {
        Some(p) => Ok(CostTable::from_path(&p)?),
        None => Ok(CostTable::bundled()),
    }
}

pub fn load_spec(path: &Path, seed: Option<u64>) -> Result<WorkloadSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let mut spec = WorkloadSpec::from_json(&text).map_err(|e| CliError::Schema(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

/// Settings for one report.
#[derive(Debug, Clone)]
pub struct PointConfig {
    pub blocks: usize,
    pub workers: usize,
    pub fp32: bool,
    pub oracle: bool,
    pub ablation: AblationFlags,
    pub force_bk: Option<usize>,
    /// Simulate re-planning at this cadence.
    pub replan_every: Option<usize>,
}

impl PointConfig {
    fn from_run(args: &RunArgs) -> Result<Self, CliError> {
        if args.blocks == 0 || args.workers == 0 {
            return Err(CliError::Usage("--blocks and --workers must be at least 1".into()));
        }
        Ok(Self {
            blocks: args.blocks,
            workers: args.workers,
            fp32: args.fp32,
            oracle: args.oracle,
            ablation: AblationFlags::default(),
            force_bk: None,
            replan_every: None,
        })
    }
}

/// Builds the report for one workload.
pub fn run_point(
    spec: &WorkloadSpec,
    sweep: Option<SweepPoint>,
    est: &CostTable,
    cfg: &PointConfig,
) -> Result<RunReport, CliError> {
    if cfg.fp32 {
        run_typed::<f32>(spec, sweep, est, cfg)
    } else {
        run_typed::<f64>(spec, sweep, est, cfg)
    }
}

fn run_typed<T: Element>(
    spec: &WorkloadSpec,
    sweep: Option<SweepPoint>,
    est: &CostTable,
    cfg: &PointConfig,
) -> Result<RunReport, CliError> {
    let schema = |e: &dyn std::fmt::Display| CliError::Schema(e.to_string());
    let run = |e: &dyn std::fmt::Display| CliError::Run(e.to_string());
    let (forest, queries) = spec.generate::<T>().map_err(|e| schema(&e))?;
    let forest: Forest<T> = if cfg.ablation.share_tree {
        forest
    } else {
        forest.unshare(&queries).map_err(|e| run(&e))?
    };

    let tasks = tasks_from_forest(&forest);
    let plan = match (cfg.force_bk, cfg.ablation.partition) {
        (Some(b), _) => uniform_plan(&tasks, b.max(1), est, cfg.blocks),
        (None, false) => identity_plan(&tasks, est, cfg.blocks),
        (None, true) => divide_and_schedule(&tasks, est, cfg.blocks),
    }
    .map_err(|e| run(&e))?;
    let baseline = divide_and_schedule(&baseline_tasks(&forest), est, cfg.blocks)
        .map_err(|e| run(&e))?
        .makespan_ms();

    let reduce = if cfg.ablation.parallel_reduce {
        ReduceOrder::Balanced
    } else {
        ReduceOrder::Sequential
    };
    let max_rel_err = if cfg.oracle {
        Some(oracle_error(&forest, &queries, &plan, cfg.workers, reduce)?)
    } else {
        None
    };

    let replan = match (cfg.replan_every, cfg.force_bk, cfg.ablation.partition) {
        (Some(every), None, true) => Some(simulate_replan(&forest, est, cfg.blocks, every).map_err(|e| run(&e))?),
        _ => None,
    };

    Ok(RunReport {
        workload: spec.clone(),
        sweep,
        precision: T::NAME.into(),
        blocks: cfg.blocks,
        max_rel_err_vs_oracle: max_rel_err,
        traffic: TrafficReport::of(&forest),
        plan_summary: PlanSummary {
            tasks: plan.tasks.len(),
            subtasks: plan.total_subtasks(),
            makespan_ms: plan.makespan_ms(),
            cost_l_ms: plan.cost_l_ms,
            search: plan.search,
            reduction_rounds: reduction_rounds(&forest, &plan, reduce),
        },
        baseline_makespan_ms: baseline,
        sim_speedup: baseline / plan.makespan_ms(),
        ablation_flags: cfg.ablation,
        force_bk: cfg.force_bk,
        replan,
    })
}

fn oracle_error<T: Element>(
    forest: &Forest<T>,
    queries: &QueryBatch<T>,
    plan: &DivisionPlan,
    workers: usize,
    reduce: ReduceOrder,
) -> Result<f64, CliError> {
    let pool = BlockPool::new(workers)
        .map_err(|e| CliError::Usage(e.to_string()))?
        .with_reduce(reduce);
    let out = execute(forest, queries, plan, &pool).map_err(|e| CliError::Run(e.to_string()))?;
    // The reference runs in f64 whatever the execution precision.
    let reference =
        naive_attention(&queries.cast::<f64>(), &forest.cast::<f64>()).map_err(|e| CliError::Run(e.to_string()))?;
    Ok(crate::attention::max_rel_err(
        out.out.as_slice(),
        reference.out.as_slice(),
        forest.d(),
    ))
}

/// Deepest merge chain over all requests.
pub fn reduction_rounds<T: Element>(forest: &Forest<T>, plan: &DivisionPlan, reduce: ReduceOrder) -> usize {
    let mut slices = vec![0; forest.nodes().len()];
    for (t, d) in plan.tasks.iter().zip(&plan.divisions) {
        slices[t.node.index()] = d.b_q * d.b_k;
    }
    (0..forest.num_requests())
        .map(|r| {
            let per_node: Vec<usize> = forest
                .prefix_path(RequestId(r))
                .expect("request in range")
                .iter()
                .map(|n| slices[n.index()])
                .collect();
            match reduce {
                ReduceOrder::Balanced => round_count(&merge_schedule(&per_node)),
                ReduceOrder::Sequential => round_count(&sequential_schedule(per_node.iter().sum())),
            }
        })
        .max()
        .unwrap_or(0)
}

/// Grows every leaf by one token per decode step and compares reusing split
/// counts between searches with searching at every step.
pub fn simulate_replan<T: Element, E: CostEstimator + ?Sized>(
    forest: &Forest<T>,
    est: &E,
    blocks: usize,
    every: usize,
) -> Result<ReplanSummary, crate::scheduler::ScheduleError> {
    let base = tasks_from_forest(forest);
    let leaf: Vec<bool> = base.iter().map(|t| forest.children(t.node).is_empty()).collect();
    let mut replanner = Replanner::new(est, blocks, every);
    let (mut searches, mut reused, mut fresh) = (0, 0.0, 0.0);
    for step in 0..REPLAN_STEPS {
        let tasks: Vec<Task> = base
            .iter()
            .zip(&leaf)
            .map(|(t, &l)| Task {
                n: t.n + if l { step } else { 0 },
                ..*t
            })
            .collect();
        let (plan, searched) = replanner.plan(step, &tasks)?;
        searches += usize::from(searched);
        reused += plan.makespan_ms();
        fresh += divide_and_schedule(&tasks, est, blocks)?.makespan_ms();
    }
    Ok(ReplanSummary {
        every: every.max(1),
        steps: REPLAN_STEPS,
        searches,
        mean_makespan_ms: reused / REPLAN_STEPS as f64,
        fresh_mean_makespan_ms: fresh / REPLAN_STEPS as f64,
    })
}

/// Runs one oracle-checked report. The error case carries a report too when
/// only the tolerance was missed.
pub fn cmd_validate(args: &RunArgs) -> Result<RunReport, (CliError, Option<Box<RunReport>>)> {
    let spec = load_spec(&args.spec, args.seed).map_err(|e| (e, None))?;
    let est = load_profile(args.profile.as_deref()).map_err(|e| (e, None))?;
    let mut cfg = PointConfig::from_run(args).map_err(|e| (e, None))?;
    cfg.oracle = true;
    let report = run_point(&spec, None, &est, &cfg).map_err(|e| (e, None))?;
    let err = report.max_rel_err_vs_oracle.unwrap_or(f64::INFINITY);
    // NaN fails the comparison and therefore the check.
    if err <= report.tolerance() {
        Ok(report)
    } else {
        let tolerance = report.tolerance();
        Err((CliError::Tolerance { err, tolerance }, Some(Box::new(report))))
    }
}

/// Parses `AXIS=V1,V2,...`.
pub fn parse_sweep(s: &str) -> Result<(Axis, Vec<String>), CliError> {
    let (axis, values) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--sweep expects AXIS=V1,V2,..., got {s:?}")))?;
    let axis: Axis = axis
        .trim()
        .parse()
        .map_err(|e: crate::workloads::WorkloadError| CliError::Usage(e.to_string()))?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Usage("--sweep needs at least one value".into()));
    }
    Ok((axis, values))
}

/// One report per sweep point, or a single report without `--sweep`.
pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<RunReport>, CliError> {
    let spec = load_spec(&args.run.spec, args.run.seed)?;
    let est = load_profile(args.run.profile.as_deref())?;
    let mut cfg = PointConfig::from_run(&args.run)?;
    cfg.ablation = AblationFlags::parse(&args.ablate)?;
    cfg.force_bk = args.force_bk;
    cfg.replan_every = Some(args.replan_every.max(1));
    if args.force_bk == Some(0) {
        return Err(CliError::Usage("--force-bk must be at least 1".into()));
    }
    let points: Vec<(WorkloadSpec, Option<SweepPoint>)> = match &args.sweep {
        None => vec![(spec, None)],
        Some(s) => {
            let (axis, values) = parse_sweep(s)?;
            values
                .into_iter()
                .map(|v| {
                    let point = spec.with_axis(axis, &v).map_err(|e| CliError::Schema(e.to_string()))?;
                    Ok((point, Some(SweepPoint { axis, value: v })))
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    points
        .into_iter()
        .map(|(spec, sweep)| run_point(&spec, sweep, &est, &cfg))
        .collect()
}

pub fn cmd_profile_fit(path: Option<&Path>) -> Result<AffineFit, CliError> {
    Ok(fit_affine(&load_profile(path)?))
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Parses `argv` and runs the chosen command; returns the process exit code.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Validate(args) => match cmd_validate(&args) {
            Ok(report) => emit(args.out.as_deref(), &report.to_json_line(), stdout),
            Err((e, report)) => {
                if let Some(r) = report {
                    let _ = emit(args.out.as_deref(), &r.to_json_line(), stdout);
                }
                Err(e)
            }
        },
        Command::Bench(args) => cmd_bench(&args).and_then(|reports| {
            let text: String = reports.iter().map(RunReport::to_json_line).collect();
            emit(args.run.out.as_deref(), &text, stdout)?;
            if let Some(p) = &args.csv {
                write_csv(&reports, fs::File::create(p)?)?;
            }
            match reports
                .iter()
                .find(|r| r.max_rel_err_vs_oracle.is_some_and(|e| e.is_nan() || e > r.tolerance()))
            {
                Some(r) => Err(CliError::Tolerance {
                    err: r.max_rel_err_vs_oracle.unwrap_or(f64::NAN),
                    tolerance: r.tolerance(),
                }),
                None => Ok(()),
            }
        }),
        Command::ProfileFit(args) => cmd_profile_fit(args.table.as_deref()).and_then(|fit| {
            let line = serde_json::to_string(&fit).expect("fit serializes") + "\n";
            emit(args.out.as_deref(), &line, stdout)
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
