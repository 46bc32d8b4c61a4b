//! `dp-consensus`: single runs, sweeps, privacy audits, bound reports and
//! noise schedules from one TOML configuration.
//!
//! Exit codes: 0 success, 1 invalid input (bad flag, config or key),
//! 2 failure while computing or writing results.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, ValueEnum};
use dp_consensus::analysis::{empirical_vs_bound, BoundInputs, BoundReport, MIN_RUNS};
use dp_consensus::engine::run_full;
use dp_consensus::experiments::{
    build_run, noise_replicates, sweep, ExperimentConfig, ExperimentError, SweepSpec,
};
use dp_consensus::privacy::{
    audit_tail, budget_check, run_audit, AuditReport, LossSummary, NeighborEdit, PrivacyBudget,
};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// One simulation; writes the per-round trajectory as CSV.
    Run,
    /// The `[sweep]` table's axis × values × seeds; writes CSV plus a JSON summary.
    Sweep,
    /// Coupled privacy-loss samples against the worst-case neighbour; writes JSON.
    Audit,
    /// Stage I error bound against repeated noisy runs; writes JSON.
    Bound,
    /// Step sizes, noise scales and per-round spend; writes CSV.
    Schedule,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Sweep => "sweep",
            Command::Audit => "audit",
            Command::Bound => "bound",
            Command::Schedule => "schedule",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dp-consensus",
    version,
    about = "Differentially private consensus gradient descent simulator"
)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output if omitted.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override a configuration key, e.g. `--set privacy.epsilon=2`. Repeatable;
    /// applied after the shorthand flags below.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set run.horizon=N`.
    #[arg(long = "T", value_name = "N")]
    horizon: Option<usize>,
    /// Shorthand for `--set privacy.epsilon=E`.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Shorthand for `--set privacy.delta=D`.
    #[arg(long)]
    delta: Option<f64>,
    /// Shorthand for `--set audit.samples=N`.
    #[arg(long)]
    samples: Option<usize>,
    /// Noisy runs averaged by `bound`.
    #[arg(long, default_value_t = MIN_RUNS)]
    runs: usize,
}

enum Failure {
    Input(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(e) => Failure::Input(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config_help() -> String {
    let mut out = String::from("Configuration keys (defaults):\n");
    for (key, value) in ExperimentConfig::default().entries() {
        out.push_str(&format!("  {key} = {value}\n"));
    }
    out
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| Failure::Input(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    let mut assignments = Vec::new();
    if let Some(t) = cli.horizon {
        assignments.push(format!("run.horizon={t}"));
    }
    if let Some(e) = cli.epsilon {
        assignments.push(format!("privacy.epsilon={e:?}"));
    }
    if let Some(d) = cli.delta {
        assignments.push(format!("privacy.delta={d:?}"));
    }
    if let Some(n) = cli.samples {
        assignments.push(format!("audit.samples={n}"));
    }
    assignments.extend(cli.set.iter().cloned());
    cfg.apply_overrides(assignments.iter().map(String::as_str))
        .map_err(|e| Failure::Input(e.to_string()))?;
    Ok(cfg)
}

/// `#`-prefixed lines with the command, the master seed and the resolved
/// configuration.
fn comment_header(command: Command, seed: u64, cfg: &ExperimentConfig) -> String {
    let mut out = format!(
        "# dp-consensus {}\n# master_seed = {seed}\n",
        command.name()
    );
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str(&format!("# {line}\n"));
        }
    }
    out
}

/// JSON documents carry the same provenance as fields.
#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    command: &'static str,
    master_seed: u64,
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    result: T,
}

fn json_document<T: Serialize>(
    command: Command,
    seed: u64,
    cfg: &ExperimentConfig,
    result: T,
) -> Result<Vec<u8>, Failure> {
    let doc = Provenance {
        command: command.name(),
        master_seed: seed,
        config: cfg,
        result,
    };
    let mut out = serde_json::to_vec_pretty(&doc).map_err(runtime)?;
    out.push(b'\n');
    Ok(out)
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| runtime(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(bytes).map_err(runtime),
    }
}

fn budget(cfg: &ExperimentConfig) -> Result<PrivacyBudget, Failure> {
    PrivacyBudget::new(cfg.privacy.epsilon, cfg.privacy.delta)
        .map_err(|e| Failure::Input(e.to_string()))
}

fn cmd_run(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let run = build_run(cfg, cli.seed)?;
    let metrics = run_full(&run).map_err(runtime)?;
    let mut out = comment_header(Command::Run, cli.seed, cfg).into_bytes();
    metrics.write_trajectory_csv(&mut out).map_err(runtime)?;
    emit(cli.output.as_deref(), &out)?;
    if let Some(err) = metrics.stage1_normalized_error() {
        eprintln!(
            "normalized error at T = {}: {err:.6e}; Stage II rounds: {}",
            run.horizon(),
            metrics.stage2_rounds()
        );
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let mut spec = SweepSpec::from_config(cfg.clone(), cli.seed);
    spec.jobs = cli.jobs;
    let table = sweep(&spec)?;
    let mut out = comment_header(Command::Sweep, cli.seed, cfg).into_bytes();
    table.write_csv(&mut out).map_err(runtime)?;
    emit(cli.output.as_deref(), &out)?;

    let summary: serde_json::Value =
        serde_json::from_str(&table.summary_json()).map_err(runtime)?;
    let doc = json_document(Command::Sweep, cli.seed, cfg, summary)?;
    match &cli.output {
        Some(path) => emit(Some(&summary_path(path)), &doc),
        None => io::stderr().write_all(&doc).map_err(runtime),
    }
}

/// `results.csv` → `results.summary.json`.
fn summary_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    output.with_file_name(format!("{stem}.summary.json"))
}

#[derive(Serialize)]
struct EditDoc {
    node: usize,
    index: usize,
    replacement: Vec<f64>,
}

#[derive(Serialize)]
struct AuditDoc {
    epsilon: f64,
    delta: f64,
    edit: EditDoc,
    #[serde(flatten)]
    report: AuditReport,
    summary: LossSummary,
    alpha: f64,
}

fn cmd_audit(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Failure> {
    if cfg.privacy.noiseless {
        return Err(Failure::Input(
            "invalid value for `privacy.noiseless`: an audit needs a noisy schedule".into(),
        ));
    }
    let budget = budget(cfg)?;
    let run = build_run(cfg, cli.seed)?;
    let edit = NeighborEdit::worst_case(&run.datasets, &run.domain)
        .ok_or_else(|| runtime("no data point to edit"))?;
    let samples = run_audit(&run, &edit, cfg.audit.samples, cli.seed).map_err(runtime)?;
    let report =
        audit_tail(&samples, &budget).map_err(|e| Failure::Input(format!("audit.samples: {e}")))?;
    let doc = AuditDoc {
        epsilon: budget.epsilon,
        delta: budget.delta,
        edit: EditDoc {
            node: edit.node,
            index: edit.index,
            replacement: edit.replacement.iter().copied().collect(),
        },
        report,
        summary: LossSummary::from_samples(&samples),
        alpha: run.schedule.alpha(),
    };
    emit(
        cli.output.as_deref(),
        &json_document(Command::Audit, cli.seed, cfg, doc)?,
    )
}

fn cmd_bound(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Failure> {
    if cli.runs < MIN_RUNS {
        return Err(Failure::Input(format!(
            "invalid value for `--runs`: need at least {MIN_RUNS}, got {}",
            cli.runs
        )));
    }
    let budget = if cfg.privacy.noiseless {
        None
    } else {
        Some(budget(cfg)?)
    };
    let (base, runs) = noise_replicates(cfg, cli.seed, cli.runs)?;
    let inputs = BoundInputs::for_mean_estimation(&base, budget).map_err(runtime)?;
    let report: BoundReport = empirical_vs_bound(&runs, &inputs).map_err(runtime)?;
    emit(
        cli.output.as_deref(),
        &json_document(Command::Bound, cli.seed, cfg, report)?,
    )
}

fn cmd_schedule(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let run = build_run(cfg, cli.seed)?;
    let schedule = &run.schedule;
    let mut out = comment_header(Command::Schedule, cli.seed, cfg).into_bytes();
    if !cfg.privacy.noiseless {
        let check =
            budget_check(schedule, schedule.sensitivities(), &budget(cfg)?).map_err(runtime)?;
        writeln!(
            out,
            "# budget_check: pass = {}, spent = {:e}, allowance = {:e}, ratio = {:.6}",
            check.pass,
            check.spent,
            check.allowance,
            check.ratio()
        )
        .map_err(runtime)?;
    }
    schedule.write_csv(&mut out).map_err(runtime)?;
    emit(cli.output.as_deref(), &out)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Input(
                "invalid value for `--jobs`: must be at least 1".into(),
            ));
        }
        // Fails only if a pool already exists, in which case it is used as is.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match cli.command {
        Command::Run => cmd_run(cli, &cfg),
        Command::Sweep => cmd_sweep(cli, &cfg),
        Command::Audit => cmd_audit(cli, &cfg),
        Command::Bound => cmd_bound(cli, &cfg),
        Command::Schedule => cmd_schedule(cli, &cfg),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(config_help()).try_get_matches();
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Input(m) | Failure::Runtime(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
