//! Command-line front end. `main_with` is the whole program; the binary only
//! forwards process arguments and exits with its return code.
//!
//! Exit codes: 0 success or valid, 1 invalid plan or failed repair, 2 usage or
//! malformed input, 3 port or transport failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::contract::{validate_plan_text, ErrorCode, ValidationReport};
use crate::critic::{build_fewshot_examples, Critic, PrefixElement, Trajectory};
use crate::engine::{EngineFailure, RunMode};
use crate::llm::{CompletionPort, Gateway, HttpBackend, ScriptedBackend, ScriptedResponse};
use crate::metrics::{aggregate_by_mode, append_ledger, read_ledger_dir, render_report, ReportFormat};
use crate::plan::AgentRegistry;
use crate::repair::{run_validation_repair, RepairResult, DEFAULT_RETRY_BUDGET};
use crate::scenario::{planner_gateway, run_scenario, RunSettings, ScenarioError, ScenarioFile, ScenarioRunError};
use crate::simulator::{simulate, SimulationRequest, SimulatorConfig, SimulatorError};
use crate::store::{HashingEmbedder, TrajectoryStore, DEFAULT_TOP_K};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PORT: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn port(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PORT,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::NoBackend(..) => Self::port(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Base,
    Spin,
    SpinWoSim,
    SpinWoCri,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Base => RunMode::Base,
            ModeArg::Spin => RunMode::Spin,
            ModeArg::SpinWoSim => RunMode::SpinWithoutSimulator,
            ModeArg::SpinWoCri => RunMode::SpinWithoutCritic,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dagstop", version, about = "Validate, repair and run DAG plans with prefix-based early stopping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate one plan file, or every file in a directory.
    Validate(ValidateArgs),
    /// Generate a plan and repair it until it validates or the budget runs out.
    Repair(RepairArgs),
    /// Run a scenario in one execution mode and append its ledger.
    Run(RunArgs),
    /// Predict the output of one task.
    Simulate(SimulateArgs),
    /// Judge a candidate answer.
    CriticEval(CriticArgs),
    /// Aggregate ledgers into outcome and effort tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, conflicts_with = "plan_dir", required_unless_present = "plan_dir")]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub plan_dir: Option<PathBuf>,
    /// Allowed agent names: a file (JSON array or one name per line) or a comma-separated list.
    #[arg(long)]
    pub agents: String,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct RepairArgs {
    /// Scenario supplying base prompt, agents and planner script.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RETRY_BUDGET)]
    pub retry_budget: u32,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub ledger_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RETRY_BUDGET)]
    pub retry_budget: u32,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub agent: String,
    #[arg(long)]
    pub task: String,
    /// DAG prefix line; repeatable.
    #[arg(long = "prefix")]
    pub prefix: Vec<String>,
    /// Trajectory store file (JSON lines); defaults to the DAGSTOP_STORE location.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Few-shot trajectories (JSON array).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Scripted completions (JSON array) instead of the HTTP backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CriticArgs {
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub answer: String,
    /// DAG prefix line; repeatable.
    #[arg(long = "prefix")]
    pub prefix: Vec<String>,
    /// Trajectories for few-shot examples (JSON array).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Scenario context (JSON object file).
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Scripted completions (JSON array) instead of the HTTP backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ledger_dir: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    #[arg(long)]
    pub nonzero_only: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Validate(a) => cmd_validate(&a, out),
        Command::Repair(a) => cmd_repair(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::CriticEval(a) => cmd_critic_eval(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::usage(format!("malformed JSON in {}: {e}", path.display())))
}

/// A path to a JSON array or a newline list, or else a comma-separated list.
pub fn parse_agents(spec: &str) -> Result<AgentRegistry, CliError> {
    let path = Path::new(spec);
    let names: Vec<String> = if path.is_file() {
        let text = read_text(path)?;
        match serde_json::from_str::<Vec<String>>(&text) {
            Ok(v) => v,
            Err(_) => text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        }
    } else {
        spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
    };
    if names.is_empty() {
        return Err(CliError::usage("agent list is empty"));
    }
    AgentRegistry::new(names).map_err(|e| CliError::usage(e.to_string()))
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn write_report_table(out: &mut dyn Write, report: &ValidationReport) -> Result<(), CliError> {
    writeln!(out, "valid: {}", report.is_valid)?;
    for e in &report.errors {
        writeln!(out, "{}: {}", e.code, e.message)?;
    }
    Ok(())
}

/// Success rate and per-rule incidence over a set of plan files. Incidence
/// counts files that triggered a rule at least once.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectorySummary {
    pub files: usize,
    pub valid: usize,
    pub success_rate: f64,
    pub incidence: BTreeMap<String, usize>,
}

pub fn summarize_directory(dir: &Path, agents: &AgentRegistry) -> Result<DirectorySummary, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && !p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!("no plan files in {}", dir.display())));
    }
    let mut incidence: BTreeMap<String, usize> = ErrorCode::ALL.iter().map(|c| (c.to_string(), 0)).collect();
    let mut valid = 0;
    for f in &files {
        let report = validate_plan_text(&read_text(f)?, agents);
        if report.is_valid {
            valid += 1;
        }
        for code in report.codes() {
            *incidence.entry(code.to_string()).or_default() += 1;
        }
    }
    Ok(DirectorySummary {
        files: files.len(),
        valid,
        success_rate: valid as f64 / files.len() as f64,
        incidence,
    })
}

pub fn cmd_validate(a: &ValidateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let agents = parse_agents(&a.agents)?;
    if let Some(dir) = &a.plan_dir {
        let summary = summarize_directory(dir, &agents)?;
        match a.format {
            Format::Json => write_json(out, &summary)?,
            Format::Table => {
                writeln!(out, "files: {}", summary.files)?;
                writeln!(out, "valid: {}", summary.valid)?;
                writeln!(out, "success_rate: {:.3}", summary.success_rate)?;
                for code in ErrorCode::ALL {
                    writeln!(out, "{}: {}", code, summary.incidence[code.as_str()])?;
                }
            }
        }
        return Ok(EXIT_OK);
    }
    let path = a.plan.as_ref().expect("clap requires --plan or --plan-dir");
    let report = validate_plan_text(&read_text(path)?, &agents);
    match a.format {
        Format::Json => write_json(out, &report)?,
        Format::Table => write_report_table(out, &report)?,
    }
    Ok(if report.is_valid { EXIT_OK } else { EXIT_INVALID })
}

pub fn cmd_repair(a: &RepairArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let scenario = ScenarioFile::load(&a.scenario)?;
    let agents = scenario.registry()?;
    let planner = planner_gateway(&scenario)?;
    let outcome = run_validation_repair(&scenario.base_prompt, &planner, &agents, a.retry_budget)
        .map_err(|e| CliError::port(e.to_string()))?;
    match a.format {
        Format::Json => write_json(out, &outcome)?,
        Format::Table => {
            writeln!(out, "attempts: {}", outcome.attempts)?;
            match &outcome.result {
                RepairResult::Valid { plan_text } => {
                    writeln!(out, "result: valid")?;
                    writeln!(out, "{plan_text}")?;
                }
                RepairResult::Failed { last_errors } => {
                    writeln!(out, "result: failed")?;
                    for e in last_errors {
                        writeln!(out, "{}: {}", e.code, e.message)?;
                    }
                }
            }
        }
    }
    Ok(if outcome.is_valid() { EXIT_OK } else { EXIT_INVALID })
}

#[derive(Serialize)]
struct RunSummary<'a> {
    scenario: &'a str,
    mode: &'a str,
    k_star: usize,
    answer: &'a str,
    planner_attempts: u32,
    ledger: &'a crate::metrics::RunLedger,
}

pub fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let scenario = ScenarioFile::load(&a.scenario)?;
    let mode = RunMode::from(a.mode);
    let settings = RunSettings {
        retry_budget: a.retry_budget,
        top_k: a.top_k,
    };
    let run = match run_scenario(&scenario, mode, settings) {
        Ok(run) => run,
        Err(ScenarioRunError::PlanInvalid { attempts, errors }) => {
            writeln!(out, "planning failed after {attempts} planner calls")?;
            for e in errors {
                writeln!(out, "- {e}")?;
            }
            return Ok(EXIT_INVALID);
        }
        Err(ScenarioRunError::Scenario(e)) => return Err(e.into()),
        Err(ScenarioRunError::Engine(e)) => {
            if let Some(dir) = &a.ledger_dir {
                persist_ledger(dir, &e.ledger)?;
            }
            return Err(match e.failure {
                EngineFailure::MissingPort(..) => CliError::usage(e.to_string()),
                _ => CliError::port(e.to_string()),
            });
        }
        Err(e) => return Err(CliError::port(e.to_string())),
    };
    if let Some(dir) = &a.ledger_dir {
        persist_ledger(dir, &run.result.ledger)?;
    }
    let r = &run.result;
    match a.format {
        Format::Json => write_json(
            out,
            &RunSummary {
                scenario: &scenario.id,
                mode: mode.as_str(),
                k_star: r.k_star,
                answer: &r.answer,
                planner_attempts: run.repair.attempts,
                ledger: &r.ledger,
            },
        )?,
        Format::Table => {
            writeln!(out, "scenario: {}", scenario.id)?;
            writeln!(out, "mode: {mode}")?;
            writeln!(out, "k_star: {}", r.k_star)?;
            writeln!(out, "executed_tasks: {}", r.ledger.executed_tasks)?;
            writeln!(out, "tool_calls: {}", r.ledger.tool_calls)?;
            writeln!(out, "api_calls: {}", r.ledger.api_calls)?;
            writeln!(out, "tokens_sent: {}", r.ledger.tokens_sent)?;
            writeln!(out, "tokens_received: {}", r.ledger.tokens_received)?;
            writeln!(out, "overhead_tokens_sent: {}", r.ledger.overhead_tokens_sent)?;
            writeln!(out, "overhead_tokens_received: {}", r.ledger.overhead_tokens_received)?;
            writeln!(out, "answer: {}", r.answer)?;
        }
    }
    Ok(EXIT_OK)
}

fn persist_ledger(dir: &Path, ledger: &crate::metrics::RunLedger) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    append_ledger(dir.join("runs.jsonl"), ledger).map_err(|e| CliError::usage(e.to_string()))
}

fn gateway_from(script: Option<&PathBuf>) -> Result<Gateway, CliError> {
    match script {
        Some(path) => {
            let entries: Vec<ScriptedResponse> = read_json(path)?;
            Ok(Gateway::new(ScriptedBackend::queue(entries)))
        }
        None => HttpBackend::from_env()
            .map(Gateway::new)
            .map_err(|e| CliError::port(e.to_string())),
    }
}

fn read_trajectories(path: Option<&PathBuf>) -> Result<Vec<Trajectory>, CliError> {
    path.map(|p| read_json::<Vec<Trajectory>>(p)).transpose().map(Option::unwrap_or_default)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    predicted_output: &'a str,
    tokens_in: u64,
    tokens_out: u64,
    hits_used: Vec<&'a str>,
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut config = match &a.store {
        Some(path) => SimulatorConfig {
            store_path: Some(path.clone()),
            ..SimulatorConfig::default()
        },
        None => SimulatorConfig::from_env().map_err(|e| CliError::usage(e.to_string()))?,
    };
    config.top_k = a.top_k;
    let store: TrajectoryStore = config.open_store().map_err(|e| CliError::usage(e.to_string()))?;
    let embedder = HashingEmbedder::new(config.dimension);
    let trajectories = read_trajectories(a.trajectories.as_ref())?;
    let blobs = trajectories
        .iter()
        .map(|t| serde_json::to_string_pretty(t).expect("trajectory serializes"))
        .collect();
    let request = SimulationRequest::new(&a.question, &a.task, &a.agent)
        .with_prefix(a.prefix.clone())
        .with_trajectories(blobs);
    let llm = gateway_from(a.script.as_ref())?;
    let result = simulate(&request, &store, &embedder, &llm as &dyn CompletionPort, &config).map_err(|e| match e {
        SimulatorError::Llm(_) | SimulatorError::EmptyCompletion => CliError::port(e.to_string()),
        _ => CliError::usage(e.to_string()),
    })?;
    match a.format {
        Format::Json => write_json(
            out,
            &SimulateOutput {
                predicted_output: &result.predicted_output,
                tokens_in: result.tokens_in,
                tokens_out: result.tokens_out,
                hits_used: result.hits_used.iter().map(|h| h.record.id.as_str()).collect(),
            },
        )?,
        Format::Table => {
            writeln!(out, "{}", result.predicted_output)?;
            writeln!(out, "tokens: in={}, out={}", result.tokens_in, result.tokens_out)?;
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_critic_eval(a: &CriticArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let trajectories = read_trajectories(a.trajectories.as_ref())?;
    let context: Option<Value> = a.context.as_ref().map(|p| read_json(p)).transpose()?;
    let llm = gateway_from(a.script.as_ref())?;
    let critic = Critic::new(&llm)
        .with_examples(build_fewshot_examples(&trajectories).examples)
        .with_scenario_context(context);
    let prefix: Vec<PrefixElement> = a.prefix.iter().cloned().map(PrefixElement::Text).collect();
    let judgment = critic
        .evaluate(&a.question, &a.answer, &prefix)
        .map_err(|e| CliError::port(e.to_string()))?;
    match a.format {
        Format::Json => write_json(out, &judgment)?,
        Format::Table => {
            writeln!(out, "status: {}", judgment.status)?;
            writeln!(out, "can_answer_now: {}", judgment.can_answer_now)?;
            writeln!(out, "rationale: {}", judgment.rationale)?;
            writeln!(out, "tokens: in={}, out={}", judgment.tokens_in, judgment.tokens_out)?;
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let ledgers = read_ledger_dir(&a.ledger_dir).map_err(|e| CliError::usage(e.to_string()))?;
    let reports = aggregate_by_mode(&ledgers, a.nonzero_only).map_err(|e| CliError::usage(e.to_string()))?;
    let format = match a.format {
        Format::Table => ReportFormat::Table,
        Format::Json => ReportFormat::Json,
    };
    write!(out, "{}", render_report(&reports, format))?;
    Ok(EXIT_OK)
}
