//! Prefix evaluation with early stopping, plus the run-everything baseline.
//!
//! For k = 1..N the engine forms the prefix p^(k), obtains a candidate answer
//! (simulated, or the raw executor observation when simulation is disabled),
//! asks the critic whether that candidate already answers the question, and
//! stops at the first k where it does.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{Critic, CriticJudgment, PrefixElement, StepRecord};
use crate::llm::LlmError;
use crate::metrics::{RunLedger, TaskOutcome};
use crate::plan::{Plan, PlanStep};
use crate::simulator::{SimulationRequest, SimulationResult, Simulator, SimulatorError};
use crate::status::CompletionStatus;
use crate::store::RetrievalHit;

/// Stop iff the critic says the question can be answered now and the status
/// is Accomplished or Partially accomplished.
pub fn should_stop(judgment: &CriticJudgment) -> bool {
    judgment.can_answer_now && judgment.status.is_success()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Base,
    Spin,
    #[serde(rename = "spin_wo_sim")]
    SpinWithoutSimulator,
    #[serde(rename = "spin_wo_cri")]
    SpinWithoutCritic,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Base,
        RunMode::Spin,
        RunMode::SpinWithoutSimulator,
        RunMode::SpinWithoutCritic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Base => "base",
            RunMode::Spin => "spin",
            RunMode::SpinWithoutSimulator => "spin_wo_sim",
            RunMode::SpinWithoutCritic => "spin_wo_cri",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Observation produced by an executed step, passed to later steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepObservation {
    pub index: usize,
    pub agent: String,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionReport {
    pub observation: String,
    pub tool_calls: u64,
    pub api_calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub elapsed: Duration,
    /// Accomplished or NotAccomplished; errors are reported through `Err`.
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutorError {
    #[error("no scripted execution for step {0}")]
    MissingStep(usize),
    #[error("step {index} failed: {message}")]
    Failed { index: usize, message: String },
}

pub trait ExecutorPort: Send + Sync {
    fn execute(&self, step: &PlanStep, context: &[StepObservation]) -> Result<ExecutionReport, ExecutorError>;
}

/// Scripted status of one executor step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScriptedStatus {
    #[default]
    Accomplished,
    NotAccomplished,
    Error,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedStep {
    pub observation: String,
    #[serde(default)]
    pub tool_calls: u64,
    #[serde(default)]
    pub api_calls: u64,
    #[serde(default)]
    pub tokens_in: u64,
    #[serde(default)]
    pub tokens_out: u64,
    #[serde(default)]
    pub elapsed_ms: u64,
    #[serde(default)]
    pub status: ScriptedStatus,
}

/// Executor answering from a per-step script keyed by 1-based step index.
#[derive(Debug, Clone, Default)]
pub struct ScriptedExecutor {
    steps: BTreeMap<usize, ScriptedStep>,
}

impl ScriptedExecutor {
    pub fn new(steps: BTreeMap<usize, ScriptedStep>) -> Self {
        Self { steps }
    }
}

impl ExecutorPort for ScriptedExecutor {
    fn execute(&self, step: &PlanStep, _context: &[StepObservation]) -> Result<ExecutionReport, ExecutorError> {
        let s = self
            .steps
            .get(&step.index())
            .ok_or(ExecutorError::MissingStep(step.index()))?;
        let outcome = match s.status {
            ScriptedStatus::Accomplished => TaskOutcome::Accomplished,
            ScriptedStatus::NotAccomplished => TaskOutcome::NotAccomplished,
            ScriptedStatus::Error => {
                return Err(ExecutorError::Failed {
                    index: step.index(),
                    message: s.observation.clone(),
                })
            }
        };
        Ok(ExecutionReport {
            observation: s.observation.clone(),
            tool_calls: s.tool_calls,
            api_calls: s.api_calls,
            tokens_in: s.tokens_in,
            tokens_out: s.tokens_out,
            elapsed: Duration::from_millis(s.elapsed_ms),
            outcome,
        })
    }
}

/// Candidate-answer source for prefix evaluation.
pub trait SimulatorPort {
    fn predict(&self, request: &SimulationRequest) -> Result<SimulationResult, SimulatorError>;
}

impl SimulatorPort for Simulator<'_> {
    fn predict(&self, request: &SimulationRequest) -> Result<SimulationResult, SimulatorError> {
        self.run(request)
    }
}

pub trait CriticPort {
    fn judge(
        &self,
        question: &str,
        candidate_answer: &str,
        prefix: &[PrefixElement],
    ) -> Result<CriticJudgment, LlmError>;
}

impl CriticPort for Critic<'_> {
    fn judge(
        &self,
        question: &str,
        candidate_answer: &str,
        prefix: &[PrefixElement],
    ) -> Result<CriticJudgment, LlmError> {
        self.evaluate(question, candidate_answer, prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopDecision {
    pub k: usize,
    pub candidate: String,
    pub judgment: CriticJudgment,
    pub stopped: bool,
    pub hits_used: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefixRunResult {
    pub answer: String,
    pub k_star: usize,
    /// One entry per evaluated prefix; empty for baseline runs.
    pub decisions: Vec<StopDecision>,
    pub ledger: RunLedger,
}

#[derive(Debug, Error)]
pub enum EngineFailure {
    #[error("simulator: {0}")]
    Simulator(#[from] SimulatorError),
    #[error("critic: {0}")]
    Critic(#[from] LlmError),
    #[error("executor: {0}")]
    Executor(#[from] ExecutorError),
    #[error("mode {0} requires {1}")]
    MissingPort(RunMode, &'static str),
}

/// A run aborted at prefix `k`, with the effort spent so far.
#[derive(Debug, Error)]
#[error("run aborted at k={k}: {failure}")]
pub struct EngineError {
    pub k: usize,
    #[source]
    pub failure: EngineFailure,
    pub decisions: Vec<StopDecision>,
    /// Boxed to keep `Result<_, EngineError>` small.
    pub ledger: Box<RunLedger>,
}

/// Ports wired into a run. Executor-less runs are purely simulated.
#[derive(Clone, Copy, Default)]
pub struct Ports<'a> {
    pub simulator: Option<&'a dyn SimulatorPort>,
    pub critic: Option<&'a dyn CriticPort>,
    pub executor: Option<&'a dyn ExecutorPort>,
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn simulator_prefix_line(step: &PlanStep, observation: Option<&str>) -> String {
    let mut line = format!("{}: {}", step.agent(), step.task());
    if let Some(obs) = observation {
        line.push_str(&format!(" -> observation: {}", single_line(obs)));
    }
    line
}

fn task_outcome_of(report: &Result<ExecutionReport, ExecutorError>) -> TaskOutcome {
    match report {
        Ok(r) => r.outcome,
        Err(_) => TaskOutcome::Error,
    }
}

fn record_execution(ledger: &mut RunLedger, report: &Result<ExecutionReport, ExecutorError>) {
    match report {
        Ok(r) => ledger.record_task(
            r.outcome,
            r.tool_calls,
            r.api_calls,
            r.tokens_in,
            r.tokens_out,
            r.elapsed.as_secs_f64(),
        ),
        Err(_) => ledger.record_task(task_outcome_of(report), 0, 0, 0, 0, 0.0),
    }
}

/// Runs prefix evaluation in `mode` (any mode but `Base`).
///
/// With an executor wired, step k is executed before its prefix is evaluated
/// and the observations of executed steps are fed into the simulator's DAG
/// prefix. `SpinWithoutSimulator` uses the step-k observation as the
/// candidate and therefore needs an executor. `SpinWithoutCritic` never calls
/// the critic and never stops early.
pub fn run_prefix_evaluation(
    plan: &Plan,
    query: &str,
    mode: RunMode,
    ports: Ports<'_>,
    run_id: &str,
) -> Result<PrefixRunResult, EngineError> {
    let mut ledger = RunLedger::new(run_id, mode.as_str());
    let mut decisions: Vec<StopDecision> = Vec::new();
    let mut observations: Vec<StepObservation> = Vec::new();

    macro_rules! abort {
        ($k:expr, $failure:expr) => {
            return Err(EngineError {
                k: $k,
                failure: $failure.into(),
                decisions,
                ledger: Box::new(ledger),
            })
        };
    }

    if mode == RunMode::Base {
        abort!(0, EngineFailure::MissingPort(mode, "prefix evaluation (use run_baseline)"));
    }
    if mode == RunMode::SpinWithoutSimulator && ports.executor.is_none() {
        abort!(0, EngineFailure::MissingPort(mode, "an executor"));
    }
    if mode != RunMode::SpinWithoutSimulator && ports.simulator.is_none() {
        abort!(0, EngineFailure::MissingPort(mode, "a simulator"));
    }
    if mode != RunMode::SpinWithoutCritic && ports.critic.is_none() {
        abort!(0, EngineFailure::MissingPort(mode, "a critic"));
    }

    let n = plan.len();
    for k in 1..=n {
        let step = &plan.steps()[k - 1];

        let mut executed: Option<String> = None;
        if let Some(executor) = ports.executor {
            let report = executor.execute(step, &observations);
            record_execution(&mut ledger, &report);
            match report {
                Ok(r) => {
                    observations.push(StepObservation {
                        index: k,
                        agent: step.agent().to_string(),
                        observation: r.observation.clone(),
                    });
                    executed = Some(r.observation);
                }
                Err(e) => abort!(k, e),
            }
        }

        let (candidate, hits_used) = if mode == RunMode::SpinWithoutSimulator {
            (executed.unwrap_or_default(), Vec::new())
        } else {
            let simulator = ports.simulator.expect("checked above");
            let prefix_lines: Vec<String> = if ports.executor.is_some() {
                plan.steps()[..k]
                    .iter()
                    .zip(&observations)
                    .map(|(s, o)| simulator_prefix_line(s, Some(&o.observation)))
                    .collect()
            } else {
                plan.steps()[..k - 1]
                    .iter()
                    .map(|s| simulator_prefix_line(s, None))
                    .collect()
            };
            let request = SimulationRequest::new(query, step.task(), step.agent()).with_prefix(prefix_lines);
            let started = Instant::now();
            match simulator.predict(&request) {
                Ok(sim) => {
                    ledger.record_call("simulator", k, sim.tokens_in, sim.tokens_out, started.elapsed().as_secs_f64());
                    (sim.predicted_output, sim.hits_used)
                }
                Err(e) => abort!(k, e),
            }
        };

        let judgment = if mode == RunMode::SpinWithoutCritic {
            CriticJudgment::disabled()
        } else {
            let critic = ports.critic.expect("checked above");
            let prefix: Vec<PrefixElement> = plan.steps()[..k]
                .iter()
                .map(|s| PrefixElement::Record(StepRecord::from(s)))
                .collect();
            let started = Instant::now();
            match critic.judge(query, &candidate, &prefix) {
                Ok(j) => {
                    ledger.record_call("critic", k, j.tokens_in, j.tokens_out, started.elapsed().as_secs_f64());
                    j
                }
                Err(e) => abort!(k, e),
            }
        };

        let stopped = should_stop(&judgment);
        decisions.push(StopDecision {
            k,
            candidate: candidate.clone(),
            judgment,
            stopped,
            hits_used,
        });
        if stopped || k == n {
            return Ok(PrefixRunResult {
                answer: candidate,
                k_star: k,
                decisions,
                ledger,
            });
        }
    }
    unreachable!("plans have at least one step")
}

/// Executes every step in index order without stopping. Step failures are
/// recorded as Error outcomes and the run continues. The answer is the last
/// successful observation.
pub fn run_baseline(plan: &Plan, query: &str, executor: &dyn ExecutorPort, run_id: &str) -> PrefixRunResult {
    let _ = query;
    let mut ledger = RunLedger::new(run_id, RunMode::Base.as_str());
    let mut observations: Vec<StepObservation> = Vec::new();
    for step in plan.steps() {
        let report = executor.execute(step, &observations);
        record_execution(&mut ledger, &report);
        if let Ok(r) = report {
            observations.push(StepObservation {
                index: step.index(),
                agent: step.agent().to_string(),
                observation: r.observation,
            });
        }
    }
    PrefixRunResult {
        answer: observations.last().map(|o| o.observation.clone()).unwrap_or_default(),
        k_star: plan.len(),
        decisions: Vec::new(),
        ledger,
    }
}

/// Critic stand-in returning a fixed status sequence, one per call.
pub struct FixedCritic {
    judgments: std::sync::Mutex<std::collections::VecDeque<(CompletionStatus, bool)>>,
}

impl FixedCritic {
    pub fn new(judgments: impl IntoIterator<Item = (CompletionStatus, bool)>) -> Self {
        Self {
            judgments: std::sync::Mutex::new(judgments.into_iter().collect()),
        }
    }
}

impl CriticPort for FixedCritic {
    fn judge(&self, _q: &str, _a: &str, _p: &[PrefixElement]) -> Result<CriticJudgment, LlmError> {
        let mut queue = self.judgments.lock().unwrap_or_else(|e| e.into_inner());
        let (status, can_answer_now) = queue.pop_front().ok_or(LlmError::ScriptExhausted { served: 0 })?;
        Ok(CriticJudgment {
            status,
            can_answer_now,
            rationale: "fixed".to_string(),
            tokens_in: 0,
            tokens_out: 0,
            route: crate::critic::ParseRoute::Strict,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::parse_plan_text;
    use crate::critic::ParseRoute;
    use CompletionStatus::*;

    struct EchoSimulator;

    impl SimulatorPort for EchoSimulator {
        fn predict(&self, request: &SimulationRequest) -> Result<SimulationResult, SimulatorError> {
            Ok(SimulationResult {
                predicted_output: format!("predicted {}", request.task_description),
                tokens_in: 1,
                tokens_out: 1,
                hits_used: Vec::new(),
            })
        }
    }

    fn plan(n: usize) -> Plan {
        let text: Vec<String> = (1..=n)
            .map(|i| {
                let dep = if i == 1 { "None".to_string() } else { format!("#S{}", i - 1) };
                format!("#Task{i}: task {i}\n#Agent{i}: A\n#Dependency{i}: {dep}\n#ExpectedOutput{i}: out {i}")
            })
            .collect();
        parse_plan_text(&text.join("\n\n")).plan.unwrap()
    }

    fn judgment(status: CompletionStatus, can: bool) -> CriticJudgment {
        CriticJudgment {
            status,
            can_answer_now: can,
            rationale: "r".into(),
            tokens_in: 0,
            tokens_out: 0,
            route: ParseRoute::Strict,
        }
    }

    #[test]
    fn stop_truth_table() {
        for (s, c, want) in [
            (Accomplished, true, true),
            (PartiallyAccomplished, true, true),
            (NotAccomplished, true, false),
            (Accomplished, false, false),
            (PartiallyAccomplished, false, false),
            (NotAccomplished, false, false),
        ] {
            assert_eq!(should_stop(&judgment(s, c)), want, "{s:?} {c}");
        }
    }

    fn ports<'a>(sim: &'a EchoSimulator, critic: &'a FixedCritic) -> Ports<'a> {
        Ports {
            simulator: Some(sim),
            critic: Some(critic),
            executor: None,
        }
    }

    #[test]
    fn single_step_stop() {
        let critic = FixedCritic::new([(Accomplished, true)]);
        let r = run_prefix_evaluation(&plan(1), "q", RunMode::Spin, ports(&EchoSimulator, &critic), "r").unwrap();
        assert_eq!(r.k_star, 1);
        assert_eq!(r.ledger.executed_tasks, 0);
    }

    #[test]
    fn never_stop_returns_last() {
        let critic = FixedCritic::new([(NotAccomplished, false); 4]);
        let r = run_prefix_evaluation(&plan(4), "q", RunMode::Spin, ports(&EchoSimulator, &critic), "r").unwrap();
        assert_eq!(r.k_star, 4);
        assert_eq!(r.answer, "predicted task 4");
        assert_eq!(r.decisions.len(), 4);
    }

    #[test]
    fn no_calls_after_stop() {
        let critic = FixedCritic::new([(NotAccomplished, true), (PartiallyAccomplished, true), (Accomplished, true)]);
        let r = run_prefix_evaluation(&plan(4), "q", RunMode::Spin, ports(&EchoSimulator, &critic), "r").unwrap();
        assert_eq!(r.k_star, 2);
        assert_eq!(r.ledger.calls.len(), 4);
        assert_eq!(critic.judgments.lock().unwrap().len(), 1);
    }

    fn executor(n: usize) -> ScriptedExecutor {
        ScriptedExecutor::new(
            (1..=n)
                .map(|i| {
                    (
                        i,
                        ScriptedStep {
                            observation: format!("obs {i}"),
                            tool_calls: 2,
                            api_calls: 1,
                            ..Default::default()
                        },
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn ablations() {
        let exec = executor(3);
        let critic = FixedCritic::new([(NotAccomplished, false), (Accomplished, true)]);
        let p = Ports {
            simulator: None,
            critic: Some(&critic),
            executor: Some(&exec),
        };
        let r = run_prefix_evaluation(&plan(3), "q", RunMode::SpinWithoutSimulator, p, "r").unwrap();
        assert_eq!((r.k_star, r.answer.as_str()), (2, "obs 2"));
        assert_eq!(r.ledger.executed_tasks, 2);

        let p = Ports {
            simulator: Some(&EchoSimulator),
            critic: None,
            executor: Some(&exec),
        };
        let r = run_prefix_evaluation(&plan(3), "q", RunMode::SpinWithoutCritic, p, "r").unwrap();
        assert_eq!(r.k_star, 3);
        assert!(r.decisions.iter().all(|d| d.judgment.route == ParseRoute::Disabled));

        let p = Ports {
            simulator: None,
            critic: Some(&critic),
            executor: None,
        };
        let err = run_prefix_evaluation(&plan(3), "q", RunMode::SpinWithoutSimulator, p, "r").unwrap_err();
        assert!(matches!(err.failure, EngineFailure::MissingPort(..)));
    }

    #[test]
    fn baseline_records_errors_and_continues() {
        let mut steps: BTreeMap<usize, ScriptedStep> = BTreeMap::new();
        steps.insert(1, ScriptedStep { observation: "a".into(), ..Default::default() });
        steps.insert(3, ScriptedStep { observation: "c".into(), ..Default::default() });
        steps.insert(4, ScriptedStep { observation: "boom".into(), status: ScriptedStatus::Error, ..Default::default() });
        let r = run_baseline(&plan(4), "q", &ScriptedExecutor::new(steps), "b");
        assert_eq!(r.ledger.executed_tasks, 4);
        assert_eq!(
            r.ledger.task_outcomes,
            vec![TaskOutcome::Accomplished, TaskOutcome::Error, TaskOutcome::Accomplished, TaskOutcome::Error]
        );
        assert_eq!(r.answer, "c");
        assert_eq!(r.k_star, 4);
    }

    #[test]
    fn executor_failure_aborts_spin_with_partial_ledger() {
        let mut steps: BTreeMap<usize, ScriptedStep> = BTreeMap::new();
        steps.insert(1, ScriptedStep { observation: "a".into(), ..Default::default() });
        let exec = ScriptedExecutor::new(steps);
        let critic = FixedCritic::new([(NotAccomplished, false); 3]);
        let p = Ports {
            simulator: Some(&EchoSimulator),
            critic: Some(&critic),
            executor: Some(&exec),
        };
        let err = run_prefix_evaluation(&plan(3), "q", RunMode::Spin, p, "r").unwrap_err();
        assert_eq!(err.k, 2);
        assert_eq!(err.ledger.executed_tasks, 2);
        assert_eq!(err.decisions.len(), 1);
    }
}
