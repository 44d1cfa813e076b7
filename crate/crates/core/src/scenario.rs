//! Scenario files: a question, a planner script, and scripted executor,
//! simulator and critic behavior, so that a whole run is reproducible from one
//! JSON document.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::critic::{build_fewshot_examples, Critic, Trajectory};
use crate::engine::{
    run_baseline, run_prefix_evaluation, EngineError, Ports, PrefixRunResult, RunMode,
    ScriptedExecutor, ScriptedStep,
};
use crate::llm::{CompletionPort, Gateway, HttpBackend, LlmError, ScriptedBackend, ScriptedResponse};
use crate::plan::AgentRegistry;
use crate::repair::{run_validation_repair, RepairError, RepairOutcome, RepairResult};
use crate::status::CompletionStatus;
use crate::store::{Embedder, HashingEmbedder, StoreError, TaskSummaryRecord, TrajectoryStore};
use crate::simulator::{Simulator, SimulatorConfig};
use crate::contract::parse_plan_text;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error("retrieval corpus: {0}")]
    Store(#[from] StoreError),
    #[error("no {0} script and no HTTP backend configured: {1}")]
    NoBackend(&'static str, LlmError),
}

/// Stored summary without an embedding; embedded on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub id: String,
    pub agent_name: String,
    pub task_text: String,
    pub status: CompletionStatus,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub base_prompt: String,
    pub agents_allowed: Vec<String>,
    #[serde(default)]
    pub scripted_planner: Vec<ScriptedResponse>,
    #[serde(default)]
    pub scripted_executor: BTreeMap<String, ScriptedStep>,
    #[serde(default)]
    pub scripted_simulator: Option<BTreeMap<String, ScriptedResponse>>,
    #[serde(default)]
    pub scripted_critic: Option<BTreeMap<String, ScriptedResponse>>,
    #[serde(default)]
    pub retrieval: Vec<RetrievalEntry>,
    #[serde(default)]
    pub trajectories: Vec<Trajectory>,
    #[serde(default)]
    pub scenario_context: Option<Value>,
}

fn parse_step_keys<T: Clone>(map: &BTreeMap<String, T>, what: &str) -> Result<BTreeMap<usize, T>, ScenarioError> {
    map.iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<usize>()
                .ok()
                .filter(|i| *i >= 1)
                .map(|i| (i, v.clone()))
                .ok_or_else(|| ScenarioError::Malformed(format!("{what} key '{k}' is not a positive step index")))
        })
        .collect()
}

/// Per-k script as a queue; keys must be exactly 1..m.
fn per_k_queue(map: &BTreeMap<String, ScriptedResponse>, what: &str) -> Result<Vec<ScriptedResponse>, ScenarioError> {
    let parsed = parse_step_keys(map, what)?;
    for (pos, k) in parsed.keys().enumerate() {
        if *k != pos + 1 {
            return Err(ScenarioError::Malformed(format!(
                "{what} keys must be 1..{}; missing {}",
                parsed.len(),
                pos + 1
            )));
        }
    }
    Ok(parsed.into_values().collect())
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Malformed(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        if self.agents_allowed.is_empty() {
            return Err(ScenarioError::Malformed("agents_allowed is empty".into()));
        }
        if self.question.trim().is_empty() {
            return Err(ScenarioError::Malformed("question is empty".into()));
        }
        self.registry()?;
        parse_step_keys(&self.scripted_executor, "scripted_executor")?;
        if let Some(m) = &self.scripted_simulator {
            per_k_queue(m, "scripted_simulator")?;
        }
        if let Some(m) = &self.scripted_critic {
            per_k_queue(m, "scripted_critic")?;
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<AgentRegistry, ScenarioError> {
        AgentRegistry::new(self.agents_allowed.iter().cloned()).map_err(|e| ScenarioError::Malformed(e.to_string()))
    }

    pub fn executor(&self) -> Result<ScriptedExecutor, ScenarioError> {
        Ok(ScriptedExecutor::new(parse_step_keys(&self.scripted_executor, "scripted_executor")?))
    }

    pub fn retrieval_store(&self, embedder: &dyn Embedder) -> Result<TrajectoryStore, ScenarioError> {
        let mut store = TrajectoryStore::new(embedder.dimension());
        for e in &self.retrieval {
            store.insert(TaskSummaryRecord {
                id: e.id.clone(),
                agent_name: e.agent_name.clone(),
                task_text: e.task_text.clone(),
                status: e.status,
                summary: e.summary.clone(),
                embedding: embedder.embed(&e.task_text),
            })?;
        }
        Ok(store)
    }

    pub fn trajectory_blobs(&self) -> Vec<String> {
        self.trajectories
            .iter()
            .map(|t| serde_json::to_string_pretty(t).expect("trajectory serializes"))
            .collect()
    }
}

fn gateway_for(
    script: Option<Vec<ScriptedResponse>>,
    role: &'static str,
) -> Result<Gateway, ScenarioError> {
    match script {
        Some(entries) => Ok(Gateway::new(ScriptedBackend::queue(entries).with_id(format!("scripted-{role}")))),
        None => HttpBackend::from_env()
            .map(Gateway::new)
            .map_err(|e| ScenarioError::NoBackend(role, e)),
    }
}

pub fn planner_gateway(s: &ScenarioFile) -> Result<Gateway, ScenarioError> {
    gateway_for((!s.scripted_planner.is_empty()).then(|| s.scripted_planner.clone()), "planner")
}

pub fn simulator_gateway(s: &ScenarioFile) -> Result<Gateway, ScenarioError> {
    let script = s.scripted_simulator.as_ref().map(|m| per_k_queue(m, "scripted_simulator")).transpose()?;
    gateway_for(script, "simulator")
}

pub fn critic_gateway(s: &ScenarioFile) -> Result<Gateway, ScenarioError> {
    let script = s.scripted_critic.as_ref().map(|m| per_k_queue(m, "scripted_critic")).transpose()?;
    gateway_for(script, "critic")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSettings {
    pub retry_budget: u32,
    pub top_k: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            retry_budget: crate::repair::DEFAULT_RETRY_BUDGET,
            top_k: crate::store::DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioRunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error("planning failed after {attempts} planner calls: {errors:?}")]
    PlanInvalid { attempts: u32, errors: Vec<String> },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub repair: RepairOutcome,
    pub result: PrefixRunResult,
}

/// Plans through the repair loop, then runs `mode` with the scenario's
/// scripted executor wired in.
pub fn run_scenario(s: &ScenarioFile, mode: RunMode, settings: RunSettings) -> Result<ScenarioRun, ScenarioRunError> {
    let agents = s.registry()?;
    let planner = planner_gateway(s)?;
    let repair = run_validation_repair(&s.base_prompt, &planner, &agents, settings.retry_budget)?;
    let plan_text = match &repair.result {
        RepairResult::Valid { plan_text } => plan_text.clone(),
        RepairResult::Failed { last_errors } => {
            return Err(ScenarioRunError::PlanInvalid {
                attempts: repair.attempts,
                errors: last_errors.iter().map(|e| e.message.clone()).collect(),
            })
        }
    };
    let plan = parse_plan_text(&plan_text)
        .plan
        .expect("validated plan text parses into a plan");
    let executor = s.executor()?;
    let run_id = format!("{}:{}", s.id, mode);
    if mode == RunMode::Base {
        let result = run_baseline(&plan, &s.question, &executor, &run_id);
        return Ok(ScenarioRun { repair, result });
    }

    let embedder = HashingEmbedder::default();
    let store = s.retrieval_store(&embedder)?;
    let sim_gw = match mode {
        RunMode::SpinWithoutSimulator => None,
        _ => Some(simulator_gateway(s)?),
    };
    let critic_gw = match mode {
        RunMode::SpinWithoutCritic => None,
        _ => Some(critic_gateway(s)?),
    };
    let simulator = sim_gw.as_ref().map(|gw| {
        Simulator::new(&store, &embedder, gw as &dyn CompletionPort)
            .with_config(SimulatorConfig {
                top_k: settings.top_k,
                ..SimulatorConfig::default()
            })
            .with_trajectories(s.trajectory_blobs())
    });
    let examples = build_fewshot_examples(&s.trajectories).examples;
    let critic = critic_gw.as_ref().map(|gw| {
        Critic::new(gw as &dyn CompletionPort)
            .with_examples(examples)
            .with_scenario_context(s.scenario_context.clone())
    });
    let ports = Ports {
        simulator: simulator.as_ref().map(|x| x as _),
        critic: critic.as_ref().map(|x| x as _),
        executor: Some(&executor),
    };
    let result = run_prefix_evaluation(&plan, &s.question, mode, ports, &run_id)?;
    Ok(ScenarioRun { repair, result })
}
