//! Retrieval-conditioned simulator: predicts the textual output of one target
//! task from the question, the DAG prefix, few-shot trajectories and similar
//! stored task summaries.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{CompletionParams, CompletionPort, CompletionRequest, LlmError};
use crate::status::CompletionStatus;
use crate::store::{
    Embedder, RetrievalHit, SearchFilter, StoreError, TrajectoryStore, DEFAULT_DIMENSION,
    DEFAULT_TOP_K,
};

pub const ENV_STORE_PATH: &str = "DAGSTOP_STORE";

pub const SIMULATOR_SYSTEM_PROMPT: &str = "You are a simulator agent. Given:
- a user question,
- an optional DAG prefix (previous steps),
- a target task (agent + description),
- and a few similar past tasks with their summaries,

you must PREDICT the output that the agent will produce for this target task.
Do NOT explain your reasoning. Respond ONLY with the predicted output.";

pub const TRAJECTORIES_INTRO: &str = "Below are full ground-truth trajectories in JSON format, including planning_steps and execution_steps. Use them as exemplars of how an IoT agent behaves and what its final outputs look like.";

pub const SIMULATOR_INSTRUCTION: &str = "Using the patterns from the Ground-Truth Trajectories above, the current User Question, the Target Task, the DAG Prefix (if any), and the Similar Past Tasks, predict the output that the agent should produce for the Target Task. Respond ONLY with that output, without explanations or JSON.";

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("simulation request field '{0}' is empty")]
    EmptyField(&'static str),
    #[error("retrieval failed: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("simulator returned an empty completion")]
    EmptyCompletion,
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationRequest {
    pub user_question: String,
    pub task_description: String,
    pub agent_name: String,
    #[serde(default)]
    pub dag_prefix: Vec<String>,
    #[serde(default)]
    pub few_shot_trajectories: Vec<String>,
}

impl SimulationRequest {
    pub fn new(
        user_question: impl Into<String>,
        task_description: impl Into<String>,
        agent_name: impl Into<String>,
    ) -> Self {
        Self {
            user_question: user_question.into(),
            task_description: task_description.into(),
            agent_name: agent_name.into(),
            dag_prefix: Vec::new(),
            few_shot_trajectories: Vec::new(),
        }
    }

    pub fn with_prefix(mut self, lines: Vec<String>) -> Self {
        self.dag_prefix = lines;
        self
    }

    pub fn with_trajectories(mut self, blobs: Vec<String>) -> Self {
        self.few_shot_trajectories = blobs;
        self
    }

    pub fn check(&self) -> Result<(), SimulatorError> {
        for (name, value) in [
            ("user_question", &self.user_question),
            ("task_description", &self.task_description),
            ("agent_name", &self.agent_name),
        ] {
            if value.trim().is_empty() {
                return Err(SimulatorError::EmptyField(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationResult {
    pub predicted_output: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub hits_used: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatorConfig {
    pub top_k: usize,
    /// Restrict retrieval to Accomplished records.
    pub status_filter: bool,
    pub dimension: usize,
    pub store_path: Option<PathBuf>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            status_filter: true,
            dimension: DEFAULT_DIMENSION,
            store_path: None,
        }
    }
}

impl SimulatorConfig {
    /// Reads the store location from the environment; absence is an error.
    pub fn from_env() -> Result<Self, SimulatorError> {
        let path = std::env::var(ENV_STORE_PATH)
            .ok()
            .filter(|p| !p.trim().is_empty())
            .ok_or_else(|| {
                SimulatorError::Config(format!(
                    "trajectory store location not configured; set {ENV_STORE_PATH}"
                ))
            })?;
        Ok(Self {
            store_path: Some(PathBuf::from(path)),
            ..Self::default()
        })
    }

    pub fn open_store(&self) -> Result<TrajectoryStore, SimulatorError> {
        let path = self.store_path.as_ref().ok_or_else(|| {
            SimulatorError::Config(format!(
                "trajectory store location not configured; set {ENV_STORE_PATH}"
            ))
        })?;
        Ok(TrajectoryStore::load(path, self.dimension)?)
    }

    pub fn filter_for(&self, agent_name: &str) -> SearchFilter {
        SearchFilter {
            agent_name: Some(agent_name.to_string()),
            status: self.status_filter.then_some(CompletionStatus::Accomplished),
        }
    }
}

pub fn build_similarity_query(user_question: &str, agent_name: &str, task_description: &str) -> String {
    format!("User question: {user_question}\nAgent: {agent_name}\nTask: {task_description}")
}

pub fn retrieve_context(
    store: &TrajectoryStore,
    embedder: &dyn Embedder,
    request: &SimulationRequest,
    config: &SimulatorConfig,
) -> Result<Vec<RetrievalHit>, SimulatorError> {
    let query = build_similarity_query(
        &request.user_question,
        &request.agent_name,
        &request.task_description,
    );
    let vector = embedder.embed(&query);
    Ok(store.nearest_neighbors(&vector, config.top_k, &config.filter_for(&request.agent_name))?)
}

/// Assembles the simulator prompt; optional sections are omitted when empty.
pub fn build_simulator_prompt(request: &SimulationRequest, hits: &[RetrievalHit]) -> String {
    let mut sections: Vec<String> = vec![
        SIMULATOR_SYSTEM_PROMPT.to_string(),
        format!("=== User Question ===\n{}", request.user_question),
    ];
    if !request.dag_prefix.is_empty() {
        let mut s = String::from("=== DAG Prefix (high-level) ===");
        for (i, line) in request.dag_prefix.iter().enumerate() {
            s.push_str(&format!("\nStep {}: {}", i + 1, line));
        }
        sections.push(s);
    }
    if !request.few_shot_trajectories.is_empty() {
        let mut s = format!("=== Ground-Truth Trajectories (Few-Shot Examples) ===\n{TRAJECTORIES_INTRO}");
        for (i, blob) in request.few_shot_trajectories.iter().enumerate() {
            s.push_str(&format!("\n\n--- Ground-Truth Trajectory {} ---\n{}", i + 1, blob));
        }
        sections.push(s);
    }
    sections.push(format!(
        "=== Target Task ===\nAgent: {}\nTask description: {}",
        request.agent_name, request.task_description
    ));
    if !hits.is_empty() {
        let mut s = String::from("=== Similar Past Tasks ===");
        for hit in hits {
            s.push_str(&format!("\n- [status={}] {}", hit.record.status, hit.record.summary));
        }
        sections.push(s);
    }
    sections.push(format!("=== Instruction ===\n{SIMULATOR_INSTRUCTION}"));
    sections.join("\n\n")
}

/// Completes an already-retrieved request: prompt, one call, trimmed output.
pub fn simulate_with_hits(
    request: &SimulationRequest,
    hits: Vec<RetrievalHit>,
    llm: &dyn CompletionPort,
    params: CompletionParams,
) -> Result<SimulationResult, SimulatorError> {
    request.check()?;
    let prompt = build_simulator_prompt(request, &hits);
    let record = llm.complete(
        &CompletionRequest::new(&prompt)
            .keyed("simulator")
            .with_params(params),
    )?;
    let predicted_output = record.completion.trim().to_string();
    if predicted_output.is_empty() {
        return Err(SimulatorError::EmptyCompletion);
    }
    Ok(SimulationResult {
        predicted_output,
        tokens_in: record.tokens_in,
        tokens_out: record.tokens_out,
        hits_used: hits,
    })
}

/// Retrieve, build the prompt, one completion.
pub fn simulate(
    request: &SimulationRequest,
    store: &TrajectoryStore,
    embedder: &dyn Embedder,
    llm: &dyn CompletionPort,
    config: &SimulatorConfig,
) -> Result<SimulationResult, SimulatorError> {
    request.check()?;
    let hits = retrieve_context(store, embedder, request, config)?;
    simulate_with_hits(request, hits, llm, CompletionParams::default())
}

/// Simulator bound to its ports.
pub struct Simulator<'a> {
    pub store: &'a TrajectoryStore,
    pub embedder: &'a dyn Embedder,
    pub llm: &'a dyn CompletionPort,
    pub config: SimulatorConfig,
    pub trajectories: Vec<String>,
}

impl<'a> Simulator<'a> {
    pub fn new(
        store: &'a TrajectoryStore,
        embedder: &'a dyn Embedder,
        llm: &'a dyn CompletionPort,
    ) -> Self {
        Self {
            store,
            embedder,
            llm,
            config: SimulatorConfig::default(),
            trajectories: Vec::new(),
        }
    }

    pub fn with_config(mut self, config: SimulatorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_trajectories(mut self, blobs: Vec<String>) -> Self {
        self.trajectories = blobs;
        self
    }

    /// Few-shot trajectories configured on the simulator are used when the
    /// request carries none of its own.
    pub fn run(&self, request: &SimulationRequest) -> Result<SimulationResult, SimulatorError> {
        if request.few_shot_trajectories.is_empty() && !self.trajectories.is_empty() {
            let request = request.clone().with_trajectories(self.trajectories.clone());
            return simulate(&request, self.store, self.embedder, self.llm, &self.config);
        }
        simulate(request, self.store, self.embedder, self.llm, &self.config)
    }
}
