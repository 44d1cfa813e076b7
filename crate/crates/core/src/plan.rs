//! Plan data model: steps, dependency sets, prefixes, and the admissible-agent
//! registry.
//!
//! Step indices are 1-based everywhere in the public surface so that they line
//! up with the `#S<k>` reference grammar and with validator messages.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("prefix length {k} out of range; plan has {n} steps (valid 1..{n})")]
    PrefixOutOfRange { k: usize, n: usize },
    #[error("step index must be >= 1")]
    ZeroIndex,
    #[error("step {index}: {field} must be nonempty")]
    EmptyField { index: usize, field: &'static str },
    #[error("step {index}: {field} must be a single line")]
    MultilineField { index: usize, field: &'static str },
    #[error("step {index} depends on {dependency}; only earlier steps are allowed")]
    NonBackwardDependency { index: usize, dependency: usize },
    #[error("step indices must be 1..N in order; position {position} has index {index}")]
    IndexGap { position: usize, index: usize },
    #[error("plan must contain at least one step")]
    Empty,
    #[error("agent name must be nonempty")]
    EmptyAgentName,
    #[error("duplicate agent name '{0}'")]
    DuplicateAgent(String),
}

/// One node of a plan: task, assigned agent, backward dependencies, and the
/// expected output specification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanStep {
    index: usize,
    task: String,
    agent: String,
    dependencies: BTreeSet<usize>,
    expected_output: String,
}

impl PlanStep {
    pub fn new(
        index: usize,
        task: impl Into<String>,
        agent: impl Into<String>,
        dependencies: impl IntoIterator<Item = usize>,
        expected_output: impl Into<String>,
    ) -> Result<Self, PlanError> {
        if index == 0 {
            return Err(PlanError::ZeroIndex);
        }
        let task = task.into().trim().to_string();
        let agent = agent.into().trim().to_string();
        let expected_output = expected_output.into().trim().to_string();
        for (field, value) in [
            ("task", &task),
            ("agent", &agent),
            ("expected_output", &expected_output),
        ] {
            if value.is_empty() {
                return Err(PlanError::EmptyField { index, field });
            }
            if value.contains(['\n', '\r']) {
                return Err(PlanError::MultilineField { index, field });
            }
        }
        let dependencies: BTreeSet<usize> = dependencies.into_iter().collect();
        if let Some(&bad) = dependencies.iter().find(|&&d| d == 0 || d >= index) {
            return Err(PlanError::NonBackwardDependency {
                index,
                dependency: bad,
            });
        }
        Ok(Self {
            index,
            task,
            agent,
            dependencies,
            expected_output,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn agent(&self) -> &str {
        &self.agent
    }

    /// Ascending, deduplicated.
    pub fn dependencies(&self) -> &BTreeSet<usize> {
        &self.dependencies
    }

    pub fn expected_output(&self) -> &str {
        &self.expected_output
    }
}

/// An ordered, validated collection of steps with indices exactly `1..=N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plan {
    steps: Vec<PlanStep>,
    source_text: String,
}

impl Plan {
    pub fn new(steps: Vec<PlanStep>, source_text: impl Into<String>) -> Result<Self, PlanError> {
        if steps.is_empty() {
            return Err(PlanError::Empty);
        }
        for (position, step) in steps.iter().enumerate() {
            if step.index != position + 1 {
                return Err(PlanError::IndexGap {
                    position: position + 1,
                    index: step.index,
                });
            }
        }
        Ok(Self {
            steps,
            source_text: source_text.into(),
        })
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    /// 1-based lookup.
    pub fn step(&self, index: usize) -> Option<&PlanStep> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    /// Prefix view of the first `k` steps.
    pub fn prefix(&self, k: usize) -> Result<PlanPrefix<'_>, PlanError> {
        if k == 0 || k > self.steps.len() {
            return Err(PlanError::PrefixOutOfRange {
                k,
                n: self.steps.len(),
            });
        }
        Ok(PlanPrefix { plan: self, len: k })
    }

    /// Structural equality ignoring the source text.
    pub fn same_steps(&self, other: &Plan) -> bool {
        self.steps == other.steps
    }
}

/// Borrowed view of the first `len` steps of a plan.
#[derive(Debug, Clone, Copy)]
pub struct PlanPrefix<'a> {
    plan: &'a Plan,
    len: usize,
}

impl<'a> PlanPrefix<'a> {
    pub fn plan(&self) -> &'a Plan {
        self.plan
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn steps(&self) -> &'a [PlanStep] {
        &self.plan.steps[..self.len]
    }

    pub fn last(&self) -> &'a PlanStep {
        &self.plan.steps[self.len - 1]
    }

    /// Steps whose dependencies are all completed and which are not themselves
    /// completed, in index order.
    pub fn ready_steps(&self, completed: &BTreeSet<usize>) -> Vec<&'a PlanStep> {
        self.steps()
            .iter()
            .filter(|s| !completed.contains(&s.index) && s.dependencies.is_subset(completed))
            .collect()
    }
}

/// Free-function form of [`Plan::prefix`].
pub fn prefix(plan: &Plan, k: usize) -> Result<PlanPrefix<'_>, PlanError> {
    plan.prefix(k)
}

/// Free-function form of [`PlanPrefix::ready_steps`].
pub fn ready_steps<'a>(prefix: &PlanPrefix<'a>, completed: &BTreeSet<usize>) -> Vec<&'a PlanStep> {
    prefix.ready_steps(completed)
}

/// Ordered set of admissible agent names. Order is preserved because it is
/// rendered verbatim in `AGENT_UNKNOWN` messages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AgentRegistry {
    allowed: Vec<String>,
}

impl AgentRegistry {
    pub fn new<I, S>(names: I) -> Result<Self, PlanError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut registry = Self::default();
        for name in names {
            registry.push(name)?;
        }
        Ok(registry)
    }

    pub fn push(&mut self, name: impl Into<String>) -> Result<(), PlanError> {
        let name = name.into().trim().to_string();
        if name.is_empty() {
            return Err(PlanError::EmptyAgentName);
        }
        if self.allowed.contains(&name) {
            return Err(PlanError::DuplicateAgent(name));
        }
        self.allowed.push(name);
        Ok(())
    }

    /// Exact, case-sensitive match after trimming.
    pub fn contains(&self, name: &str) -> bool {
        let name = name.trim();
        self.allowed.iter().any(|a| a == name)
    }

    pub fn names(&self) -> &[String] {
        &self.allowed
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

impl TryFrom<Vec<String>> for AgentRegistry {
    type Error = PlanError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<AgentRegistry> for Vec<String> {
    fn from(value: AgentRegistry) -> Self {
        value.allowed
    }
}
