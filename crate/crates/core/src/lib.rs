//! Plan contracts and execution control for tool-using agent pipelines.
//!
//! Plans are four aligned tagged lists (`#TaskN`, `#AgentN`, `#DependencyN`,
//! `#ExpectedOutputN`). This crate parses and validates them, repairs invalid
//! plans through a planner under a retry budget, and runs plans prefix by
//! prefix with a simulator and a critic, stopping once a prefix suffices to
//! answer the question.

pub mod cli;
pub mod contract;
pub mod critic;
pub mod engine;
pub mod llm;
pub mod metrics;
pub mod plan;
pub mod repair;
pub mod scenario;
pub mod simulator;
pub mod status;
pub mod store;

pub use contract::{
    parse_plan_text, serialize_plan, truncate_plan_text, validate_plan_text, ErrorCode,
    ValidationError, ValidationReport,
};
pub use critic::{parse_critic_output, CriticJudgment};
pub use engine::{run_baseline, run_prefix_evaluation, should_stop, RunMode};
pub use plan::{AgentRegistry, Plan, PlanPrefix, PlanStep};
pub use status::CompletionStatus;
