//! Generate, validate and repair plans under a retry budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{validate_plan_text, ValidationError, ValidationReport};
use crate::llm::{CompletionParams, CompletionPort, CompletionRequest, LlmError};
use crate::plan::AgentRegistry;
use crate::status::CompletionStatus;

pub const OUTPUT_MARKER: &str = "Output (your generated plan) :";
pub const DEFAULT_RETRY_BUDGET: u32 = 3;

const FEEDBACK_HEADER: &str = "=== SPIN Evaluation Feedback ===";
const FEEDBACK_UNAVAILABLE: &str = "SPIN-style evaluation of the current plan is not available for this round.
Assume the current plan may still be suboptimal and try to improve it based
on the issues and the planning instructions.";
const TRUNCATED_INTRO: &str = "Truncated plan (use this as the current plan context for repair):";
const ISSUES_HEADER: &str = "=== Detected Issues ===";
const NO_ISSUES: &str = "No structural issues were detected by the validator. However, you should still
consider the SPIN evaluation feedback above and improve the DAG minimally if needed.";
const REPAIR_RULES: &str = "Repair rules:
- Interpret the SPIN feedback as follows in your planning:
  * status: how complete and correct the current answer is.
  * can_answer_now=True: you may safely stop planning and keep the plan minimal.
  * stop_index: earliest step index after which the plan already supports answering.
- Use the SPIN evaluation feedback and the issues above to decide how to fix the plan.
- Construct the DAG using the bare minimum number of tasks required to satisfy the user question and constraints. Avoid redundant or unnecessary tasks.
- Make the minimal changes necessary; if there is no problem, you MUST output the Original Plan as-is.
- Do NOT output any explanation, comments, or markdown.";

/// Prefix-evaluation summary handed back to the planner.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinFeedback {
    /// Rendered as "Unknown" when absent.
    #[serde(default)]
    pub status: Option<CompletionStatus>,
    #[serde(default)]
    pub can_answer_now: Option<bool>,
    #[serde(default)]
    pub stop_index: Option<usize>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub truncated_plan_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("stop_index must be at least 1")]
pub struct ZeroStopIndex;

impl SpinFeedback {
    pub fn check(&self) -> Result<(), ZeroStopIndex> {
        match self.stop_index {
            Some(0) => Err(ZeroStopIndex),
            _ => Ok(()),
        }
    }
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Removes the first line equal to the output marker (surrounding whitespace
/// ignored) and trims trailing whitespace. No marker: only the trim applies.
pub fn strip_output_marker(base_prompt: &str) -> String {
    let mut removed = false;
    let kept: Vec<&str> = base_prompt
        .split('\n')
        .filter(|line| {
            if !removed && line.trim() == OUTPUT_MARKER {
                removed = true;
                return false;
            }
            true
        })
        .collect();
    kept.join("\n").trim_end().to_string()
}

/// Repair prompt with feedback taken from `feedback` alone.
pub fn build_repair_prompt(
    base_prompt: &str,
    original_plan: &str,
    errors: &[ValidationError],
    feedback: Option<&SpinFeedback>,
) -> String {
    build_repair_prompt_with_truncation(base_prompt, original_plan, errors, feedback, None)
}

/// As [`build_repair_prompt`], with a truncated plan that is shown even when no
/// feedback is available. A truncated plan inside `feedback` takes precedence.
pub fn build_repair_prompt_with_truncation(
    base_prompt: &str,
    original_plan: &str,
    errors: &[ValidationError],
    feedback: Option<&SpinFeedback>,
    truncated_plan_text: Option<&str>,
) -> String {
    let mut sections: Vec<String> = Vec::new();
    let base = strip_output_marker(base_prompt);
    if !base.is_empty() {
        sections.push(base);
    }

    let mut fb = String::from(FEEDBACK_HEADER);
    fb.push('\n');
    let truncated = match feedback {
        Some(f) => {
            fb.push_str("SPIN-style evaluation of the current plan:\n");
            let status = f.status.map_or("Unknown", CompletionStatus::as_str);
            fb.push_str(&format!("- Status: {status}\n"));
            if let Some(can) = f.can_answer_now {
                fb.push_str(&format!("- can_answer_now: {}\n", py_bool(can)));
            }
            if let Some(k) = f.stop_index {
                fb.push_str(&format!("- stop_index: {k}\n"));
                fb.push_str("  (earliest step index after which SPIN believes the plan can already answer)\n");
            }
            fb.push_str(&format!("- Critic rationale: {}", f.rationale));
            f.truncated_plan_text.as_deref().or(truncated_plan_text)
        }
        None => {
            fb.push_str(FEEDBACK_UNAVAILABLE);
            truncated_plan_text
        }
    };
    if let Some(t) = truncated {
        fb.push_str(&format!("\n\n{TRUNCATED_INTRO}\n{t}"));
    }
    sections.push(fb);

    let mut issues = String::from(ISSUES_HEADER);
    issues.push('\n');
    if errors.is_empty() {
        issues.push_str(NO_ISSUES);
    } else {
        issues.push_str("Issues detected by the validator:");
        for e in errors {
            issues.push_str(&format!("\n- {}", e.message));
        }
    }
    sections.push(issues);

    sections.push(format!("=== Original Plan ===\n{original_plan}"));
    sections.push(REPAIR_RULES.to_string());
    sections.push(OUTPUT_MARKER.to_string());
    sections.join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepairResult {
    Valid { plan_text: String },
    Failed { last_errors: Vec<ValidationError> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepairOutcome {
    pub result: RepairResult,
    /// Planner invocations.
    pub attempts: u32,
    pub reports: Vec<ValidationReport>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl RepairOutcome {
    pub fn is_valid(&self) -> bool {
        matches!(self.result, RepairResult::Valid { .. })
    }
}

#[derive(Debug, Error)]
#[error("planner call {attempt} failed: {source}")]
pub struct RepairError {
    #[source]
    pub source: LlmError,
    /// Planner invocations made, including the failed one.
    pub attempt: u32,
    pub reports: Vec<ValidationReport>,
}

#[derive(Debug, Clone, Default)]
pub struct RepairOptions {
    pub feedback: Option<SpinFeedback>,
    pub params: CompletionParams,
}

pub fn run_validation_repair(
    base_prompt: &str,
    planner: &dyn CompletionPort,
    agents: &AgentRegistry,
    budget: u32,
) -> Result<RepairOutcome, RepairError> {
    run_validation_repair_with(base_prompt, planner, agents, budget, &RepairOptions::default())
}

/// Planner runs once on the base prompt, then at most `budget` more times on
/// repair prompts built from the latest plan and its validation errors.
pub fn run_validation_repair_with(
    base_prompt: &str,
    planner: &dyn CompletionPort,
    agents: &AgentRegistry,
    budget: u32,
    options: &RepairOptions,
) -> Result<RepairOutcome, RepairError> {
    let mut reports = Vec::new();
    let mut attempts = 0u32;
    let (mut tokens_in, mut tokens_out) = (0u64, 0u64);
    let mut prompt = base_prompt.to_string();
    let mut round = 0u32;
    loop {
        attempts += 1;
        let record = planner
            .complete(
                &CompletionRequest::new(&prompt)
                    .keyed("planner")
                    .with_params(options.params),
            )
            .map_err(|source| RepairError {
                source,
                attempt: attempts,
                reports: reports.clone(),
            })?;
        tokens_in += record.tokens_in;
        tokens_out += record.tokens_out;
        let plan_text = record.completion;
        let report = validate_plan_text(&plan_text, agents);
        let errors = report.errors.clone();
        reports.push(report);
        if errors.is_empty() {
            return Ok(RepairOutcome {
                result: RepairResult::Valid { plan_text },
                attempts,
                reports,
                tokens_in,
                tokens_out,
            });
        }
        if round == budget {
            return Ok(RepairOutcome {
                result: RepairResult::Failed {
                    last_errors: errors,
                },
                attempts,
                reports,
                tokens_in,
                tokens_out,
            });
        }
        prompt = build_repair_prompt(base_prompt, &plan_text, &errors, options.feedback.as_ref());
        round += 1;
    }
}
