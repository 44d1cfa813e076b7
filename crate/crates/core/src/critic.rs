//! Critic: judges whether a candidate answer already answers the user question
//! given the current DAG prefix.
//!
//! The model is asked for a single JSON object with `status`,
//! `can_answer_now` and `rationale`. Parsing is total: strict JSON first, then
//! the substring between the first `{` and the last `}`, then a safe default
//! of (Not accomplished, false).

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::llm::{CompletionParams, CompletionPort, CompletionRequest, LlmError};
use crate::plan::PlanStep;
pub use crate::status::CompletionStatus;

pub const CRITIC_SYSTEM_PROMPT: &str = r#"You are a CRITIC AGENT for DAG-based multi-agent workflows.

Your job:
- You receive a user question, a DAG prefix (steps that have been planned
  or executed so far), and a candidate answer produced by another agent.
- You must judge how well the candidate answer responds to the user question,
  given the DAG prefix.

Your decision must follow this schema (JSON, single top-level object):

{
  "status": "Accomplished" | "Partially accomplished" | "Not accomplished",
  "can_answer_now": true | false,
  "rationale": "short natural-language explanation"
}

Semantics:
- "Accomplished": the answer is essentially correct and complete for the question.
- "Partially accomplished": the answer is on-topic but clearly incomplete or missing
  some important details.
- "Not accomplished": the answer is incorrect, off-topic, or fundamentally misaligned.

IMPORTANT:
- You MUST output valid JSON only.
- Do NOT wrap the JSON in markdown, backticks, or any extra text.
- Do NOT add extra fields."#;

pub const CRITIC_INSTRUCTION: &str = r#"Now, based on the evaluation examples above, decide the status, can_answer_now, and rationale for THIS new case. Output ONLY a single JSON object with keys "status", "can_answer_now", and "rationale"."#;

pub const FEWSHOT_RATIONALE: &str =
    "The candidate answer is the final answer of a ground-truth trajectory for this question.";

const PARSE_FAILURE_PREFIX: &str = "Failed to parse JSON from model output:";
const MAX_DIAGNOSTIC_CHARS: usize = 500;

/// How a judgment was obtained from raw model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRoute {
    Strict,
    BraceExtraction,
    SafeDefault,
    /// No critic call was made (critic ablation).
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticJudgment {
    pub status: CompletionStatus,
    pub can_answer_now: bool,
    pub rationale: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub route: ParseRoute,
}

impl CriticJudgment {
    pub fn safe_default(rationale: impl Into<String>) -> Self {
        Self {
            status: CompletionStatus::NotAccomplished,
            can_answer_now: false,
            rationale: rationale.into(),
            tokens_in: 0,
            tokens_out: 0,
            route: ParseRoute::SafeDefault,
        }
    }

    /// Judgment used when stopping is disabled: never stops.
    pub fn disabled() -> Self {
        Self {
            status: CompletionStatus::NotAccomplished,
            can_answer_now: false,
            rationale: "Critic disabled; stopping is not evaluated.".to_string(),
            tokens_in: 0,
            tokens_out: 0,
            route: ParseRoute::Disabled,
        }
    }

    /// True when the judgment came from parsed model output.
    pub fn parse_recovered(&self) -> bool {
        matches!(self.route, ParseRoute::Strict | ParseRoute::BraceExtraction)
    }

    /// Accomplished or partially accomplished.
    pub fn success_flag(&self) -> bool {
        self.status.is_success()
    }
}

/// Wire form of a judgment, in schema key order.
#[derive(Debug, Serialize)]
struct JudgmentWire<'a> {
    status: &'a str,
    can_answer_now: bool,
    rationale: &'a str,
}

/// Serializes a judgment to the compact single-object wire form.
pub fn judgment_json(status: CompletionStatus, can_answer_now: bool, rationale: &str) -> String {
    serde_json::to_string(&JudgmentWire {
        status: status.as_str(),
        can_answer_now,
        rationale,
    })
    .expect("judgment serializes")
}

fn coerce_bool(value: Option<&Value>) -> bool {
    match value {
        Some(Value::Bool(b)) => *b,
        Some(Value::Number(n)) => n.as_f64().is_some_and(|x| x != 0.0),
        Some(Value::String(s)) => matches!(
            s.trim().to_ascii_lowercase().as_str(),
            "true" | "yes" | "1"
        ),
        _ => false,
    }
}

fn sanitize(object: &Map<String, Value>, route: ParseRoute) -> CriticJudgment {
    let raw_status = object.get("status").and_then(Value::as_str);
    let Some(status) = raw_status.and_then(CompletionStatus::canonicalize) else {
        let shown = object
            .get("status")
            .map(Value::to_string)
            .unwrap_or_else(|| "<missing>".to_string());
        return CriticJudgment::safe_default(format!("Invalid status in model output: {shown}"));
    };
    let rationale = match object.get("rationale") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(v) if !v.is_null() && !v.is_string() => v.to_string(),
        _ => "No rationale provided.".to_string(),
    };
    CriticJudgment {
        status,
        can_answer_now: coerce_bool(object.get("can_answer_now")),
        rationale,
        tokens_in: 0,
        tokens_out: 0,
        route,
    }
}

fn as_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

/// Total parser for critic output. Never fails.
pub fn parse_critic_output(raw: &str) -> CriticJudgment {
    let trimmed = raw.trim();
    if let Some(object) = as_object(trimmed) {
        return sanitize(&object, ParseRoute::Strict);
    }
    if let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) {
        if start < end {
            if let Some(object) = as_object(&trimmed[start..=end]) {
                return sanitize(&object, ParseRoute::BraceExtraction);
            }
        }
    }
    let shown: String = if trimmed.is_empty() {
        "<empty>".to_string()
    } else {
        trimmed.chars().take(MAX_DIAGNOSTIC_CHARS).collect()
    };
    CriticJudgment::safe_default(format!("{PARSE_FAILURE_PREFIX} {shown}"))
}

/// One executed step of a logged agent run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStep {
    #[serde(default)]
    pub agent: Option<String>,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub argument: Option<Value>,
}

impl ExecutionStep {
    fn argument_text(&self) -> String {
        match &self.argument {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
        }
    }

    fn is_finish(&self) -> bool {
        self.action
            .as_deref()
            .is_some_and(|a| a.trim().eq_ignore_ascii_case("finish"))
    }
}

/// A logged agent run: the question (`text`), its execution steps, and any
/// other fields carried through untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub execution_steps: Vec<ExecutionStep>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub name: String,
    pub question: String,
    pub prefix_lines: Vec<String>,
    pub candidate_answer: String,
    pub expected_json: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FewShotBuild {
    pub examples: Vec<FewShotExample>,
    pub skipped: usize,
}

/// Builds labeled examples from trajectories. A trajectory is kept only when it
/// has a nonempty question and a `Finish` step with a nonempty argument; the
/// last `Finish` supplies the candidate answer and the steps before it become
/// `Agent -> action(args)` prefix lines.
pub fn build_fewshot_examples(trajectories: &[Trajectory]) -> FewShotBuild {
    let mut build = FewShotBuild::default();
    for (i, traj) in trajectories.iter().enumerate() {
        let question = traj.text.as_deref().map(str::trim).unwrap_or_default();
        let finish = traj.execution_steps.iter().rposition(ExecutionStep::is_finish);
        let answer = finish
            .map(|f| traj.execution_steps[f].argument_text())
            .unwrap_or_default();
        let (Some(finish), false, false) = (finish, question.is_empty(), answer.trim().is_empty())
        else {
            build.skipped += 1;
            continue;
        };
        let prefix_lines = traj.execution_steps[..finish]
            .iter()
            .filter(|s| !s.is_finish())
            .map(|s| {
                format!(
                    "{} -> {}({})",
                    s.agent.as_deref().unwrap_or("Unknown agent"),
                    s.action.as_deref().unwrap_or("unknown"),
                    s.argument_text()
                )
            })
            .collect();
        build.examples.push(FewShotExample {
            name: traj
                .id
                .clone()
                .unwrap_or_else(|| format!("trajectory_{}", i + 1)),
            question: question.to_string(),
            prefix_lines,
            candidate_answer: answer.trim().to_string(),
            expected_json: judgment_json(CompletionStatus::Accomplished, true, FEWSHOT_RATIONALE),
        });
    }
    build
}

/// Structured prefix element; any subset of fields may be present.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependency: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_output: Option<String>,
}

impl From<&PlanStep> for StepRecord {
    fn from(step: &PlanStep) -> Self {
        let dependency = if step.dependencies().is_empty() {
            "None".to_string()
        } else {
            step.dependencies()
                .iter()
                .map(|k| format!("#S{k}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        Self {
            agent: Some(step.agent().to_string()),
            task: Some(step.task().to_string()),
            dependency: Some(dependency),
            expected_output: Some(step.expected_output().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrefixElement {
    Text(String),
    Record(StepRecord),
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strings pass through verbatim; records render their present fields on one
/// line in the order agent, task, dependency, expected_output.
pub fn format_prefix_line(element: &PrefixElement) -> String {
    match element {
        PrefixElement::Text(text) => text.clone(),
        PrefixElement::Record(r) => [
            ("agent", &r.agent),
            ("task", &r.task),
            ("dependency", &r.dependency),
            ("expected_output", &r.expected_output),
        ]
        .into_iter()
        .filter_map(|(name, value)| value.as_deref().map(|v| format!("{name}: {}", single_line(v))))
        .collect::<Vec<_>>()
        .join(" | "),
    }
}

fn push_prefix_block(out: &mut String, lines: &[String]) {
    out.push_str("DAG prefix:\n");
    if lines.is_empty() {
        out.push_str("  (none)\n");
    }
    for line in lines {
        out.push_str("  - ");
        out.push_str(line);
        out.push('\n');
    }
}

/// Assembles the critic prompt. Byte-deterministic in its inputs.
pub fn build_critic_prompt(
    question: &str,
    prefix_lines: &[String],
    candidate_answer: &str,
    examples: &[FewShotExample],
    scenario_context: Option<&Value>,
) -> String {
    let mut out = String::new();
    out.push_str(CRITIC_SYSTEM_PROMPT);
    out.push_str("\n\n=== Few-shot evaluation examples ===\n\n");
    for (i, ex) in examples.iter().enumerate() {
        out.push_str(&format!("Example {}: {}\n", i + 1, ex.name));
        out.push_str(&format!("User question: {}\n", ex.question));
        push_prefix_block(&mut out, &ex.prefix_lines);
        out.push_str(&format!("Candidate answer: {}\n", ex.candidate_answer));
        out.push_str("Expected evaluation JSON:\n");
        out.push_str(&ex.expected_json);
        out.push_str("\n\n");
    }
    out.push_str("=== New case to evaluate ===\n");
    out.push_str(&format!("User question: {question}\n"));
    push_prefix_block(&mut out, prefix_lines);
    out.push_str(&format!("Candidate answer: {candidate_answer}\n"));
    if let Some(context) = scenario_context {
        out.push_str("\nScenario context (JSON):\n");
        out.push_str(&serde_json::to_string(context).expect("JSON value serializes"));
        out.push('\n');
    }
    out.push_str("\n=== Instruction ===\n");
    out.push_str(CRITIC_INSTRUCTION);
    out
}

/// Critic bound to a completion port and a fixed set of few-shot examples.
pub struct Critic<'a> {
    llm: &'a dyn CompletionPort,
    examples: Vec<FewShotExample>,
    scenario_context: Option<Value>,
    params: CompletionParams,
}

impl<'a> Critic<'a> {
    pub fn new(llm: &'a dyn CompletionPort) -> Self {
        Self {
            llm,
            examples: Vec::new(),
            scenario_context: None,
            params: CompletionParams::default(),
        }
    }

    pub fn with_examples(mut self, examples: Vec<FewShotExample>) -> Self {
        self.examples = examples;
        self
    }

    pub fn with_scenario_context(mut self, context: Option<Value>) -> Self {
        self.scenario_context = context;
        self
    }

    pub fn with_params(mut self, params: CompletionParams) -> Self {
        self.params = params;
        self
    }

    pub fn evaluate(
        &self,
        question: &str,
        candidate_answer: &str,
        prefix: &[PrefixElement],
    ) -> Result<CriticJudgment, LlmError> {
        evaluate(
            question,
            candidate_answer,
            prefix,
            &self.examples,
            self.llm,
            self.scenario_context.as_ref(),
            self.params,
        )
    }
}

/// Prompt, one completion, parse. Token counts come from the port.
pub fn evaluate(
    question: &str,
    candidate_answer: &str,
    prefix: &[PrefixElement],
    examples: &[FewShotExample],
    llm: &dyn CompletionPort,
    scenario_context: Option<&Value>,
    params: CompletionParams,
) -> Result<CriticJudgment, LlmError> {
    let lines: Vec<String> = prefix.iter().map(format_prefix_line).collect();
    let prompt = build_critic_prompt(question, &lines, candidate_answer, examples, scenario_context);
    let record = llm.complete(
        &CompletionRequest::new(&prompt)
            .keyed("critic")
            .with_params(params),
    )?;
    let mut judgment = parse_critic_output(&record.completion);
    judgment.tokens_in = record.tokens_in;
    judgment.tokens_out = record.tokens_out;
    Ok(judgment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Gateway, ScriptedBackend, ScriptedResponse};

    const EXAMPLE_A_RAW: &str =
        "You must adhere to the specified JSON schema. Do not include any extra text or formatting.";
    const EXAMPLE_B_JSON: &str = r#"{"status": "Partially accomplished", "can_answer_now": true, "rationale": "The candidate answer contains the correct list of assets at the MAIN site, but it is mixed with irrelevant information about other assets and sites."}"#;

    #[test]
    fn example_a_falls_back_to_safe_default() {
        let j = parse_critic_output(EXAMPLE_A_RAW);
        assert_eq!(j.status, CompletionStatus::NotAccomplished);
        assert!(!j.can_answer_now);
        assert!(!j.parse_recovered());
        assert!(!j.success_flag());
        assert!(j.rationale.starts_with("Failed to parse JSON from model output:"));
    }

    #[test]
    fn example_b_carried_through() {
        let j = parse_critic_output(EXAMPLE_B_JSON);
        assert_eq!(j.status, CompletionStatus::PartiallyAccomplished);
        assert!(j.can_answer_now);
        assert_eq!(j.route, ParseRoute::Strict);
        assert!(j.success_flag());
    }

    #[test]
    fn brace_extraction_recovers_wrapped_object() {
        let raw = r#"noise {"status":"Accomplished","can_answer_now":true,"rationale":"ok"} noise"#;
        let j = parse_critic_output(raw);
        assert_eq!(j.route, ParseRoute::BraceExtraction);
        assert_eq!(j.status, CompletionStatus::Accomplished);
        assert!(j.can_answer_now);
        assert_eq!(j.rationale, "ok");
    }

    #[test]
    fn sanitization_rules() {
        let j = parse_critic_output(r#"{"status":"Partially_Accomplished","can_answer_now":"True","rationale":"","extra":1}"#);
        assert_eq!(j.status, CompletionStatus::PartiallyAccomplished);
        assert!(j.can_answer_now);
        assert_eq!(j.rationale, "No rationale provided.");

        let j = parse_critic_output(r#"{"status":"Done","can_answer_now":true,"rationale":"x"}"#);
        assert_eq!(j.route, ParseRoute::SafeDefault);
        assert!(!j.can_answer_now);

        let j = parse_critic_output(r#"{"status":"Accomplished"}"#);
        assert!(!j.can_answer_now);
        assert!(!j.rationale.is_empty());

        assert_eq!(parse_critic_output("").route, ParseRoute::SafeDefault);
        assert_eq!(parse_critic_output("[1, 2]").route, ParseRoute::SafeDefault);
        assert_eq!(parse_critic_output("} backwards {").route, ParseRoute::SafeDefault);
    }

    fn traj(json: &str) -> Trajectory {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn fewshot_from_finish_trajectory() {
        let t = traj(
            r#"{"text": "what assets are at site MAIN", "execution_steps": [
                {"agent": "IoT Data Download", "action": "assets", "argument": "site_name=MAIN"},
                {"agent": "IoT Data Download", "action": "Finish", "argument": "The list of assets at the MAIN site is stored in /tmp/cbmdir/990f.json."}
            ]}"#,
        );
        let build = build_fewshot_examples(&[t]);
        assert_eq!(build.skipped, 0);
        let ex = &build.examples[0];
        assert_eq!(ex.question, "what assets are at site MAIN");
        assert_eq!(ex.prefix_lines, vec!["IoT Data Download -> assets(site_name=MAIN)"]);
        assert!(ex.candidate_answer.starts_with("The list of assets"));
        let parsed = parse_critic_output(&ex.expected_json);
        assert_eq!(parsed.status, CompletionStatus::Accomplished);
        assert!(parsed.can_answer_now);
    }

    #[test]
    fn fewshot_skips_incomplete_trajectories() {
        let no_finish = traj(r#"{"text": "q", "execution_steps": [{"agent": "a", "action": "x", "argument": "y"}]}"#);
        let no_question = traj(r#"{"execution_steps": [{"agent": "a", "action": "Finish", "argument": "y"}]}"#);
        let empty_answer = traj(r#"{"text": "q", "execution_steps": [{"agent": "a", "action": "Finish", "argument": ""}]}"#);
        let build = build_fewshot_examples(&[no_finish, no_question, empty_answer]);
        assert!(build.examples.is_empty());
        assert_eq!(build.skipped, 3);
        assert_eq!(build_fewshot_examples(&[]), FewShotBuild::default());
    }

    #[test]
    fn prefix_line_formatting() {
        let text = PrefixElement::Text("IoT Data Download -> assets(site_name=MAIN)".into());
        assert_eq!(format_prefix_line(&text), "IoT Data Download -> assets(site_name=MAIN)");
        let partial = PrefixElement::Record(StepRecord {
            agent: Some("A".into()),
            task: Some("T".into()),
            ..Default::default()
        });
        assert_eq!(format_prefix_line(&partial), "agent: A | task: T");
        let full = PrefixElement::Record(StepRecord {
            agent: Some("IoT Data Download".into()),
            task: Some("List the assets\navailable at MAIN.".into()),
            dependency: Some("None".into()),
            expected_output: Some("A list of assets.".into()),
        });
        assert_eq!(
            format_prefix_line(&full),
            "agent: IoT Data Download | task: List the assets available at MAIN. | dependency: None | expected_output: A list of assets."
        );
    }

    #[test]
    fn prompt_sections() {
        let ctx = serde_json::json!({"site": "MAIN"});
        let p = build_critic_prompt("q", &["s1".into()], "a", &[], Some(&ctx));
        assert!(p.contains("=== Few-shot evaluation examples ===\n\n=== New case to evaluate ==="));
        let ctx_at = p.find("{\"site\":\"MAIN\"}").unwrap();
        assert!(ctx_at < p.find("=== Instruction ===").unwrap());
        assert!(p.contains("\"can_answer_now\": true | false"));
    }

    #[test]
    fn evaluate_carries_port_tokens() {
        let gw = Gateway::new(ScriptedBackend::queue([
            ScriptedResponse::with_tokens(EXAMPLE_B_JSON, 3617, 60),
            ScriptedResponse::with_tokens(EXAMPLE_A_RAW, 2420, 19),
        ]));
        let critic = Critic::new(&gw);
        let b = critic.evaluate("What assets can be found at the MAIN site?", "cand", &[]).unwrap();
        assert_eq!((b.status, b.can_answer_now), (CompletionStatus::PartiallyAccomplished, true));
        assert_eq!((b.tokens_in, b.tokens_out), (3617, 60));
        let a = critic.evaluate("q", "cand", &[]).unwrap();
        assert_eq!((a.status, a.can_answer_now), (CompletionStatus::NotAccomplished, false));
        assert_eq!((a.tokens_in, a.tokens_out), (2420, 19));
    }
}
