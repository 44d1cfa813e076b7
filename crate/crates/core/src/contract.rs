//! Plan-text parsing and the strict executable-DAG contract.
//!
//! Plan text is four aligned tag families, one line per field:
//!
//! ```text
//! #Task1: List the assets available at the MAIN site.
//! #Agent1: IoT Data Download
//! #Dependency1: None
//! #ExpectedOutput1: A list of assets at the MAIN site.
//! ```
//!
//! The validator never stops at the first violation; it accumulates every
//! problem it can find so a planner can repair them in one round. Messages are
//! fixed format strings and are embedded verbatim in repair prompts, so any
//! change here is a wire-format change.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::plan::{AgentRegistry, Plan, PlanError, PlanStep};

/// The four tag families, in their canonical check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    Task,
    Agent,
    Dependency,
    ExpectedOutput,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Task, Tag::Agent, Tag::Dependency, Tag::ExpectedOutput];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Task => "Task",
            Tag::Agent => "Agent",
            Tag::Dependency => "Dependency",
            Tag::ExpectedOutput => "ExpectedOutput",
        }
    }

    fn parse(s: &str) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| t.as_str() == s)
    }

    fn sequence_code(self) -> ErrorCode {
        match self {
            Tag::Task => ErrorCode::TaskNumbersNotSeq,
            Tag::Agent => ErrorCode::AgentNumbersNotSeq,
            Tag::Dependency => ErrorCode::DependencyNumbersNotSeq,
            Tag::ExpectedOutput => ErrorCode::ExpectedOutputNumbersNotSeq,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Rule identifiers. The serialized names are the report vocabulary used in
/// per-rule incidence tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    MissingSection,
    TaskNumbersNotSeq,
    AgentNumbersNotSeq,
    DependencyNumbersNotSeq,
    #[serde(rename = "EXPECTEDOUTPUT_NUMBERS_NOT_SEQ")]
    ExpectedOutputNumbersNotSeq,
    CountsMismatch,
    DepBadFormat,
    DepOutOfRange,
    DepForwardRef,
    AgentUnknown,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 10] = [
        ErrorCode::CountsMismatch,
        ErrorCode::AgentUnknown,
        ErrorCode::TaskNumbersNotSeq,
        ErrorCode::AgentNumbersNotSeq,
        ErrorCode::DependencyNumbersNotSeq,
        ErrorCode::ExpectedOutputNumbersNotSeq,
        ErrorCode::MissingSection,
        ErrorCode::DepBadFormat,
        ErrorCode::DepOutOfRange,
        ErrorCode::DepForwardRef,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::MissingSection => "MISSING_SECTION",
            ErrorCode::TaskNumbersNotSeq => "TASK_NUMBERS_NOT_SEQ",
            ErrorCode::AgentNumbersNotSeq => "AGENT_NUMBERS_NOT_SEQ",
            ErrorCode::DependencyNumbersNotSeq => "DEPENDENCY_NUMBERS_NOT_SEQ",
            ErrorCode::ExpectedOutputNumbersNotSeq => "EXPECTEDOUTPUT_NUMBERS_NOT_SEQ",
            ErrorCode::CountsMismatch => "COUNTS_MISMATCH",
            ErrorCode::DepBadFormat => "DEP_BAD_FORMAT",
            ErrorCode::DepOutOfRange => "DEP_OUT_OF_RANGE",
            ErrorCode::DepForwardRef => "DEP_FORWARD_REF",
            ErrorCode::AgentUnknown => "AGENT_UNKNOWN",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub code: ErrorCode,
    pub message: String,
}

impl ValidationError {
    fn new(code: ErrorCode, message: String) -> Self {
        Self { code, message }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// `is_valid` holds exactly when `errors` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub is_valid: bool,
    pub errors: Vec<ValidationError>,
}

impl ValidationReport {
    fn from_errors(errors: Vec<ValidationError>) -> Self {
        Self {
            is_valid: errors.is_empty(),
            errors,
        }
    }

    pub fn messages(&self) -> Vec<&str> {
        self.errors.iter().map(|e| e.message.as_str()).collect()
    }

    pub fn codes(&self) -> BTreeSet<ErrorCode> {
        self.errors.iter().map(|e| e.code).collect()
    }
}

/// One tagged line pulled out of plan text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub tag: Tag,
    pub index: usize,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPlanText {
    /// Every recognised tagged line, in document order.
    pub extractions: Vec<Extraction>,
    /// Present when the four families align into a structurally sound plan.
    pub plan: Option<Plan>,
}

fn tag_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^#(Task|Agent|Dependency|ExpectedOutput)([0-9]+):(.*)$")
            .expect("static regex")
    })
}

fn dep_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^#S([0-9]+)$").expect("static regex"))
}

/// Extracts all `#<Tag><N>: <content>` lines. Lines with empty content or an
/// index that does not fit in `usize` are not extracted.
pub fn extract_tagged_lines(plan_text: &str) -> Vec<Extraction> {
    tag_line_regex()
        .captures_iter(plan_text)
        .filter_map(|caps| {
            let tag = Tag::parse(&caps[1])?;
            let index = caps[2].parse::<usize>().ok()?;
            let content = caps[3].trim();
            if content.is_empty() {
                return None;
            }
            Some(Extraction {
                tag,
                index,
                content: content.to_string(),
            })
        })
        .collect()
}

/// Parses dependency content: `None`, or `#S<k>` tokens separated by
/// whitespace and/or commas. Returns `None` on any malformed token.
pub fn parse_dependency_content(content: &str) -> Option<BTreeSet<usize>> {
    let content = content.trim();
    if content == "None" {
        return Some(BTreeSet::new());
    }
    let mut deps = BTreeSet::new();
    let mut any = false;
    for token in content
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
    {
        let caps = dep_token_regex().captures(token)?;
        deps.insert(caps[1].parse::<usize>().ok()?);
        any = true;
    }
    any.then_some(deps)
}

/// Splits plan text into tagged lines and, when the families line up, a
/// [`Plan`]. Never fails.
pub fn parse_plan_text(plan_text: &str) -> ParsedPlanText {
    let extractions = extract_tagged_lines(plan_text);
    let plan = assemble_plan(&extractions, plan_text);
    ParsedPlanText { extractions, plan }
}

fn assemble_plan(extractions: &[Extraction], source: &str) -> Option<Plan> {
    let family = |tag: Tag| -> Vec<&Extraction> {
        extractions.iter().filter(|e| e.tag == tag).collect()
    };
    let tasks = family(Tag::Task);
    let agents = family(Tag::Agent);
    let deps = family(Tag::Dependency);
    let outputs = family(Tag::ExpectedOutput);
    let n = tasks.len();
    if n == 0 || [&agents, &deps, &outputs].iter().any(|f| f.len() != n) {
        return None;
    }
    let mut steps = Vec::with_capacity(n);
    for i in 0..n {
        let index = i + 1;
        if [tasks[i], agents[i], deps[i], outputs[i]]
            .iter()
            .any(|e| e.index != index)
        {
            return None;
        }
        let dependencies = parse_dependency_content(&deps[i].content)?;
        let step = PlanStep::new(
            index,
            tasks[i].content.as_str(),
            agents[i].content.as_str(),
            dependencies,
            outputs[i].content.as_str(),
        )
        .ok()?;
        steps.push(step);
    }
    Plan::new(steps, source).ok()
}

/// Renders a list of integers the way the validator messages expect: `[1, 3]`.
fn int_list(values: impl IntoIterator<Item = usize>) -> String {
    let parts: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Quoted string literal with single quotes preferred, switching to double
/// quotes when the value contains a single quote and no double quote.
fn quoted_literal(value: &str) -> String {
    let quote = if value.contains('\'') && !value.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(value.len() + 2);
    out.push(quote);
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn string_list(values: &[String]) -> String {
    let parts: Vec<String> = values.iter().map(|v| quoted_literal(v)).collect();
    format!("[{}]", parts.join(", "))
}

/// Checks plan text against the executable-DAG contract.
///
/// Checks run in a fixed order: section presence, per-family numbering,
/// family counts, dependency syntax, dependency range, forward references,
/// and agent admissibility. Within a check, errors are ordered by step index.
/// When a family repeats an index, the first occurrence is the one whose
/// content is checked.
pub fn validate_plan_text(plan_text: &str, agents: &AgentRegistry) -> ValidationReport {
    let extractions = extract_tagged_lines(plan_text);
    let mut by_tag: BTreeMap<Tag, Vec<&Extraction>> = BTreeMap::new();
    for tag in Tag::ALL {
        by_tag.insert(tag, Vec::new());
    }
    for e in &extractions {
        by_tag.get_mut(&e.tag).expect("all tags present").push(e);
    }

    let mut errors = Vec::new();

    for tag in Tag::ALL {
        if by_tag[&tag].is_empty() {
            errors.push(ValidationError::new(
                ErrorCode::MissingSection,
                format!("{tag} lines missing"),
            ));
        }
    }

    for tag in Tag::ALL {
        let indices: Vec<usize> = by_tag[&tag].iter().map(|e| e.index).collect();
        if indices.is_empty() {
            continue;
        }
        let in_order = indices.iter().enumerate().all(|(i, &idx)| idx == i + 1);
        if !in_order {
            errors.push(ValidationError::new(
                tag.sequence_code(),
                format!("{tag} numbers must be 1..N in order; got {}", int_list(indices)),
            ));
        }
    }

    let counts: Vec<usize> = Tag::ALL.iter().map(|t| by_tag[t].len()).collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        errors.push(ValidationError::new(
            ErrorCode::CountsMismatch,
            "Counts of Task/Agent/Dependency/ExpectedOutput must match".to_string(),
        ));
    }

    let n = by_tag[&Tag::Task].len();

    let first_by_index = |tag: Tag| -> BTreeMap<usize, &Extraction> {
        let mut map = BTreeMap::new();
        for e in &by_tag[&tag] {
            map.entry(e.index).or_insert(*e);
        }
        map
    };

    let mut bad_format = Vec::new();
    let mut out_of_range = Vec::new();
    let mut forward = Vec::new();
    for (&i, e) in &first_by_index(Tag::Dependency) {
        match parse_dependency_content(&e.content) {
            None => bad_format.push(ValidationError::new(
                ErrorCode::DepBadFormat,
                format!(
                    "Dependency{i} must be 'None' or '#S1 #S2 ...'; got '{}'",
                    e.content
                ),
            )),
            Some(deps) => {
                let outside: Vec<usize> =
                    deps.iter().copied().filter(|&k| k < 1 || k > n).collect();
                if !outside.is_empty() {
                    out_of_range.push(ValidationError::new(
                        ErrorCode::DepOutOfRange,
                        format!(
                            "Dependency{i} out of range {}; valid 1..{n}",
                            int_list(outside)
                        ),
                    ));
                }
                let ahead: Vec<usize> = deps.iter().copied().filter(|&k| k >= i).collect();
                if !ahead.is_empty() {
                    forward.push(ValidationError::new(
                        ErrorCode::DepForwardRef,
                        format!(
                            "Dependency{i} forward reference {}; only past steps allowed",
                            int_list(ahead)
                        ),
                    ));
                }
            }
        }
    }
    errors.extend(bad_format);
    errors.extend(out_of_range);
    errors.extend(forward);

    for (&i, e) in &first_by_index(Tag::Agent) {
        if !agents.contains(&e.content) {
            errors.push(ValidationError::new(
                ErrorCode::AgentUnknown,
                format!(
                    "Agent{i} unknown '{}'. Allowed: {}",
                    e.content,
                    string_list(agents.names())
                ),
            ));
        }
    }

    ValidationReport::from_errors(errors)
}

fn render_dependencies(deps: &BTreeSet<usize>) -> String {
    if deps.is_empty() {
        "None".to_string()
    } else {
        deps.iter()
            .map(|k| format!("#S{k}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn render_steps(steps: &[PlanStep]) -> String {
    steps
        .iter()
        .map(|s| {
            let i = s.index();
            format!(
                "#Task{i}: {}\n#Agent{i}: {}\n#Dependency{i}: {}\n#ExpectedOutput{i}: {}",
                s.task(),
                s.agent(),
                render_dependencies(s.dependencies()),
                s.expected_output()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Canonical plan text: one four-line block per step, blocks separated by a
/// blank line, dependencies as `None` or space-separated ascending `#S<k>`.
/// No trailing newline.
pub fn serialize_plan(plan: &Plan) -> String {
    render_steps(plan.steps())
}

/// Serialization of the first `stop_index` steps, indices preserved.
pub fn truncate_plan_text(plan: &Plan, stop_index: usize) -> Result<String, PlanError> {
    let prefix = plan.prefix(stop_index)?;
    Ok(render_steps(prefix.steps()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iot() -> AgentRegistry {
        AgentRegistry::new(["IoT Data Download"]).unwrap()
    }

    const TWO_STEP: &str = "#Task1: Identify the relevant sensors for monitoring compressor overheating failure in Chiller 6.
#Agent1: Failure Mode and Sensor Relevancy Expert for Industrial Asset
#Dependency1: None
#ExpectedOutput1: List of relevant sensors for monitoring compressor overheating in Chiller 6.

#Task2: Prioritize the identified sensors for monitoring compressor overheating in Chiller 6.
#Agent2: Failure Mode and Sensor Relevancy Expert for Industrial Asset
#Dependency2: #S1
#ExpectedOutput2: The most relevant sensor to prioritize for monitoring compressor overheating in Chiller 6.
";

    #[test]
    fn parses_two_step_sensor_plan() {
        let parsed = parse_plan_text(TWO_STEP);
        assert_eq!(parsed.extractions.len(), 8);
        let plan = parsed.plan.expect("aligned plan");
        let deps: Vec<Vec<usize>> = plan
            .steps()
            .iter()
            .map(|s| s.dependencies().iter().copied().collect())
            .collect();
        assert_eq!(deps, vec![vec![], vec![1]]);
    }

    #[test]
    fn empty_text_has_no_extractions() {
        let parsed = parse_plan_text("");
        assert!(parsed.extractions.is_empty());
        assert!(parsed.plan.is_none());
    }

    #[test]
    fn comma_separated_dependencies() {
        assert_eq!(
            parse_dependency_content("#S1, #S2"),
            Some([1, 2].into_iter().collect())
        );
        assert_eq!(
            parse_dependency_content("#S2 #S1 #S1"),
            Some([1, 2].into_iter().collect())
        );
    }

    #[test]
    fn dependency_grammar_edge_cases() {
        assert_eq!(parse_dependency_content("None"), Some(BTreeSet::new()));
        assert_eq!(parse_dependency_content("#S 1"), None);
        assert_eq!(parse_dependency_content("None #S1"), None);
        assert_eq!(parse_dependency_content("none"), None);
        assert_eq!(parse_dependency_content(","), None);
        assert_eq!(parse_dependency_content("S1"), None);
    }

    #[test]
    fn extraction_is_anchored_at_line_start() {
        let text = "  #Task1: indented\nfoo #Task2: inline\n#Task3: ok\r\n#Task4:   \n";
        let ex = extract_tagged_lines(text);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].index, 3);
        assert_eq!(ex[0].content, "ok");
    }

    #[test]
    fn mixed_none_and_token_is_bad_format() {
        let text = "#Task1: a\n#Agent1: IoT Data Download\n#Dependency1: None #S1\n#ExpectedOutput1: e\n";
        let report = validate_plan_text(text, &iot());
        assert_eq!(report.codes(), [ErrorCode::DepBadFormat].into_iter().collect());
    }

    #[test]
    fn duplicate_index_is_sequence_violation() {
        let text = "#Task1: a\n#Task1: b\n#Agent1: IoT Data Download\n#Dependency1: None\n#ExpectedOutput1: e\n";
        let report = validate_plan_text(text, &iot());
        assert_eq!(
            report.messages(),
            vec![
                "Task numbers must be 1..N in order; got [1, 1]",
                "Counts of Task/Agent/Dependency/ExpectedOutput must match"
            ]
        );
    }

    #[test]
    fn agent_match_is_case_sensitive() {
        let text = "#Task1: a\n#Agent1: iot data download\n#Dependency1: None\n#ExpectedOutput1: e\n";
        let report = validate_plan_text(text, &iot());
        assert_eq!(
            report.messages(),
            vec!["Agent1 unknown 'iot data download'. Allowed: ['IoT Data Download']"]
        );
    }

    #[test]
    fn list_literal_quoting() {
        assert_eq!(string_list(&["a".into(), "it's".into()]), "['a', \"it's\"]");
        assert_eq!(int_list([1, 3]), "[1, 3]");
        assert_eq!(int_list([]), "[]");
    }

    #[test]
    fn serialize_renders_none_and_sorted_tokens() {
        let plan = parse_plan_text(TWO_STEP).plan.unwrap();
        let text = serialize_plan(&plan);
        assert!(text.contains("#Dependency1: None"));
        assert!(text.contains("#Dependency2: #S1"));
        let one = Plan::new(vec![PlanStep::new(1, "t", "a", [], "e").unwrap()], "").unwrap();
        assert_eq!(
            serialize_plan(&one),
            "#Task1: t\n#Agent1: a\n#Dependency1: None\n#ExpectedOutput1: e"
        );
    }

    #[test]
    fn truncate_bounds() {
        let plan = parse_plan_text(TWO_STEP).plan.unwrap();
        assert_eq!(truncate_plan_text(&plan, 2).unwrap(), serialize_plan(&plan));
        assert!(truncate_plan_text(&plan, 1).unwrap().starts_with("#Task1:"));
        assert!(!truncate_plan_text(&plan, 1).unwrap().contains("#Task2"));
        assert!(truncate_plan_text(&plan, 0).is_err());
        assert!(truncate_plan_text(&plan, 3).is_err());
    }

    #[test]
    fn error_code_names() {
        for code in ErrorCode::ALL {
            let json = serde_json::to_string(&code).unwrap();
            assert_eq!(json, format!("\"{}\"", code.as_str()));
        }
    }
}
