//! Cross-module invariants, checked with proptest.

use std::collections::{BTreeMap, BTreeSet};

use dagstop::critic::{parse_critic_output, ParseRoute};
use dagstop::engine::{
    run_baseline, run_prefix_evaluation, FixedCritic, Ports, ScriptedExecutor, ScriptedStatus, ScriptedStep,
    SimulatorPort,
};
use dagstop::llm::{CompletionPort, CompletionRequest, Gateway, ScriptedBackend, ScriptedResponse};
use dagstop::metrics::{aggregate, RunLedger, TaskOutcome};
use dagstop::repair::{build_repair_prompt, SpinFeedback, OUTPUT_MARKER};
use dagstop::simulator::{build_simulator_prompt, SimulationRequest, SimulationResult, SimulatorError};
use dagstop::store::{cosine_distance, RetrievalHit, TaskSummaryRecord};
use dagstop::{parse_plan_text, validate_plan_text, AgentRegistry, CompletionStatus, RunMode};
use proptest::prelude::*;

const AGENTS: [&str; 3] = ["IoT Data Download", "WorkOrder Agent", "Time Series Analytics and Forecasting"];

fn registry() -> AgentRegistry {
    AgentRegistry::new(AGENTS).unwrap()
}

fn status() -> impl Strategy<Value = CompletionStatus> {
    prop_oneof![
        Just(CompletionStatus::Accomplished),
        Just(CompletionStatus::PartiallyAccomplished),
        Just(CompletionStatus::NotAccomplished),
    ]
}

/// Random well-formed plan: step i depends on a subset of 1..i-1.
fn valid_plan_text() -> impl Strategy<Value = String> {
    (1usize..=8)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(0usize..3, n),
                prop::collection::vec(any::<u16>(), n),
            )
        })
        .prop_map(|(n, agents, masks)| {
            (1..=n)
                .map(|i| {
                    let deps: Vec<String> = (1..i)
                        .filter(|k| masks[i - 1] & (1 << (k % 16)) != 0)
                        .map(|k| format!("#S{k}"))
                        .collect();
                    let deps = if deps.is_empty() { "None".to_string() } else { deps.join(" ") };
                    format!(
                        "#Task{i}: Task number {i}\n#Agent{i}: {}\n#Dependency{i}: {deps}\n#ExpectedOutput{i}: Output {i}",
                        AGENTS[agents[i - 1]]
                    )
                })
                .collect::<Vec<_>>()
                .join("\n\n")
        })
}

proptest! {
    #[test]
    fn accepted_plans_are_sound(text in valid_plan_text()) {
        let report = validate_plan_text(&text, &registry());
        prop_assert!(report.is_valid, "{:?}", report.errors);
        let plan = parse_plan_text(&text).plan.expect("valid text parses");
        for step in plan.steps() {
            prop_assert!(step.dependencies().iter().all(|d| (1..step.index()).contains(d)));
        }
        let full = plan.prefix(plan.len()).unwrap();
        prop_assert_eq!(full.steps(), plan.steps());
    }

    #[test]
    fn deleting_a_tagged_line_invalidates(text in valid_plan_text(), pick in any::<prop::sample::Index>()) {
        let lines: Vec<&str> = text.lines().collect();
        let tagged: Vec<usize> = (0..lines.len()).filter(|i| lines[*i].starts_with('#')).collect();
        let drop = tagged[pick.index(tagged.len())];
        let mutated: Vec<&str> = lines.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, l)| *l).collect();
        prop_assert!(!validate_plan_text(&mutated.join("\n"), &registry()).is_valid);
    }

    #[test]
    fn validation_is_deterministic(text in "(#(Task|Agent|Dependency|ExpectedOutput)[0-9]: [A-Za-z#0-9 ]{0,12}\n){0,10}") {
        let a = serde_json::to_string(&validate_plan_text(&text, &registry())).unwrap();
        let b = serde_json::to_string(&validate_plan_text(&text, &registry())).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ready_steps_are_monotone(text in valid_plan_text(), small in any::<u16>(), extra in any::<u16>()) {
        let plan = parse_plan_text(&text).plan.unwrap();
        let full = plan.prefix(plan.len()).unwrap();
        let pick = |mask: u16| -> BTreeSet<usize> { (1..=plan.len()).filter(|i| mask & (1 << i) != 0).collect() };
        let a = pick(small);
        let b: BTreeSet<usize> = a.union(&pick(extra)).copied().collect();
        let ready_a: BTreeSet<usize> = full.ready_steps(&a).iter().map(|s| s.index()).collect();
        let ready_b: BTreeSet<usize> = full.ready_steps(&b).iter().map(|s| s.index()).collect();
        for i in ready_a.difference(&b) {
            prop_assert!(ready_b.contains(i));
        }
    }

    #[test]
    fn repair_prompt_ends_with_single_marker(
        base in "[A-Za-z .\n]{0,60}",
        markers in 0usize..3,
        with_feedback in any::<bool>(),
    ) {
        let base = format!("{base}{}", format!("\n{OUTPUT_MARKER}").repeat(markers));
        let feedback = SpinFeedback { rationale: "r".into(), ..SpinFeedback::default() };
        let prompt = build_repair_prompt(&base, "#Task1: a", &[], with_feedback.then_some(&feedback));
        prop_assert!(prompt.ends_with(OUTPUT_MARKER));
        // Markers beyond the first removed one stay inside the base section.
        prop_assert_eq!(prompt.matches(OUTPUT_MARKER).count(), markers.max(1));
    }

    #[test]
    fn cosine_distance_range(a in prop::collection::vec(-10.0f32..10.0, 8), scale in 0.01f32..100.0) {
        let b: Vec<f32> = a.iter().map(|x| x * scale).collect();
        let d = cosine_distance(&a, &b);
        prop_assert!((0.0..=2.0).contains(&d));
        if a.iter().any(|x| *x != 0.0) {
            prop_assert!(d < 1e-6);
        }
        let neg: Vec<f32> = a.iter().map(|x| -x).collect();
        prop_assert!((0.0..=2.0).contains(&cosine_distance(&a, &neg)));
    }

    #[test]
    fn simulator_prompt_is_pure_and_ordered(
        prefix in prop::collection::vec("[a-z ]{1,12}", 0..3),
        trajectories in prop::collection::vec("[a-z ]{1,12}", 0..3),
        hit_count in 0usize..3,
    ) {
        let request = SimulationRequest::new("question", "task", "IoT Data Download")
            .with_prefix(prefix)
            .with_trajectories(trajectories);
        let hits: Vec<RetrievalHit> = (0..hit_count)
            .map(|i| RetrievalHit {
                record: TaskSummaryRecord {
                    id: format!("h{i}"),
                    agent_name: "IoT Data Download".into(),
                    task_text: "t".into(),
                    status: CompletionStatus::Accomplished,
                    summary: format!("summary {i}"),
                    embedding: vec![1.0],
                },
                distance: 0.0,
                rank: i + 1,
            })
            .collect();
        let prompt = build_simulator_prompt(&request, &hits);
        prop_assert_eq!(&prompt, &build_simulator_prompt(&request, &hits));
        let headers = [
            "=== User Question ===",
            "=== DAG Prefix (high-level) ===",
            "=== Ground-Truth Trajectories (Few-Shot Examples) ===",
            "=== Target Task ===",
            "=== Similar Past Tasks ===",
            "=== Instruction ===",
        ];
        let positions: Vec<usize> = headers.iter().filter_map(|h| prompt.find(h)).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(prompt.contains(headers[1]), !request.dag_prefix.is_empty());
        prop_assert_eq!(prompt.contains(headers[2]), !request.few_shot_trajectories.is_empty());
        prop_assert_eq!(prompt.contains(headers[4]), hit_count > 0);
    }

    #[test]
    fn critic_parser_is_total(raw in any::<String>()) {
        let j = parse_critic_output(&raw);
        if j.route == ParseRoute::SafeDefault {
            prop_assert_eq!(j.status, CompletionStatus::NotAccomplished);
            prop_assert!(!j.can_answer_now);
        }
    }

    #[test]
    fn recovery_matches_strict_parse(s in status(), can in any::<bool>(), pre in "[a-z :]{0,20}", post in "[a-z .]{0,20}") {
        let object = serde_json::json!({"status": s.as_str(), "can_answer_now": can, "rationale": "why"}).to_string();
        let strict = parse_critic_output(&object);
        let wrapped = parse_critic_output(&format!("{pre}{object}{post}"));
        prop_assert_eq!(
            (wrapped.status, wrapped.can_answer_now, wrapped.rationale),
            (strict.status, strict.can_answer_now, strict.rationale)
        );
    }

    #[test]
    fn canonicalization_is_case_and_separator_insensitive(s in status(), sep in "[ _-]?", upper in any::<bool>()) {
        let spelled = s.as_str().replace(' ', &sep);
        let spelled = if upper { spelled.to_uppercase() } else { spelled.to_lowercase() };
        prop_assert_eq!(CompletionStatus::canonicalize(&spelled), Some(s));
        prop_assert_eq!(CompletionStatus::canonicalize(s.as_str()), Some(s));
    }
}

struct CountingSimulator(std::sync::atomic::AtomicUsize);

impl SimulatorPort for CountingSimulator {
    fn predict(&self, _request: &SimulationRequest) -> Result<SimulationResult, SimulatorError> {
        self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(SimulationResult {
            predicted_output: "guess".into(),
            tokens_in: 3,
            tokens_out: 1,
            hits_used: Vec::new(),
        })
    }
}

fn ledger(tasks: &[(TaskOutcome, u64)], run: usize) -> RunLedger {
    let mut l = RunLedger::new(format!("run{run}"), "spin");
    for (outcome, tools) in tasks {
        l.record_task(*outcome, *tools, 1, 10, 2, 0.5);
    }
    l
}

fn outcome() -> impl Strategy<Value = TaskOutcome> {
    prop_oneof![
        Just(TaskOutcome::Accomplished),
        Just(TaskOutcome::NotAccomplished),
        Just(TaskOutcome::Error),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spin_effort_never_exceeds_base(
        text in valid_plan_text(),
        judgments in prop::collection::vec((status(), any::<bool>()), 8),
        tools in prop::collection::vec(0u64..5, 8),
    ) {
        let plan = parse_plan_text(&text).plan.unwrap();
        let steps: BTreeMap<usize, ScriptedStep> = (1..=plan.len())
            .map(|i| (i, ScriptedStep {
                observation: format!("obs {i}"),
                tool_calls: tools[i - 1],
                status: ScriptedStatus::Accomplished,
                ..ScriptedStep::default()
            }))
            .collect();
        let executor = ScriptedExecutor::new(steps);
        let base = run_baseline(&plan, "q", &executor, "base");
        let simulator = CountingSimulator(Default::default());
        let critic = FixedCritic::new(judgments);
        let ports = Ports { simulator: Some(&simulator), critic: Some(&critic), executor: Some(&executor) };
        let spin = run_prefix_evaluation(&plan, "q", RunMode::Spin, ports, "spin").unwrap();
        prop_assert!(spin.ledger.executed_tasks <= base.ledger.executed_tasks);
        prop_assert!(spin.ledger.tool_calls <= base.ledger.tool_calls);
        prop_assert_eq!(spin.decisions.len(), spin.k_star);
        prop_assert_eq!(simulator.0.load(std::sync::atomic::Ordering::SeqCst), spin.k_star);
        prop_assert_eq!(spin.ledger.calls.len(), 2 * spin.k_star);
    }

    #[test]
    fn aggregation_is_permutation_invariant(
        runs in prop::collection::vec(prop::collection::vec((outcome(), 0u64..6), 0..5), 1..8),
        nonzero in any::<bool>(),
        rotate in any::<prop::sample::Index>(),
    ) {
        let ledgers: Vec<RunLedger> = runs.iter().enumerate().map(|(i, r)| ledger(r, i)).collect();
        let mut shuffled = ledgers.clone();
        shuffled.reverse();
        let by = rotate.index(shuffled.len());
        shuffled.rotate_left(by);
        let a = aggregate(&ledgers, nonzero);
        let b = aggregate(&shuffled, nonzero);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                let empty = runs.iter().filter(|r| r.is_empty()).count();
                prop_assert_eq!(a.excluded_runs, if nonzero { empty } else { 0 });
                prop_assert_eq!(a.runs + a.excluded_runs, runs.len());
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn audit_log_is_complete_and_scripts_deterministic(texts in prop::collection::vec("[a-z ]{0,20}", 1..6)) {
        let run = || {
            let gw = Gateway::new(ScriptedBackend::queue(texts.iter().map(ScriptedResponse::text)));
            let records: Vec<_> = (0..texts.len())
                .map(|i| {
                    let prompt = format!("prompt {i}");
                    let mut r = gw.complete(&CompletionRequest::new(&prompt)).unwrap();
                    r.latency = Default::default();
                    r
                })
                .collect();
            (records, gw.audit().entries())
        };
        let (first, audit) = run();
        let (second, _) = run();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(audit.len(), texts.len());
        prop_assert!(audit.windows(2).all(|w| w[0].seq < w[1].seq));
        for (entry, record) in audit.iter().zip(&first) {
            prop_assert_eq!((entry.tokens_in, entry.tokens_out), (record.tokens_in, record.tokens_out));
        }
    }
}
