use std::sync::Arc;

use tasknet_core::eval::{aggregate, load_cases, run_eval, EvalError, EvalSetup, VerdictLabel, VerdictSource};
use tasknet_core::fixtures::{self, DESK_LAMP_KB, MANAGER_KB, SOLAR_CAR_KB};
use tasknet_core::knowledge_base::KnowledgeBase;
use tasknet_core::llm::{LlmClient, ReplayBackend, ReplayEntry, ReplayKeyMode};
use tasknet_core::orchestration::{Allocator, Manager, Planner};
use tasknet_core::prompt::ValidationGate;
use tasknet_core::sim::AliasMode;

fn manager_for(kb: &Arc<KnowledgeBase>) -> Manager {
    let mut manager = Manager::new(fixtures::kb(MANAGER_KB)).unwrap();
    manager.register_serving(Arc::new(Planner::new("planner", kb.clone())));
    manager
}

fn run(
    kb_text: &str,
    cases: &str,
    client: LlmClient,
    verdicts: Option<&str>,
) -> Result<tasknet_core::eval::EvalReport, EvalError> {
    let kb = fixtures::kb(kb_text);
    let manager = manager_for(&kb);
    let cases = load_cases(fixtures::path(cases)).unwrap();
    let source = VerdictSource::for_cases(&cases, verdicts.map(fixtures::path).as_deref(), AliasMode::Resolve)?;
    let allocator = Allocator::single_universal(&kb);
    let setup = EvalSetup {
        manager: &manager,
        client: &client,
        allocator: &allocator,
        repeats: 3,
    };
    run_eval(&cases, &setup, &source, "test")
}

fn oracle() -> LlmClient {
    LlmClient::oracle(vec![
        fixtures::kb(MANAGER_KB),
        fixtures::kb(DESK_LAMP_KB),
        fixtures::kb(SOLAR_CAR_KB),
    ])
}

#[test]
fn oracle_scores_full_marks() {
    for (kb, cases, subtasks) in [
        (DESK_LAMP_KB, "eval/desk_lamp_cases.json", 6),
        (SOLAR_CAR_KB, "eval/solar_car_cases.json", 8),
    ] {
        let report = run(kb, cases, oracle(), None).unwrap();
        let m = &report.metrics;
        assert_eq!(m.format_success_rate.render(), "100%");
        assert_eq!(m.parameter_success_rate.unwrap().render(), "100%");
        assert_eq!(m.parameter_success_rate.unwrap().denominator, 3 * subtasks);
        assert_eq!(m.plan_success_rate.render(), "100%");
        assert_eq!(report.verdict_source, "simulator");
    }
}

fn stepwise(script: &str) -> LlmClient {
    LlmClient::new(Box::new(
        ReplayBackend::load(fixtures::path(script), ReplayKeyMode::Ordinal).unwrap(),
    ))
    .with_gate(ValidationGate::Lenient)
}

#[test]
fn recorded_labels_reproduce_table_rows() {
    let a = run(
        DESK_LAMP_KB,
        "eval/stepwise_cases.json",
        stepwise("eval/stepwise_script_a.json"),
        None,
    )
    .unwrap();
    let m = &a.metrics;
    assert_eq!(
        (
            m.format_success_rate.render(),
            m.parameter_success_rate.unwrap().render(),
            m.plan_success_rate.render()
        ),
        ("100%".into(), "79.2%".into(), "83.3%".into())
    );
    assert_eq!(m.parameter_success_rate.unwrap().numerator, 19);
    let b = run(
        DESK_LAMP_KB,
        "eval/stepwise_cases.json",
        stepwise("eval/stepwise_script_b.json"),
        None,
    )
    .unwrap();
    let p = b.metrics.parameter_success_rate.unwrap();
    assert_eq!((p.numerator, p.denominator), (16, 24));
    assert_eq!(p.render_truncated(), "66.6%");
    assert_eq!(b.metrics.plan_success_rate.render(), "83.3%");
    assert_eq!(b.verdict_source, "external");
}

#[test]
fn persisted_records_recompute_the_report() {
    let report = run(
        DESK_LAMP_KB,
        "eval/stepwise_cases.json",
        stepwise("eval/stepwise_script_a.json"),
        None,
    )
    .unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: tasknet_core::eval::EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(aggregate(&back.trials).unwrap(), report.metrics);
    assert_eq!(back.trials[0].transcript, "1-2");
}

#[test]
fn prose_backend_scores_zero() {
    let prose = (0..100)
        .map(|i| ReplayEntry {
            key: i.to_string(),
            response: "I would start by attaching the rod.".into(),
        })
        .collect();
    let client = LlmClient::replay(prose, ReplayKeyMode::Ordinal).with_retries(0);
    let report = run(DESK_LAMP_KB, "eval/desk_lamp_cases.json", client, None).unwrap();
    assert_eq!(report.metrics.format_success_rate.render(), "0%");
    assert_eq!(report.metrics.parameter_success_rate, None);
    assert_eq!(report.metrics.plan_success_rate.render(), "0%");
    assert!(report.table().contains("\tn/a\t"));
    assert!(report.trials.iter().all(|t| t.subtasks_total == 0 && t.error.is_some()));
}

#[test]
fn external_file_overrides_simulator_and_must_be_complete() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.json");
    let labels = vec![VerdictLabel {
        case_id: "desk-lamp".into(),
        generation: 1,
        labels: vec![false, false, true],
    }];
    std::fs::write(&path, serde_json::to_string(&labels).unwrap()).unwrap();
    let err = run(
        DESK_LAMP_KB,
        "eval/desk_lamp_cases.json",
        oracle(),
        Some(path.to_str().unwrap()),
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::MissingVerdict { generation: 2, .. }));
}
