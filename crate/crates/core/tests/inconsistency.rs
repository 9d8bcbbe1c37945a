use intervalog::engine::{Engine, EngineConfig, EngineError, InconsistencyPolicy, RESET_CAUSE};
use intervalog::graph::{GraphDocument, KnowledgeGraph, NodeDoc};
use intervalog::interval::Interval;
use intervalog::lang::{parse_fact, GroundAtom, Program};
use intervalog::scenario::{DriverSpec, Scenario, ScenarioSpec, Source, Step, StopReason, TextSource};

fn one_node() -> GraphDocument {
    GraphDocument {
        nodes: vec![NodeDoc {
            id: "a".into(),
            node_type: None,
        }],
        edges: vec![],
    }
}

fn engine(policy: InconsistencyPolicy) -> Engine {
    let config = EngineConfig {
        inconsistency_policy: policy,
        ..EngineConfig::default()
    };
    Engine::init(
        KnowledgeGraph::from_document(&one_node()).unwrap(),
        Program::default(),
        config,
    )
    .unwrap()
}

#[test]
fn reset_policy_makes_the_atom_unknown_and_static() {
    let mut e = engine(InconsistencyPolicy::ResetToUnknownStatic);
    e.inject_and_recompute(&[parse_fact("p(a) : [1,1]").unwrap()], "1")
        .unwrap();
    e.inject_and_recompute(&[parse_fact("p(a) : [0,0]").unwrap()], "1")
        .unwrap();
    let p = GroundAtom::node("p", "a");
    assert_eq!(e.bound(&p), Interval::UNKNOWN);
    assert!(e.is_static(&p));
    let last = e.export_trace().last().unwrap();
    assert_eq!(last.cause, RESET_CAUSE);
    assert!(last.made_static);
    assert_eq!((last.old, last.new), (Interval::TRUE, Interval::UNKNOWN));
    // Static now: later facts leave it alone.
    e.inject_and_recompute(&[parse_fact("p(a) : [1,1]").unwrap()], "1")
        .unwrap();
    assert_eq!(e.bound(&p), Interval::UNKNOWN);
}

#[test]
fn halt_policy_reports_atom_and_both_bounds() {
    let mut e = engine(InconsistencyPolicy::FlagAndHalt);
    e.inject_and_recompute(&[parse_fact("p(a) : [1,1]").unwrap()], "1")
        .unwrap();
    let err = e
        .inject_and_recompute(&[parse_fact("p(a) : [0,0]").unwrap()], "1")
        .unwrap_err();
    let EngineError::Inconsistency(report) = &err else {
        panic!("expected an inconsistency, got {err}");
    };
    assert_eq!(report.atom, GroundAtom::node("p", "a"));
    assert_eq!((report.current, report.incoming), (Interval::TRUE, Interval::FALSE));
    let text = err.to_string();
    assert!(
        text.contains("p(a)") && text.contains("[1,1]") && text.contains("[0,0]"),
        "{text}"
    );
    assert!(matches!(e.fixpoint_step("1"), Err(EngineError::Halted(_))));
    assert!(e.halted().is_some());
}

#[test]
fn scenario_run_stops_on_inconsistency() {
    let step = |fact: &str| Step {
        facts: vec![fact.into()],
        ..Step::default()
    };
    let spec = ScenarioSpec {
        name: "clash".into(),
        graph: Source::Inline(one_node()),
        program: TextSource::Inline { inline: String::new() },
        schema: None,
        engine: EngineConfig::default(),
        seed: 0,
        classifiers: Default::default(),
        driver: DriverSpec {
            source: "1".into(),
            ticks: vec![step("p(a) : [1,1]"), step("p(a) : [0,0]")],
            repeat: None,
            tick_secs: 1.0,
        },
        pollers: vec![],
        monitor: None,
        trace: Default::default(),
        queries: vec![],
    };
    let report = Scenario::resolve(&spec, std::path::Path::new("."))
        .unwrap()
        .run_deterministic()
        .unwrap();
    assert!(matches!(report.stop, StopReason::Inconsistency(ref r) if r.atom == GroundAtom::node("p", "a")));
}
