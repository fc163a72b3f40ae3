use kgtune::kg::EditOp;
use kgtune::optimizer::Termination;
use kgtune::KnowledgeTriple;
use kgtune_wasm::{dog_scenario, Comparison, Demo, Feedback, FeedbackView, Playground, QueryView};

fn t(s: &str, r: &str, o: &str) -> KnowledgeTriple {
    KnowledgeTriple::new(s, r, o).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

fn playground() -> (Playground, Feedback) {
    let s = dog_scenario();
    (Playground::new(&s).unwrap(), s.example)
}

#[test]
fn query_bars_are_sorted_and_normalized() {
    let (p, fb) = playground();
    let v = p.query(&fb.query, "Dog").unwrap();
    assert_eq!(v.answer, "beef dog food");
    assert_eq!(v.retrieved, Some(t("Dog", "Enjoy", "Meat")));
    let probs: Vec<f64> = v.bars.iter().map(|b| b.probability).collect();
    // relation scores 0.45, 0.35, 0.15 normalized by hand
    for (got, want) in probs.iter().zip([0.45 / 0.95, 0.35 / 0.95, 0.15 / 0.95]) {
        assert!(close(*got, want), "{probs:?}");
    }
    assert!(close(probs.iter().sum(), 1.0));
}

#[test]
fn query_without_triples_falls_back() {
    let (p, fb) = playground();
    let v = p.query(&fb.query, "Horse").unwrap();
    assert!(v.bars.is_empty());
    assert_eq!(v.retrieved, None);
    assert_eq!(v.answer, "dog kibble");
}

#[test]
fn feedback_edits_graph_and_reports_delta() {
    let (mut p, fb) = playground();
    let v = p.feedback(&fb).unwrap();
    assert_eq!(v.report.termination, Termination::ThresholdMet);
    assert_eq!(v.report.added, vec![t("Dog", "Enjoy", "Vegetable"), t("Dog", "Likes", "Vegetable")]);
    assert_eq!(
        v.report.removed,
        vec![t("Dog", "Is", "Animal"), t("Dog", "Likes", "Bones"), t("Dog", "Enjoy", "Meat")]
    );
    // final retrieval: Enjoy 0.45 / 0.8, Likes 0.35 / 0.8
    let want = -0.5 * ((0.9f64 * 0.45 / 0.8).ln() + (0.8f64 * 0.35 / 0.8).ln());
    assert!(close(v.report.final_loss(), want), "{} vs {want}", v.report.final_loss());
    assert!(v.report.final_loss() <= 1.0);

    assert_eq!(v.journal.len(), 5);
    assert_eq!(v.delta.lines().count(), v.journal.len());
    for (line, e) in v.delta.lines().zip(&v.journal) {
        let sign = if e.op == EditOp::Add { '+' } else { '-' };
        assert!(line.starts_with(sign), "{line}");
        assert!(line.contains(&e.triple.to_string()));
        assert!(line.ends_with("feedback:demo-1"));
    }

    let after = p.query(&fb.query, "Dog").unwrap();
    assert_eq!(after.answer, "vegetarian dog food");
    assert!(p.graph().contains(&t("Cat", "Enjoy", "Fish")));
    assert!(p.graph().contains(&t("Cat", "Is", "Animal")));

    // a second run is already below the threshold
    let again = p.feedback(&fb).unwrap();
    assert_eq!(again.report.edit_count(), 0);
    assert!(again.journal.is_empty());
    assert!(again.delta.is_empty());
}

#[test]
fn compare_leaves_live_graph_alone() {
    let (p, fb) = playground();
    let before = p.graph().triple_set();
    let c = p.compare(&fb).unwrap();
    assert_eq!(p.graph().triple_set(), before);
    assert!(p.graph().journal().is_empty());

    assert_eq!(c.greedy.subject_triples, vec![t("Dog", "Enjoy", "Vegetable")]);
    assert!(close(c.greedy.answer_probability, 0.9));
    assert_eq!(
        c.heuristic.subject_triples,
        vec![t("Dog", "Enjoy", "Vegetable"), t("Dog", "Likes", "Vegetable")]
    );
    let mixed = 0.9 * 0.45 / 0.8 + 0.8 * 0.35 / 0.8;
    assert!(close(c.heuristic.answer_probability, mixed));
}

#[test]
fn reset_restores_initial_graph() {
    let (mut p, fb) = playground();
    let before = p.graph().triple_set();
    p.feedback(&fb).unwrap();
    assert_ne!(p.graph().triple_set(), before);
    p.reset();
    assert_eq!(p.graph().triple_set(), before);
    assert!(p.graph().journal().is_empty());
    let v = p.feedback(&fb).unwrap();
    assert!(v.delta.lines().all(|l| l.ends_with("feedback:demo-1")));
}

#[test]
fn injected_clock_stamps_journal() {
    let (mut p, fb) = playground();
    p.set_clock(|| 1_234);
    let v = p.feedback(&fb).unwrap();
    assert!(v.journal.iter().all(|e| e.timestamp == 1_234));
}

#[test]
fn invalid_settings_are_rejected() {
    let (mut p, mut fb) = playground();
    fb.k = Some(0);
    assert!(p.feedback(&fb).is_err());
    fb.k = Some(2);
    fb.epsilon = Some(-1.0);
    assert!(p.compare(&fb).is_err());
    assert!(p.graph().journal().is_empty());
    assert!(Playground::from_json("{\"graph\": []}").is_err());
}

#[test]
fn scenario_round_trips_through_json() {
    let json = Demo::default_scenario();
    let mut from_json = Playground::from_json(&json).unwrap();
    let (mut built, fb) = playground();
    let a = from_json.feedback(&fb).unwrap();
    let b = built.feedback(&fb).unwrap();
    assert_eq!(a.report.loss_trace, b.report.loss_trace);
}

#[test]
fn bindings_speak_json() {
    let scenario = dog_scenario();
    let mut demo = Demo::new(None).unwrap();
    let q: QueryView = serde_json::from_str(&demo.query(&scenario.example.query, "Dog").unwrap()).unwrap();
    assert_eq!(q.bars.len(), 3);
    let fb = serde_json::to_string(&scenario.example).unwrap();
    let cmp: Comparison = serde_json::from_str(&demo.compare(&fb).unwrap()).unwrap();
    assert_eq!(cmp.greedy.subject_triples.len(), 1);
    let v: FeedbackView = serde_json::from_str(&demo.feedback(&fb).unwrap()).unwrap();
    assert_eq!(v.journal.len(), 5);
    let graph: Vec<KnowledgeTriple> = serde_json::from_str(&demo.graph()).unwrap();
    assert_eq!(graph.len(), 4);
    demo.reset();
    let graph: Vec<KnowledgeTriple> = serde_json::from_str(&demo.graph()).unwrap();
    assert_eq!(graph.len(), 5);
}
