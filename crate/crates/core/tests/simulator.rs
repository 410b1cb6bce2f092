use std::collections::HashMap;

use gengrade_core::fixtures;
use gengrade_core::sampling::SamplerPolicy;
use gengrade_core::simulator::*;
use proptest::prelude::*;

const SINGLE: &str = r#"{"start":"start","nodes":{"start":[{"value":"only","template":[{"lit":"liftoff"}]}]}}"#;

fn trace(pairs: &[(&str, &str)]) -> Trace {
    Trace::from_pairs(pairs.iter().copied())
}

fn text_of(p: &Production, span: Span) -> String {
    p.text.chars().skip(span.start).take(span.len()).collect()
}

#[test]
fn countdown_has_four_nodes_with_expected_domains() {
    let sim = fixtures::countdown_mini();
    assert_eq!(sim.len(), 4);
    let domains: Vec<(String, usize)> = sim.nodes().iter().map(|n| (n.name.to_string(), n.domain.len())).collect();
    for (name, size) in [("LoopChoice", 3), ("Direction", 2), ("Bound", 2), ("PrintStyle", 2)] {
        assert!(domains.contains(&(name.to_string(), size)), "{name}");
    }
    assert!(validate(&sim).is_clean());
}

#[test]
fn liftoff_has_26_nodes_and_validates() {
    let sim = fixtures::liftoff_java();
    assert_eq!(sim.len(), 26);
    let report = validate(&sim);
    assert!(report.is_clean(), "{report:?}");
}

#[test]
fn single_node_grammar() {
    let sim = load_simulator(SINGLE).unwrap();
    for seed in 0..5 {
        let (t, p) = simulate_seeded(&sim, seed, SamplerPolicy::Iid).unwrap();
        assert_eq!(t, trace(&[("start", "only")]));
        assert_eq!(p.text, "liftoff");
        assert_eq!(p.spans, [Span::new(0, 7)]);
    }
    assert_eq!(trace_prob(&sim, &trace(&[("start", "only")])).unwrap(), 1.0);
    let all = enumerate_all(&sim, 10).unwrap();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0].prob, 1.0);
}

#[test]
fn replay_known_trace() {
    let sim = fixtures::countdown_mini();
    let t = trace(&[("LoopChoice", "for"), ("Direction", "down"), ("Bound", "correct"), ("PrintStyle", "println")]);
    let p = replay(&sim, &t).unwrap();
    assert_eq!(p.text, "for (i = 10; i > 0; i--) println(i);");
    assert_eq!(text_of(&p, p.spans[2]), "> 0");
    assert_eq!(text_of(&p, p.spans[1]), "i = 10; i > 0; i--");
    // 5/10 · 3/4 · 3/4 · 4/5
    assert!((trace_prob(&sim, &t).unwrap() - 0.225).abs() < 1e-15);
}

#[test]
fn replay_reports_first_divergent_step() {
    let sim = fixtures::countdown_mini();
    let bad = trace(&[("LoopChoice", "for"), ("Direction", "sideways")]);
    assert!(matches!(replay(&sim, &bad), Err(ExecError::InvalidTrace { step: 2, .. })));
    let wrong_node = trace(&[("LoopChoice", "for"), ("Bound", "correct")]);
    assert!(matches!(replay(&sim, &wrong_node), Err(ExecError::InvalidTrace { step: 2, .. })));
    let short = trace(&[("LoopChoice", "for"), ("Direction", "down")]);
    assert!(matches!(replay(&sim, &short), Err(ExecError::InvalidTrace { step: 3, .. })));
    let long = trace(&[("LoopChoice", "manual"), ("Direction", "down")]);
    assert!(matches!(replay(&sim, &long), Err(ExecError::InvalidTrace { step: 2, .. })));
}

#[test]
fn two_rule_weights() {
    let sim = load_simulator(r#"{"start":"A","nodes":{"A":[{"value":"x","weight":1},{"value":"y","weight":3}]}}"#).unwrap();
    assert_eq!(trace_prob(&sim, &trace(&[("A", "y")])).unwrap(), 0.75);
}

/// Hand enumeration of countdown-mini: manual, while, and 2·2·2 for-loops.
fn countdown_oracle() -> HashMap<Vec<(&'static str, &'static str)>, f64> {
    let mut m = HashMap::new();
    m.insert(vec![("LoopChoice", "manual")], 0.2);
    m.insert(vec![("LoopChoice", "while")], 0.3);
    for (dir, pd) in [("down", 0.75), ("up", 0.25)] {
        for (bound, pb) in [("correct", 0.75), ("off_by_one", 0.25)] {
            for (style, ps) in [("println", 0.8), ("print", 0.2)] {
                m.insert(
                    vec![("LoopChoice", "for"), ("Direction", dir), ("Bound", bound), ("PrintStyle", style)],
                    0.5 * pd * pb * ps,
                );
            }
        }
    }
    m
}

#[test]
fn enumeration_matches_hand_count() {
    let sim = fixtures::countdown_mini();
    let all = enumerate_all(&sim, 100).unwrap();
    let oracle = countdown_oracle();
    assert_eq!(all.len(), 10);
    let total: f64 = all.iter().map(|e| e.prob).sum();
    assert!((total - 1.0).abs() < 1e-12);
    for e in &all {
        let key: Vec<(&str, &str)> = e.trace.iter().map(|s| (s.node(), s.value())).collect();
        let want = oracle.iter().find(|(k, _)| **k == key).map(|(_, p)| *p).expect("trace in oracle");
        assert!((e.prob - want).abs() < 1e-12);
        assert_eq!(replay(&sim, &e.trace).unwrap(), e.production);
    }
    for w in all.windows(2) {
        assert!(w[0].prob > w[1].prob || (w[0].prob == w[1].prob && w[0].trace < w[1].trace));
    }
    assert!(matches!(enumerate_all(&sim, 3), Err(ExecError::LimitExceeded { limit: 3 })));
}

#[test]
fn iid_frequencies_match_trace_probabilities() {
    let sim = fixtures::countdown_mini();
    let n = 100_000usize;
    let ds = gengrade_core::sampling::sample_dataset(&sim, SamplerPolicy::Iid, n, 7, gengrade_core::Exec::default()).unwrap();
    let mut counts: HashMap<&Trace, usize> = HashMap::new();
    for r in &ds.records {
        *counts.entry(&r.trace).or_default() += 1;
    }
    for e in enumerate_all(&sim, 100).unwrap() {
        let observed = counts.get(&e.trace).copied().unwrap_or(0) as f64;
        let sd = (n as f64 * e.prob * (1.0 - e.prob)).sqrt();
        assert!((observed - n as f64 * e.prob).abs() < 3.0 * sd, "{}: {observed}", e.trace);
    }
}

#[test]
fn validate_finds_dead_contexts_and_unreachable_nodes() {
    let dead = load_simulator(
        r#"{"start":"A","nodes":{
            "A":[{"value":"x","template":[{"ref":"B"}]},{"value":"z"}],
            "B":[{"value":"y","guard":{"eq":["A","z"]}}]}}"#,
    )
    .unwrap();
    let report = validate(&dead);
    assert!(report.issues.iter().any(|i| matches!(i, Issue::DeadContext { node, .. } if node == "B")));

    let orphan = load_simulator(r#"{"start":"A","nodes":{"A":[{"value":"x"}],"B":[{"value":"y"}]}}"#).unwrap();
    let report = validate(&orphan);
    assert_eq!(report.issues, [Issue::Unreachable { node: "B".into() }]);
}

#[test]
fn unbounded_recursion_trips_max_depth() {
    let sim = load_simulator(r#"{"start":"A","max_depth":5,"nodes":{"A":[{"value":"again","template":[{"lit":"a"},{"ref":"A"}]}]}}"#).unwrap();
    assert!(matches!(simulate_seeded(&sim, 0, SamplerPolicy::Iid), Err(gengrade_core::sampling::SamplingError::Exec(ExecError::DepthExceeded { .. }))));
    assert!(!validate(&sim).is_clean());
}

fn check_spans(p: &Production) {
    let len = p.text.chars().count();
    assert_eq!(p.spans[0], Span::new(0, len), "root covers the text");
    for (i, a) in p.spans.iter().enumerate() {
        assert!(a.end <= len);
        for b in &p.spans[i + 1..] {
            // Later steps are descendants or later siblings: nested or disjoint.
            let disjoint = b.start >= a.end || b.end <= a.start;
            assert!(a.contains_span(b) || disjoint || b.is_empty(), "{a:?} vs {b:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn round_trip_and_span_nesting(seed in any::<u64>()) {
        for sim in [fixtures::countdown_mini(), fixtures::liftoff_java()] {
            for policy in [SamplerPolicy::Iid, SamplerPolicy::Uniform] {
                let (t, p) = simulate_seeded(&sim, seed, policy).unwrap();
                prop_assert_eq!(&replay(&sim, &t).unwrap(), &p);
                check_spans(&p);
                let prob = trace_prob(&sim, &t).unwrap();
                prop_assert!(prob > 0.0 && prob <= 1.0);
            }
        }
    }

    #[test]
    fn guards_hold_on_sampled_traces(seed in any::<u64>()) {
        let sim = fixtures::countdown_mini();
        let (t, p) = simulate_seeded(&sim, seed, SamplerPolicy::Uniform).unwrap();
        if let Some(dir) = t.iter().position(|s| s.node() == "Direction") {
            let bound = text_of(&p, p.spans[dir + 1]);
            let allowed: &[&str] = if t.steps[dir].value() == "up" { &["<= 10", "< 10"] } else { &["> 0", ">= 0"] };
            prop_assert!(allowed.contains(&bound.as_str()), "{}", bound);
        }
    }
}
