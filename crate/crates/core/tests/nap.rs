use std::collections::BTreeMap;

use gengrade_core::dataset::{Dataset, Record};
use gengrade_core::fixtures;
use gengrade_core::nap::*;
use gengrade_core::sampling::{sample_dataset, SamplerPolicy};
use gengrade_core::simulator::{enumerate_all, load_simulator, Simulator, Trace};
use gengrade_core::Exec;

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        embed: 8,
        encoder_layers: 2,
        batch_size: 32,
        epochs: 3,
        lr: 5e-3,
        weight_decay: 1e-7,
        seed,
    }
}

fn countdown(n: usize, seed: u64) -> (Simulator, Dataset) {
    let sim = fixtures::countdown_mini();
    let ds = sample_dataset(&sim, SamplerPolicy::Iid, n, seed, Exec::default()).unwrap();
    (sim, ds)
}

#[test]
fn heads_follow_node_domains() {
    let (sim, ds) = countdown(50, 0);
    let model = build_model(&sim, &ds, &ModelConfig::default()).unwrap();
    let mut sizes = model.head_sizes();
    sizes.sort();
    assert_eq!(sizes, [2, 2, 2, 3]);
    assert_eq!(model.params.len(), model.params.data.len());
}

#[test]
fn initialization_is_seeded() {
    let (sim, ds) = countdown(50, 0);
    let a = build_model(&sim, &ds, &small(4)).unwrap();
    let b = build_model(&sim, &ds, &small(4)).unwrap();
    let c = build_model(&sim, &ds, &small(5)).unwrap();
    assert_eq!(a.params.data, b.params.data);
    assert_ne!(a.params.data, c.params.data);
}

#[test]
fn build_rejects_bad_inputs() {
    let (sim, ds) = countdown(50, 0);
    let zero = ModelConfig { hidden: 0, ..small(0) };
    assert!(matches!(build_model(&sim, &ds, &zero), Err(NapError::BadConfig(_))));
    let liftoff = fixtures::liftoff_java();
    assert!(matches!(build_model(&liftoff, &ds, &small(0)), Err(NapError::HashMismatch { .. })));
    let mut odd = ds.clone();
    odd.records[0].trace = Trace::from_pairs([("LoopChoice", "recursion")]);
    assert!(matches!(build_model(&sim, &odd, &small(0)), Err(NapError::UnknownValue { .. })));
    let empty = Dataset::new(sim.grammar_hash().to_string(), vec![Record::real("x", 1)]);
    let mut model = build_model(&sim, &empty, &small(0)).unwrap();
    assert!(matches!(train(&mut model, &sim, &empty, Exec::default()), Err(NapError::EmptyDataset)));
}

#[test]
fn single_trace_grammar_is_certain() {
    let sim = load_simulator(r#"{"start":"start","nodes":{"start":[{"value":"only","template":[{"lit":"liftoff"}]}]}}"#).unwrap();
    let ds = sample_dataset(&sim, SamplerPolicy::Iid, 20, 0, Exec::default()).unwrap();
    let mut model = build_model(&sim, &ds, &small(0)).unwrap();
    let report = train(&mut model, &sim, &ds, Exec::default()).unwrap();
    assert!(report.epoch_loss.iter().all(|&l| l.abs() < 1e-12));
    for y in ["liftoff", "something else entirely"] {
        let p = parse(&model, &sim, y, DecodeMode::Greedy).unwrap();
        assert_eq!(p.trace, Trace::from_pairs([("start", "only")]));
        assert!(p.total_log_prob.abs() < 1e-12);
        assert_eq!(p.exact, y == "liftoff");
    }
}

#[test]
fn huge_learning_rate_diverges() {
    let (sim, ds) = countdown(500, 1);
    let cfg = ModelConfig { lr: 1e3, epochs: 5, ..small(0) };
    let mut model = build_model(&sim, &ds, &cfg).unwrap();
    assert!(matches!(train(&mut model, &sim, &ds, Exec::default()), Err(NapError::NonFiniteLoss { .. })));
}

#[test]
fn training_is_identical_across_execution_modes() {
    let (sim, ds) = countdown(300, 2);
    let mut a = build_model(&sim, &ds, &small(1)).unwrap();
    let mut b = a.clone();
    let ra = train(&mut a, &sim, &ds, Exec::Sequential).unwrap();
    let rb = train(&mut b, &sim, &ds, Exec::default()).unwrap();
    assert_eq!(ra.epoch_loss, rb.epoch_loss);
    assert_eq!(a.params.data, b.params.data);
    assert!(ra.epoch_loss.iter().all(|&l| l >= 0.0));
}

#[test]
fn gradients_match_finite_differences() {
    let (sim, ds) = countdown(200, 3);
    let model = build_model(&sim, &ds, &small(2)).unwrap();
    for (i, r) in ds.records.iter().take(5).enumerate() {
        let err = grad_check(&model, &sim, r, 1e-4, 200, i as u64).unwrap();
        assert!(err < 1e-4, "record {i}: {err}");
    }
    let liftoff = fixtures::liftoff_java();
    let lds = sample_dataset(&liftoff, SamplerPolicy::Iid, 100, 3, Exec::default()).unwrap();
    let lmodel = build_model(&liftoff, &lds, &small(2)).unwrap();
    for (i, r) in lds.records.iter().take(5).enumerate() {
        let err = grad_check(&lmodel, &liftoff, r, 1e-4, 200, i as u64).unwrap();
        assert!(err < 1e-4, "liftoff record {i}: {err}");
    }
    assert!(matches!(grad_check(&model, &sim, &Record::real("x", 1), 1e-4, 10, 0), Err(NapError::EmptyTrace)));
}

/// Every per-step distribution is proper after masking: for each prefix of
/// the enumeration, the next-step probabilities over its continuations sum to 1.
#[test]
fn masked_step_distributions_are_proper() {
    let (sim, ds) = countdown(200, 4);
    let model = build_model(&sim, &ds, &small(3)).unwrap();
    let all = enumerate_all(&sim, 100).unwrap();
    for y in ["for (i = 10; i > 0; i--) println(i);", "while true", ""] {
        let mut by_prefix: BTreeMap<(Trace, String), f64> = BTreeMap::new();
        let mut total = 0.0;
        for e in &all {
            let lps = step_log_probs(&model, &sim, y, &e.trace).unwrap();
            assert_eq!(posterior_eval(&model, &sim, y, &e.trace).unwrap(), lps.iter().sum::<f64>());
            total += lps.iter().sum::<f64>().exp();
            for (t, lp) in lps.iter().enumerate() {
                let prefix = Trace::new(e.trace.steps[..t].to_vec());
                by_prefix.insert((prefix, e.trace.steps[t].value().to_string()), lp.exp());
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let mut sums: BTreeMap<Trace, f64> = BTreeMap::new();
        for ((prefix, _), p) in by_prefix {
            *sums.entry(prefix).or_default() += p;
        }
        for (prefix, s) in sums {
            assert!((s - 1.0).abs() < 1e-6, "{prefix}: {s}");
        }
    }
}

#[test]
fn greedy_is_stepwise_argmax_and_matches_teacher_forcing() {
    let (sim, ds) = countdown(200, 5);
    let model = build_model(&sim, &ds, &small(4)).unwrap();
    let all = enumerate_all(&sim, 100).unwrap();
    for r in ds.records.iter().take(20) {
        let y = r.text();
        let g = parse(&model, &sim, y, DecodeMode::Greedy).unwrap();
        assert_eq!(parse(&model, &sim, y, DecodeMode::Greedy).unwrap(), g);
        let forced = step_log_probs(&model, &sim, y, &g.trace).unwrap();
        for (a, b) in forced.iter().zip(&g.step_log_probs) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((g.total_log_prob - g.step_log_probs.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(g.exact, g.production.text == y);
        // Any trace that leaves the greedy path at step t scores no higher there.
        for e in &all {
            let t = e.trace.steps.iter().zip(&g.trace.steps).take_while(|(a, b)| a == b).count();
            if t < e.trace.len() && t < g.trace.len() {
                let alt = step_log_probs(&model, &sim, y, &e.trace).unwrap();
                assert!(alt[t] <= g.step_log_probs[t] + 1e-12);
            }
        }
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    let sim = fixtures::liftoff_java();
    let ds = sample_dataset(&sim, SamplerPolicy::Iid, 1000, 6, Exec::default()).unwrap();
    let model = build_model(&sim, &ds, &ModelConfig { hidden: 8, embed: 4, encoder_layers: 1, ..small(5) }).unwrap();
    for r in &ds.records {
        let g = parse(&model, &sim, r.text(), DecodeMode::Greedy).unwrap();
        let b = parse(&model, &sim, r.text(), DecodeMode::Beam { width: 10 }).unwrap();
        assert!(b.total_log_prob >= g.total_log_prob - 1e-12);
    }
    for width in [0, MAX_BEAM_WIDTH + 1] {
        assert!(matches!(parse(&model, &sim, "x", DecodeMode::Beam { width }), Err(NapError::BadBeamWidth(_))));
    }
}

#[test]
fn sampling_decode_is_seeded_and_valid() {
    let (sim, ds) = countdown(100, 7);
    let model = build_model(&sim, &ds, &small(6)).unwrap();
    let y = ds.records[0].text();
    let a = parse(&model, &sim, y, DecodeMode::Sample { seed: 9 }).unwrap();
    assert_eq!(a, parse(&model, &sim, y, DecodeMode::Sample { seed: 9 }).unwrap());
    let scored = posterior_eval(&model, &sim, y, &a.trace).unwrap();
    assert!((scored - a.total_log_prob).abs() < 1e-9);
}

#[test]
fn dead_contexts_surface_as_decode_failures() {
    let sim = load_simulator(
        r#"{"start":"A","nodes":{
            "A":[{"value":"x","template":[{"ref":"B"}]},{"value":"z"}],
            "B":[{"value":"y","guard":{"eq":["A","z"]}}]}}"#,
    )
    .unwrap();
    let ds = Dataset::new(sim.grammar_hash().to_string(), vec![Record::real("x", 1)]);
    let mut model = build_model(&sim, &ds, &small(0)).unwrap();
    // Force the first decision onto the dead branch.
    let id = model.params.tensors.iter().position(|t| t.name == "head.A.b").unwrap();
    let off = model.params.tensors[id].offset;
    model.params.data[off] = 1e3;
    match parse(&model, &sim, "x", DecodeMode::Greedy) {
        Err(NapError::DeadDecode { step, node, .. }) => assert_eq!((step, node.as_str()), (2, "B")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let (sim, ds) = countdown(100, 8);
    let model = build_model(&sim, &ds, &small(7)).unwrap();
    let mut bytes = Vec::new();
    write_model(&model, &mut bytes).unwrap();
    let back = read_model(bytes.as_slice()).unwrap();
    assert_eq!(back.params.data, model.params.data);
    assert_eq!(back.config, model.config);
    assert_eq!(back.vocab, model.vocab);
    let y = ds.records[0].text();
    assert_eq!(
        parse(&back, &sim, y, DecodeMode::Greedy).unwrap(),
        parse(&model, &sim, y, DecodeMode::Greedy).unwrap()
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap().params.data, model.params.data);

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(read_model(trailing.as_slice()), Err(NapError::Checkpoint(_))));
    assert!(matches!(read_model(&bytes[..bytes.len() - 3]), Err(NapError::Checkpoint(_))));
    assert!(matches!(read_model(&b"not a model"[..]), Err(NapError::Checkpoint(_))));
    assert!(matches!(parse(&model, &fixtures::liftoff_java(), y, DecodeMode::Greedy), Err(NapError::HashMismatch { .. })));
}

#[test]
fn trained_parser_beats_constant_baseline() {
    let (sim, train_ds) = countdown(2000, 10);
    let (_, test_ds) = countdown(500, 11);
    let cfg = ModelConfig { hidden: 32, embed: 16, encoder_layers: 1, epochs: 8, ..small(8) };
    let mut model = build_model(&sim, &train_ds, &cfg).unwrap();
    let report = train(&mut model, &sim, &train_ds, Exec::default()).unwrap();
    assert!(report.epoch_loss.last() < report.epoch_loss.first());
    let train_recs: Vec<&Record> = train_ds.records.iter().collect();
    let test_recs: Vec<&Record> = test_ds.records.iter().collect();
    let acc = step_accuracy(&model, &sim, &test_recs, Exec::default()).unwrap();
    let base = constant_baseline_accuracy(&sim, &train_recs, &test_recs);
    assert!(acc - base >= 0.30, "accuracy {acc} vs baseline {base}");
}
