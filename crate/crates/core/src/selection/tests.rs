use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::dataset::{generate, DatasetSpec};
use crate::fusion_model::ModelConfig;
use crate::metric_space::{build_bank, log_posterior_from_distances, DistanceMetric};
use crate::rng;

struct Fixture {
    model: FusionModel,
    bank: PrototypeBank,
    test: Vec<Sample>,
}

fn fixture(seed: u64) -> Fixture {
    let data = generate(&DatasetSpec::with_relevances(&[1.0, 0.6, 0.2], 4, 2, [80, 10, 40], seed)).unwrap();
    let mut cfg = ModelConfig::small(&[4, 4, 4], 2);
    cfg.init_seed = seed;
    let model = FusionModel::new(cfg).unwrap();
    let bank = build_bank(&model, &data.train, DistanceMetric::SquaredEuclidean).unwrap();
    Fixture { model, bank, test: data.test }
}

fn masked(sample: &Sample, observed: ModalitySet) -> (Sample, Recovered) {
    let mut s = sample.clone();
    s.observed = observed;
    let entries = s.missing().iter().map(|m| (m, sample.payloads[m].clone())).collect();
    (s, Recovered { entries })
}

#[test]
fn hand_instance_raw_reward() {
    let before = log_posterior_from_distances(&[1.0, 3.0]);
    let after = log_posterior_from_distances(&[0.5, 3.0]);
    let e = f64::exp;
    let hand = (e(-0.5) / (e(-0.5) + e(-3.0))).ln() - (e(-1.0) / (e(-1.0) + e(-3.0))).ln();
    let r = raw_reward(before[0], after[0]);
    assert!((r - hand).abs() < 1e-15);
    assert!(r > 0.0);
    assert_eq!(raw_reward(before[0], before[0]), 0.0);

    let a = alpha(0.8, 0.2).unwrap();
    assert_eq!(a, 0.25);
    let r_star = calibrated_reward(before[0], after[0], a);
    let hand_star = -(e(-1.0) / (e(-1.0) + e(-3.0))).ln() + 0.25 * (e(-0.5) / (e(-0.5) + e(-3.0))).ln();
    assert!((r_star - hand_star).abs() < 1e-15);
    assert!(r_star >= r);
}

#[test]
fn calibrated_reward_arithmetic() {
    let c = 1.7;
    assert!((calibrated_reward(-c, -c, 0.5) - 0.5 * c).abs() < 1e-15);
    assert_eq!(raw_reward(-c, -c), 0.0);
    assert_eq!(calibrated_reward(-0.3, -0.1, 1.0), raw_reward(-0.3, -0.1));
}

#[test]
fn records_satisfy_reward_identities() {
    let f = fixture(1);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    for s in f.test.iter().take(20) {
        let observed = ModalitySet::single(0);
        let recs = ctx.score_candidates(&s.payloads, observed, ModalitySet::from_bits(0b110), true).unwrap();
        assert_eq!(recs.iter().map(|r| r.candidate).collect::<Vec<_>>(), vec![1, 2]);
        for r in &recs {
            let a = r.alpha.unwrap();
            assert!(a > 0.0 && a <= 1.0);
            assert_eq!(a == 1.0, r.ics_after.unwrap() > r.ics_before.unwrap() || r.ics_after == r.ics_before);
            let expect = -r.log_post_before + a * r.log_post_after;
            assert!((r.r_star - expect).abs() < 1e-15);
            assert!((r.r - (-r.log_post_before + r.log_post_after)).abs() < 1e-15);
            if r.ics_after.unwrap() > r.ics_before.unwrap() {
                assert_eq!(r.r_star, r.r);
            }
        }
        let single = ctx.reward_raw(&s.payloads, observed, 2).unwrap();
        assert_eq!(single.r, recs[1].r);
        assert_eq!(single.ics_before, None);
        let cal = ctx.reward_calibrated(&s.payloads, observed, 2).unwrap();
        assert_eq!(cal, recs[1]);
    }
}

#[test]
fn candidate_sets_are_validated() {
    let f = fixture(2);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let s = &f.test[0];
    let none = ctx.score_candidates(&s.payloads, ModalitySet::single(0), ModalitySet::EMPTY, false).unwrap();
    assert!(none.is_empty());
    assert!(matches!(
        ctx.reward_raw(&s.payloads, ModalitySet::single(0), 0),
        Err(SelectionError::CandidateObserved(0))
    ));
}

#[test]
fn fully_observed_sample_takes_zero_iterations() {
    let f = fixture(3);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let s = &f.test[0];
    let (s, rec) = masked(s, ModalitySet::full(3));
    for calibrated in [false, true] {
        let sel = ctx.select_iterative(&s, &rec, calibrated).unwrap();
        assert!(sel.trace.iterations.is_empty());
        assert_eq!(sel.fused, ModalitySet::full(3));
        let full = f.model.forward(&s.payloads, ModalitySet::full(3)).unwrap();
        assert_eq!(sel.prediction, full.prediction());
        assert_eq!(sel.logits, full.logits);
    }
}

#[test]
fn nonpositive_first_pass_keeps_observed_set() {
    let f = fixture(4);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let mut seen = 0;
    for s in &f.test {
        let (s, rec) = masked(s, ModalitySet::single(0));
        let sel = ctx.select_iterative(&s, &rec, false).unwrap();
        let first = &sel.trace.iterations[0];
        if first.records.iter().all(|r| r.r <= 0.0) {
            seen += 1;
            assert_eq!(sel.trace.iterations.len(), 1);
            assert_eq!(sel.fused, s.observed);
            assert_eq!(first.accepted, None);
            assert_eq!(first.pruned, vec![1, 2]);
            let sim = ctx.select_simultaneous(&s, &rec).unwrap();
            assert_eq!(sim.fused, s.observed);
            assert_eq!(sim.prediction, f.model.forward(&s.payloads, s.observed).unwrap().prediction());
        }
    }
    assert!(seen > 0);
}

#[test]
fn single_candidate_simultaneous_equals_iterative() {
    let f = fixture(5);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    for s in &f.test {
        let (s, rec) = masked(s, ModalitySet::from_bits(0b011));
        let a = ctx.select_simultaneous(&s, &rec).unwrap();
        let b = ctx.select_iterative(&s, &rec, false).unwrap();
        assert_eq!(a.fused, b.fused);
        assert_eq!(a.prediction, b.prediction);
    }
}

#[test]
fn iterative_traces_satisfy_structural_invariants() {
    let f = fixture(6);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    for (i, s) in f.test.iter().enumerate() {
        for observed in [ModalitySet::single(0), ModalitySet::single(2), ModalitySet::from_bits(0b101)] {
            let (s, rec) = masked(s, observed);
            for calibrated in [false, true] {
                let sel = ctx.select_iterative(&s, &rec, calibrated).unwrap();
                let export = TraceExport::new(i, "I", s.label, &sel.trace);
                assert!(trace_violations(&export, 3, calibrated).is_empty());
                for it in &sel.trace.iterations {
                    for r in &it.records {
                        let pruned = it.pruned.contains(&r.candidate);
                        assert_eq!(pruned, r.score(calibrated) <= 0.0);
                    }
                    if let Some(u) = it.accepted {
                        let best = it.records.iter().map(|r| r.score(calibrated)).fold(f64::MIN, f64::max);
                        let first_best = it.records.iter().find(|r| r.score(calibrated) == best).unwrap();
                        assert_eq!(first_best.candidate, u);
                    }
                }
            }
        }
    }
}

#[test]
fn violations_are_reported() {
    let trace = TraceExport {
        sample: 0,
        mode: "I".into(),
        label: 1,
        initial: vec![0],
        iterations: vec![IterationExport {
            candidates: vec![CandidateExport {
                candidate: 1,
                r: -0.5,
                r_star: -0.5,
                ics_before: None,
                ics_after: None,
                alpha: None,
                pred_before: 1,
                pred_after: 1,
            }],
            accepted: Some(1),
            pruned: vec![],
        }],
        fused: vec![1],
        prediction: 1,
    };
    let v = trace_violations(&trace, 2, false);
    assert_eq!(v.len(), 3, "{v:?}");
}

#[test]
fn simultaneous_and_iterative_can_disagree() {
    let f = fixture(7);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let mut r = rng::stream(7, "adversarial");
    let base = &f.test[0];
    let mut found = None;
    'search: for scale in [0.5, 1.0, 2.0, 4.0, 8.0] {
        for _ in 0..400 {
            let mut s = base.clone();
            for m in [1, 2] {
                for v in &mut s.payloads[m] {
                    let n: f64 = StandardNormal.sample(&mut r);
                    *v = scale * n;
                }
            }
            let (s, rec) = masked(&s, ModalitySet::single(0));
            let sim = ctx.select_simultaneous(&s, &rec).unwrap();
            let it = ctx.select_iterative(&s, &rec, false).unwrap();
            if sim.fused == ModalitySet::full(3) && it.fused != sim.fused {
                found = Some((sim, it));
                break 'search;
            }
        }
    }
    let (sim, it) = found.expect("no adversarial instance found");
    assert!(sim.trace.iterations[0].records.iter().all(|r| r.r > 0.0));
    assert_eq!(it.fused.len(), 2);
    assert_eq!(it.trace.iterations.len(), 2);
    assert!(it.trace.iterations[1].records[0].r <= 0.0);
    assert_ne!(sim.trace, it.trace);
}

#[test]
fn equivalence_residual_and_injected_fault() {
    let f = fixture(8);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let mut worst: f64 = 0.0;
    let mut worst_flipped: f64 = 0.0;
    for s in &f.test {
        for u in 1..3 {
            worst = worst.max(ctx.reward_loss_equivalence_check(s, u, raw_reward).unwrap());
            let flipped = |b: f64, a: f64| -raw_reward(b, a);
            worst_flipped = worst_flipped.max(ctx.reward_loss_equivalence_check(s, u, flipped).unwrap());
        }
    }
    assert!(worst <= 1e-9, "{worst}");
    assert!(worst_flipped > 1e-6, "{worst_flipped}");
}

#[test]
fn scaling_logits_keeps_prediction() {
    let f = fixture(9);
    for s in &f.test {
        let out = f.model.forward(&s.payloads, ModalitySet::full(3)).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = out.logits.iter().map(|l| l * c).collect();
            assert_eq!(predict(&scaled), out.prediction());
        }
    }
}

#[test]
fn mismatched_recovery_is_rejected() {
    let f = fixture(10);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let (s, mut rec) = masked(&f.test[0], ModalitySet::single(0));
    rec.entries.pop();
    assert!(matches!(ctx.select_iterative(&s, &rec, true), Err(SelectionError::RecoveredMismatch { .. })));
    let (mut s, rec) = masked(&f.test[0], ModalitySet::single(0));
    s.observed = ModalitySet::EMPTY;
    assert!(matches!(ctx.select_simultaneous(&s, &rec), Err(SelectionError::NothingObserved)));
}

#[test]
fn registry_dispatches_every_mode() {
    let f = fixture(11);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let reg = SelectionRegistry::default();
    let mut names: Vec<&str> = reg.names().collect();
    names.sort();
    assert_eq!(names, vec!["I", "I+C", "S", "baseline-all", "observed-only"]);
    let (s, rec) = masked(&f.test[0], ModalitySet::single(1));
    for name in names {
        let strat = reg.get(name).unwrap();
        assert_eq!(strat.name(), name);
        let sel = strat.select(&ctx, &s, &rec).unwrap();
        match name {
            "observed-only" => assert_eq!(sel.fused, s.observed),
            "baseline-all" => assert_eq!(sel.fused, ModalitySet::full(3)),
            _ => assert!(s.observed.is_subset_of(sel.fused)),
        }
    }
    assert!(matches!(reg.get("beam"), Err(SelectionError::UnknownMode(_))));
}

#[test]
fn trace_export_rounds_to_twelve_digits() {
    assert_eq!(round_sig12(0.123456789012345), 0.123456789012);
    assert_eq!(round_sig12(-98765.43210987654), -98765.4321099);
    assert_eq!(round_sig12(0.0), 0.0);
    let f = fixture(12);
    let ctx = SelectionContext { model: &f.model, bank: &f.bank };
    let (s, rec) = masked(&f.test[0], ModalitySet::single(0));
    let sel = ctx.select_iterative(&s, &rec, true).unwrap();
    let export = TraceExport::new(0, "I+C", s.label, &sel.trace);
    let json = serde_json::to_string(&export).unwrap();
    let back: TraceExport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, export);
    assert_eq!(back.initial, vec![0]);
}
