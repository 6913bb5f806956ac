use super::*;
use crate::dataset::{generate, DatasetSpec};
use crate::fusion_model::ModelConfig;
use crate::numerics::finite_difference_check;

fn toy(n_train: usize, seed: u64) -> crate::dataset::Dataset {
    generate(&DatasetSpec::with_relevances(&[1.0, 1.0, 1.0], 4, 4, [n_train, 200, 200], seed)).unwrap()
}

fn toy_model(seed: u64) -> FusionModel {
    let mut cfg = ModelConfig::small(&[4, 4, 4], 4);
    cfg.init_seed = seed;
    FusionModel::new(cfg).unwrap()
}

#[test]
fn three_modalities_have_seven_candidate_subsets() {
    let mut r = rng::stream(1, "t");
    let all = sample_subsets(3, 7, &mut r).unwrap();
    let mut bits: Vec<u32> = all.iter().map(|s| s.bits()).collect();
    bits.sort();
    assert_eq!(bits, (1..=7).collect::<Vec<_>>());
    assert!(matches!(sample_subsets(3, 8, &mut r), Err(TrainError::TooManySubsets { requested: 8, available: 7 })));
}

#[test]
fn subset_draws_are_uniform() {
    let mut r = rng::stream(2, "uniform");
    let mut counts = [0usize; 8];
    let n = 100_000;
    for _ in 0..n {
        counts[sample_subsets(3, 1, &mut r).unwrap()[0].bits() as usize] += 1;
    }
    assert_eq!(counts[0], 0);
    for &c in &counts[1..] {
        let f = c as f64 / n as f64;
        assert!((f * 7.0 - 1.0).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn drawn_subsets_are_distinct() {
    let mut r = rng::stream(3, "distinct");
    for _ in 0..200 {
        let s = sample_subsets(4, 5, &mut r).unwrap();
        let mut bits: Vec<u32> = s.iter().map(|x| x.bits()).collect();
        bits.sort();
        bits.dedup();
        assert_eq!(bits.len(), 5);
        assert!(s.iter().all(|x| !x.is_empty()));
    }
}

#[test]
fn class_loss_reference_values() {
    assert!((class_loss_from_logits(&[vec![0.0; 10]], &[4]) - 10f64.ln()).abs() < 1e-12);
    assert!(class_loss_from_logits(&[vec![0.0, 800.0]], &[2]).abs() < 1e-12);
    // B = 2 samples under A = 2 subsets, K = 2
    let logits = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5], vec![3.0, -1.0]];
    let labels = [1, 2, 1, 1];
    let softplus = |x: f64| (1.0 + x.exp()).ln();
    let hand = (softplus(-1.0) + softplus(-2.0) + 2f64.ln() + softplus(-4.0)) / 4.0;
    assert!((class_loss_from_logits(&logits, &labels) - hand).abs() < 1e-15);
}

#[test]
fn aux_loss_reference_values() {
    let sq = DistanceMetric::SquaredEuclidean;
    let protos = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
    let v = aux_loss_from_latents(&[vec![0.3, 2.0]], &[2], &protos, 0.1, sq).unwrap();
    assert!((v - 3f64.ln()).abs() < 1e-12);

    // K = 2, t = 0.1: d = (0.01, 0.09) → logits (−0.1, −0.9)
    let protos = vec![vec![0.1, 0.0], vec![0.0, 0.3]];
    let v = aux_loss_from_latents(&[vec![0.0, 0.0]], &[1], &protos, 0.1, sq).unwrap();
    assert!((v - (1.0 + (-0.8f64).exp()).ln()).abs() < 1e-12);

    // own prototype at 0, K − 1 others at distance D
    let k = 4.0;
    for d in [0.5f64, 2.0, 10.0] {
        let protos = vec![vec![0.0], vec![d.sqrt()], vec![-d.sqrt()], vec![d.sqrt()]];
        let v = aux_loss_from_latents(&[vec![0.0]], &[1], &protos, 0.1, sq).unwrap();
        let hand = -(1.0 / (1.0 + (k - 1.0) * (-d / 0.1f64).exp())).ln();
        assert!((v - hand).abs() < 1e-12);
    }
    let protos = vec![vec![0.0], vec![30.0], vec![-30.0], vec![30.0]];
    assert!(aux_loss_from_latents(&[vec![0.0]], &[1], &protos, 0.1, sq).unwrap() < 1e-12);
}

#[test]
fn aux_loss_tends_to_ln_k_at_high_temperature() {
    let data = toy(40, 4);
    let model = toy_model(4);
    let full = [ModalitySet::full(3)];
    let mut running = RunningPrototypes::new(4, 3, 8);
    for s in &data.train {
        running.add(s.label, full[0], &model.forward(&s.payloads, full[0]).unwrap().latent);
    }
    let protos: Vec<Vec<f64>> = (1..=4).map(|k| running.pooled_mean(k).unwrap()).collect();
    let mut cfg = model.config().clone();
    cfg.temperature = 1e6;
    let hot = FusionModel::from_parts(cfg, model.params().clone()).unwrap();
    let v = loss_aux(&hot, &data.train, &full, &protos, DistanceMetric::SquaredEuclidean).unwrap();
    assert!((v - 4f64.ln()).abs() < 1e-6, "{v}");
}

#[test]
fn tape_losses_match_standalone_evaluation() {
    let data = toy(24, 5);
    let model = toy_model(5);
    let subsets = [ModalitySet::from_bits(0b101), ModalitySet::from_bits(0b010)];
    let protos = vec![vec![0.2; 8], vec![-0.3; 8], vec![0.1; 8], vec![0.4; 8]];
    let flat: Vec<f64> = protos.concat();
    let anchors = Arc::new(Tensor::matrix(4, 8, flat).unwrap());
    for metric in DistanceMetric::ALL {
        let mut tape = Tape::new();
        let total = record_overall_loss(&mut tape, &model, &data.train, &subsets, Some(&anchors), metric).unwrap();
        let c = loss_class(&model, &data.train, &subsets).unwrap();
        let a = loss_aux(&model, &data.train, &subsets, &protos, metric).unwrap();
        assert!((tape.value(total).item() - (c + a)).abs() < 1e-10);
    }
}

#[test]
fn overall_loss_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::small(&[3, 2], 2);
    cfg.token_lens = vec![1, 2];
    cfg.width = 8;
    cfg.encoder_hidden = 5;
    cfg.mlp_hidden = 6;
    cfg.projection_hidden = 4;
    cfg.latent_dim = 3;
    cfg.temperature = 0.5;
    // no ReLU pre-activation lies within one step of its kink here
    cfg.init_seed = 1;
    let model = FusionModel::new(cfg.clone()).unwrap();
    let data = generate(&DatasetSpec {
        modalities: vec![
            crate::dataset::ModalitySpec { dim: 3, relevance: 1.0, noise: 1.0 },
            crate::dataset::ModalitySpec { dim: 2, relevance: 0.5, noise: 1.0 },
        ],
        classes: 2,
        n_train: 4,
        n_val: 1,
        n_test: 1,
        seed: 9,
        separation: 2.0,
    })
    .unwrap();
    let subsets = [ModalitySet::full(2), ModalitySet::single(1)];
    let anchors = Arc::new(Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, -0.4, 0.1, 0.2]).unwrap());
    for metric in DistanceMetric::ALL {
        let loss = |tape: &mut Tape, params: &ParameterStore| -> Result<Var, TrainError> {
            let m = FusionModel::from_parts(cfg.clone(), params.clone())?;
            record_overall_loss(tape, &m, &data.train, &subsets, Some(&anchors), metric)
        };
        let report = finite_difference_check(loss, model.params(), 1e-3, 1e-3).unwrap();
        assert!(
            report.passed,
            "{metric}: {:#?}",
            report.params.iter().filter(|p| p.rel_error > 1e-4).collect::<Vec<_>>()
        );
    }
}

#[test]
fn running_prototype_means_and_pooling() {
    let mut p = RunningPrototypes::new(2, 2, 2);
    let s1 = ModalitySet::single(0);
    let s3 = ModalitySet::full(2);
    assert_eq!(p.mean(1, s1), None);
    p.add(1, s1, &[1.0, 2.0]);
    p.add(1, s1, &[3.0, 4.0]);
    p.add(1, s3, &[5.0, 6.0]);
    assert_eq!(p.mean(1, s1), Some(vec![2.0, 3.0]));
    assert_eq!(p.pooled_mean(1), Some(vec![3.0, 4.0]));
    assert_eq!(p.pooled_mean(2), None);
    assert_eq!(p.subset_total(s1), 2);
    p.reset();
    assert_eq!(p.count(1, s1), 0);
}

#[test]
fn config_validation() {
    let c = TrainConfig { subsets_per_batch: 8, ..TrainConfig::default() };
    assert!(matches!(c.validate(3), Err(TrainError::TooManySubsets { .. })));
    let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(c.validate(3).is_err());
    assert!(TrainConfig::default().validate(3).is_ok());
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = toy(32, 6);
    let model = toy_model(6);
    let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
    let out = train(model.clone(), &data.train, &data.val, &cfg).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic_and_counts_pairs() {
    let data = toy(200, 7);
    let cfg = TrainConfig { max_epochs: 2, batch_size: 32, seed: 3, ..TrainConfig::default() };
    let a = train(toy_model(7), &data.train, &data.val, &cfg).unwrap();
    let b = train(toy_model(7), &data.train, &data.val, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_ne!(a.model, toy_model(7));

    // replay the last epoch's subset draws to count (sample, subset) pairs
    let mut r = rng::indexed_stream(cfg.seed, "train/subsets", 2);
    let mut expected = [0usize; 8];
    let mut start = 0;
    while start < data.train.len() {
        let b = cfg.batch_size.min(data.train.len() - start);
        for s in sample_subsets(3, cfg.subsets_per_batch, &mut r).unwrap() {
            expected[s.bits() as usize] += b;
        }
        start += b;
    }
    for s in ModalitySet::nonempty_subsets(3) {
        assert_eq!(a.prototypes.subset_total(s), expected[s.bits() as usize]);
    }
}

#[test]
fn overall_loss_decreases_over_first_epochs() {
    let data = toy(600, 8);
    let cfg = TrainConfig { max_epochs: 5, batch_size: 32, seed: 8, ..TrainConfig::default() };
    let out = train(toy_model(8), &data.train, &data.val, &cfg).unwrap();
    let totals: Vec<f64> = out.log.iter().map(|e| e.loss_class + e.loss_aux).collect();
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "{totals:?}");
    }
}

#[test]
fn log_lines_are_json_objects() {
    let log = vec![EpochLog { epoch: 1, loss_class: 0.5, loss_aux: 0.25, val_acc: 0.75, lr: 1e-3 }];
    let text = encode_log(&log);
    assert_eq!(text.lines().count(), 1);
    let back: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(back, log[0]);
}
