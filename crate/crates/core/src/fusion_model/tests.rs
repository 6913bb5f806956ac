use super::*;
use crate::numerics::finite_difference_check;

fn micro_config() -> ModelConfig {
    ModelConfig {
        input_dims: vec![3, 2],
        token_lens: vec![1, 2],
        encoder_hidden: 4,
        width: 8,
        layers: 1,
        heads: 2,
        mlp_hidden: 6,
        projection_hidden: 5,
        latent_dim: 3,
        classes: 2,
        temperature: 0.5,
        init_seed: 17,
    }
}

fn payloads() -> Vec<Vec<f64>> {
    vec![vec![0.3, -1.1, 0.7], vec![1.4, -0.2]]
}

#[test]
fn sequence_length_counts_cls_and_slots() {
    let mut cfg = ModelConfig::small(&[4, 4, 4], 3);
    cfg.token_lens = vec![2, 2, 2];
    let model = FusionModel::new(cfg).unwrap();
    let p = vec![vec![0.1; 4]; 3];
    let enc = model.encode(&p, ModalitySet::full(3)).unwrap();
    assert_eq!(enc.tokens.rows(), 7);
    assert_eq!(enc.mask, vec![true; 7]);
}

#[test]
fn missing_slots_hold_zero_dummies_and_are_masked() {
    let model = FusionModel::new(micro_config()).unwrap();
    let enc = model.encode(&payloads(), ModalitySet::single(0)).unwrap();
    assert_eq!(enc.mask, vec![true, true, false, false]);
    for r in 2..4 {
        assert!(enc.tokens.row_slice(r).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn empty_subset_is_rejected() {
    let model = FusionModel::new(micro_config()).unwrap();
    assert!(matches!(model.encode(&payloads(), ModalitySet::EMPTY), Err(ModelError::EmptySubset)));
    assert!(matches!(model.forward(&payloads(), ModalitySet::EMPTY), Err(ModelError::EmptySubset)));
}

#[test]
fn wrong_payload_length_is_rejected() {
    let model = FusionModel::new(micro_config()).unwrap();
    let bad = vec![vec![0.0; 2], vec![0.0; 2]];
    assert!(matches!(model.forward(&bad, ModalitySet::full(2)), Err(ModelError::PayloadLength { modality: 0, .. })));
}

#[test]
fn untrained_outputs_are_finite_and_normalizable() {
    let model = FusionModel::new(micro_config()).unwrap();
    let out = model.forward(&payloads(), ModalitySet::full(2)).unwrap();
    assert!(out.logits.iter().all(|v| v.is_finite()));
    let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = out.logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let total: f64 = exps.iter().map(|e| e / sum).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(out.z.len(), 8);
    assert_eq!(out.latent.len(), 3);
}

#[test]
fn forward_is_deterministic() {
    let model = FusionModel::new(micro_config()).unwrap();
    let a = model.forward(&payloads(), ModalitySet::full(2)).unwrap();
    let b = model.forward(&payloads(), ModalitySet::full(2)).unwrap();
    assert_eq!(a, b);
    let again = FusionModel::new(micro_config()).unwrap();
    assert_eq!(again.forward(&payloads(), ModalitySet::full(2)).unwrap(), a);
}

#[test]
fn batch_rows_match_single_forwards() {
    let model = FusionModel::new(micro_config()).unwrap();
    let p1 = payloads();
    let p2 = vec![vec![-0.5, 0.25, 2.0], vec![0.0, 0.9]];
    let items = [
        BatchItem { payloads: &p1, subset: ModalitySet::full(2) },
        BatchItem { payloads: &p2, subset: ModalitySet::single(1) },
        BatchItem { payloads: &p1, subset: ModalitySet::single(0) },
    ];
    let batch = model.forward_many(&items).unwrap();
    for (it, out) in items.iter().zip(&batch) {
        assert_eq!(&model.forward(it.payloads, it.subset).unwrap(), out);
    }
}

#[test]
fn perturbing_masked_payloads_changes_nothing() {
    let model = FusionModel::new(micro_config()).unwrap();
    let base = payloads();
    let mut perturbed = base.clone();
    perturbed[1] = vec![1e6, -3.0e4];
    let s = ModalitySet::single(0);
    let a = model.forward(&base, s).unwrap();
    let b = model.forward(&perturbed, s).unwrap();
    for (x, y) in a.z.iter().chain(&a.logits).chain(&a.latent).zip(b.z.iter().chain(&b.logits).chain(&b.latent)) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn predict_breaks_ties_low() {
    assert_eq!(predict(&[0.1, 2.0]), 2);
    assert_eq!(predict(&[1.0, 1.0]), 1);
    assert_eq!(predict(&[-3.0, 5.0, 5.0]), 2);
}

#[test]
fn config_validation() {
    let mut cfg = micro_config();
    cfg.heads = 3;
    assert!(FusionModel::new(cfg).is_err());
    let mut cfg = micro_config();
    cfg.latent_dim = 1;
    assert!(FusionModel::new(cfg).is_err());
    let mut cfg = micro_config();
    cfg.temperature = 0.0;
    assert!(FusionModel::new(cfg).is_err());
}

#[test]
fn classifier_loss_gradients_match_finite_differences() {
    let model = FusionModel::new(micro_config()).unwrap();
    let p1 = payloads();
    let p2 = vec![vec![-0.5, 0.25, 2.0], vec![0.0, 0.9]];
    let loss = |tape: &mut Tape, params: &ParameterStore| -> Result<Var, ModelError> {
        let m = FusionModel { config: model.config.clone(), params: params.clone() };
        let items = [
            BatchItem { payloads: &p1, subset: ModalitySet::full(2) },
            BatchItem { payloads: &p2, subset: ModalitySet::single(1) },
        ];
        let g = m.build_graph(tape, &items)?;
        Ok(tape.nll(g.logits, &[0, 1])?)
    };
    let report = finite_difference_check(loss, model.params(), 1e-3, 1e-3).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn checkpoint_round_trip() {
    let model = FusionModel::new(micro_config()).unwrap();
    let bytes = encode_checkpoint(&model);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(encode_checkpoint(&back), bytes);
    let mut corrupt = bytes.clone();
    let n = corrupt.len();
    corrupt[n - 9] ^= 1;
    assert!(matches!(decode_checkpoint(&corrupt), Err(ModelError::ChecksumMismatch { .. })));
}
