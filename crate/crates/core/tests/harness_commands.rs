use dynsel::dataset::{self, generate, Dataset, DatasetSpec};
use dynsel::harness::{
    cmd_eval, cmd_gen_data, cmd_loss_range, cmd_mi_bound_check, cmd_train, evaluate_grid, load_artifacts,
    train_artifacts, DatasetSource, ExperimentConfig, HarnessError, BANK_FILE, CHECKPOINT_FILE, CSV_HEADER, LOG_FILE,
    RECOVERY_FILE,
};
use dynsel::recovery::RecoverySpec;

fn small_spec() -> DatasetSpec {
    DatasetSpec::with_relevances(&[1.0, 0.6, 0.2], 4, 3, [300, 60, 120], 11)
}

#[test]
fn train_then_eval_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(DatasetSource::Spec(small_spec()));
    let data_path = cmd_gen_data(&c, dir.path()).unwrap();
    c.dataset = DatasetSource::Path(data_path);
    c.train.max_epochs = 3;
    c.eval.rates = vec![0.0, 1.0];

    let art = cmd_train(&c, dir.path()).unwrap();
    for f in [CHECKPOINT_FILE, BANK_FILE, LOG_FILE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(!dir.path().join(RECOVERY_FILE).exists());
    let (model, bank) = load_artifacts(dir.path()).unwrap();
    assert_eq!(model.config(), art.model.config());
    // stored gradients are not part of a checkpoint
    for n in art.model.params().names() {
        assert_eq!(model.params().get(n), art.model.params().get(n), "{n}");
    }
    assert_eq!(bank, art.bank);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), art.log.len());
    for l in log.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }

    let report = cmd_eval(&c, dir.path(), true).unwrap();
    assert_eq!(report.rows.len(), 2 * c.eval.modes.len());
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + report.rows.len());
    let traces = std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), report.traces.len());

    let range = cmd_loss_range(&c, dir.path(), 0.1).unwrap();
    assert!(range.ce_min <= range.ce_mean && range.ce_mean <= range.ce_max);
    assert!(dir.path().join("loss_range.json").is_file());
    assert!(cmd_mi_bound_check(20, 1, dir.path()).unwrap().passed);
}

#[test]
fn invalid_configs_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(DatasetSource::Spec(small_spec()));
    c.eval.etas = vec![-0.25];
    match cmd_train(&c, dir.path()) {
        Err(HarnessError::Config(msg)) => assert!(msg.contains("-0.25"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
    let mut c = ExperimentConfig::new(DatasetSource::Spec(small_spec()));
    c.recovery = RecoverySpec::named("telepathy");
    assert!(cmd_train(&c, dir.path()).is_err());
    assert!(load_artifacts(dir.path()).is_err());
}

/// Modality 1 replaced by an exact linear image of modality 0.
fn linearly_dependent(spec: &DatasetSpec) -> Dataset {
    let mut data = generate(spec).unwrap();
    let a = [[0.8, -0.3, 0.5, 0.1], [0.2, 1.1, -0.4, 0.6], [-0.7, 0.3, 0.9, -0.2], [0.4, 0.5, 0.2, 1.0]];
    for s in data.train.iter_mut().chain(&mut data.val).chain(&mut data.test) {
        let x = s.payloads[0].clone();
        s.payloads[1] = a.iter().map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum()).collect();
    }
    data
}

#[test]
fn cross_modal_linear_recovery_matches_the_oracle_downstream() {
    let spec = DatasetSpec::with_relevances(&[1.0, 0.6, 0.2], 4, 4, [1000, 200, 400], 12);
    let data = linearly_dependent(&spec);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("linear.bin");
    dataset::save(&data, &path).unwrap();

    let mut c = ExperimentConfig::new(DatasetSource::Path(path));
    c.train.max_epochs = 10;
    c.eval.missing = Some(vec![1]);
    c.eval.modes = vec!["I+C".into()];
    let art = train_artifacts(&c, &data).unwrap();
    let oracle = evaluate_grid(&c, &data, &art.model, &art.bank, None, false).unwrap();
    c.recovery = RecoverySpec::named("cross-modal-linear");
    let linear = evaluate_grid(&c, &data, &art.model, &art.bank, None, false).unwrap();
    let gap = 100.0 * (linear.rows[0].accuracy - oracle.rows[0].accuracy);
    assert!(gap.abs() <= 2.0, "linear {} vs oracle {}", linear.rows[0].accuracy, oracle.rows[0].accuracy);

    // maps written by train are reused by eval
    cmd_train(&c, dir.path()).unwrap();
    assert!(dir.path().join(RECOVERY_FILE).is_file());
    let from_files = cmd_eval(&c, dir.path(), false).unwrap();
    assert_eq!(from_files.rows, linear.rows);
}
