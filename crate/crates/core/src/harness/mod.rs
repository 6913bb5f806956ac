//! Experiment configuration and the commands behind the command-line tool.

mod mi;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::write_atomic;
use crate::dataset::{
    self, apply_fixed_missing, apply_missingness, drop_count, Dataset, DatasetError, DatasetSpec, Sample,
};
use crate::fusion_model::{decode_checkpoint, encode_checkpoint, FusionModel, ModelConfig, ModelError};
use crate::metric_space::{build_bank, decode_bank, encode_bank, MetricError, PrototypeBank};
use crate::modality::ModalitySet;
use crate::recovery::{
    CrossModalLinear, OracleRecovery, Recovery, RecoveryContext, RecoveryError, RecoveryRegistry, RecoverySpec,
};
use crate::rng;
use crate::selection::{SelectionContext, SelectionError, SelectionRegistry, SelectionStrategy, TraceExport};
use crate::training::{self, encode_log, EpochLog, TrainConfig, TrainError};

pub use mi::{
    conditional_of, cross_entropy as discrete_cross_entropy, entropy_y, mi_bound_check, mutual_information,
    random_conditional, random_joint, Conditional, Joint, MiBoundReport,
};
pub use report::{
    auc_rank_sum, cross_entropy, encode_csv, hoeffding_term, loss_range, softmax, summarize, EvalRow, LossRange,
    RowKey, SampleOutcome, CSV_HEADER,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BANK_FILE: &str = "bank.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RECOVERY_FILE: &str = "recovery.bin";
pub const DATASET_FILE: &str = "dataset.bin";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Spec(DatasetSpec),
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Missing rates; each masks `round(η·M)` random modalities per sample.
    pub etas: Vec<f64>,
    /// Masks these modalities in every test sample instead of the `etas` grid.
    pub missing: Option<Vec<usize>>,
    /// Oracle correct-recovery rates.
    pub rates: Vec<f64>,
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
    /// Confidence parameter of the loss concentration term.
    pub delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            etas: vec![0.5],
            missing: None,
            rates: vec![1.0],
            modes: ["observed-only", "baseline-all", "S", "I", "I+C"].map(String::from).to_vec(),
            seeds: vec![0],
            delta: 0.1,
        }
    }
}

fn default_recovery() -> RecoverySpec {
    RecoverySpec::oracle(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Defaults to the small architecture sized for the dataset.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_recovery")]
    pub recovery: RecoverySpec,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Drives model initialization and training order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub trace: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            model: None,
            train: TrainConfig::default(),
            recovery: default_recovery(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: None,
            trace: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Same experiment under another seed for training and evaluation.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.eval.seeds = vec![seed];
        c
    }

    fn modalities(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Spec(s) => Some(s.num_modalities()),
            DatasetSource::Path(_) => self.model.as_ref().map(ModelConfig::num_modalities),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match &self.dataset {
            DatasetSource::Spec(s) => s.validate()?,
            DatasetSource::Path(p) if !p.is_file() => {
                return bad(format!("dataset file {} does not exist", p.display()))
            }
            DatasetSource::Path(_) => {}
        }
        let e = &self.eval;
        if e.seeds.is_empty() || e.modes.is_empty() {
            return bad("evaluation grid is empty".into());
        }
        match &e.missing {
            Some(missing) if missing.is_empty() => return bad("fixed missing set is empty".into()),
            Some(_) => {}
            None if e.etas.is_empty() => return bad("no missing rates".into()),
            None => {}
        }
        for &eta in &e.etas {
            if !(0.0..=1.0).contains(&eta) {
                return bad(format!("missing rate η = {eta} outside [0, 1]"));
            }
            if let Some(m) = self.modalities() {
                drop_count(eta, m)?;
            }
        }
        if let (Some(missing), Some(m)) = (&e.missing, self.modalities()) {
            if missing.iter().any(|&i| i >= m) || missing.len() >= m {
                return bad(format!("fixed missing set {missing:?} invalid for {m} modalities"));
            }
        }
        if self.recovery.method == "oracle" {
            if e.rates.is_empty() {
                return bad("no oracle recovery rates".into());
            }
            if let Some(r) = e.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return bad(format!("recovery rate {r} outside [0, 1]"));
            }
        }
        if !RecoveryRegistry::default().names().any(|n| n == self.recovery.method) {
            return bad(format!("unknown recovery method `{}`", self.recovery.method));
        }
        let modes = SelectionRegistry::default();
        for m in &e.modes {
            modes.get(m)?;
        }
        if !(e.delta > 0.0 && e.delta < 1.0) {
            return bad(format!("δ = {} outside (0, 1)", e.delta));
        }
        if let Some(m) = self.modalities() {
            self.train.validate(m)?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, HarnessError> {
        let data = match &self.dataset {
            DatasetSource::Spec(s) => dataset::generate(s)?,
            DatasetSource::Path(p) => dataset::load(p)?,
        };
        let m = data.num_modalities();
        for &eta in &self.eval.etas {
            drop_count(eta, m)?;
        }
        self.train.validate(m)?;
        Ok(data)
    }

    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig, HarnessError> {
        let mut cfg = match &self.model {
            Some(c) => c.clone(),
            None => ModelConfig::small(data.dims(), data.num_classes()),
        };
        if cfg.input_dims != data.dims() || cfg.classes != data.num_classes() {
            return Err(HarnessError::Config(format!(
                "model expects dims {:?} and {} classes, dataset has {:?} and {}",
                cfg.input_dims,
                cfg.classes,
                data.dims(),
                data.num_classes()
            )));
        }
        cfg.init_seed = self.seed;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// A trained model, its prototype bank and the training log.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub model: FusionModel,
    pub bank: PrototypeBank,
    pub log: Vec<EpochLog>,
}

pub fn train_artifacts(config: &ExperimentConfig, data: &Dataset) -> Result<Artifacts, HarnessError> {
    let model = FusionModel::new(config.model_config(data)?)?;
    let train_cfg = config.train_config();
    let outcome = training::train(model, &data.train, &data.val, &train_cfg)?;
    let bank = build_bank(&outcome.model, &data.train, train_cfg.metric)?;
    Ok(Artifacts { model: outcome.model, bank, log: outcome.log })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>, HarnessError> {
    fs::read(path).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Trains and writes checkpoint, bank and log (and fitted linear recovery
/// maps when configured) to `out`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<Artifacts, HarnessError> {
    config.validate()?;
    let data = config.load_dataset()?;
    let artifacts = train_artifacts(config, &data)?;
    ensure_dir(out)?;
    write(&out.join(CHECKPOINT_FILE), &encode_checkpoint(&artifacts.model))?;
    write(&out.join(BANK_FILE), &encode_bank(&artifacts.bank))?;
    write(&out.join(LOG_FILE), encode_log(&artifacts.log).as_bytes())?;
    if config.recovery.method == "cross-modal-linear" {
        let maps = CrossModalLinear::fit(&data.train, data.dims())?;
        write(&out.join(RECOVERY_FILE), &maps.encode())?;
    }
    Ok(artifacts)
}

/// Reads a checkpoint and bank from `dir` and checks that they belong together.
pub fn load_artifacts(dir: &Path) -> Result<(FusionModel, PrototypeBank), HarnessError> {
    let model = decode_checkpoint(&read(&dir.join(CHECKPOINT_FILE))?)?;
    let bank = decode_bank(&read(&dir.join(BANK_FILE))?)?;
    bank.check_model(&model)?;
    Ok((model, bank))
}

/// Masked copies of the test set, one per missing-rate grid point.
pub fn masked_test_sets(
    config: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<(f64, Vec<Sample>)>, HarnessError> {
    let m = data.num_modalities();
    if let Some(missing) = &config.eval.missing {
        let set = ModalitySet::from_indices(missing.iter().copied());
        let mut test = data.test.clone();
        apply_fixed_missing(&mut test, set)?;
        return Ok(vec![(set.len() as f64 / m as f64, test)]);
    }
    config
        .eval
        .etas
        .iter()
        .map(|&eta| {
            let mut test = data.test.clone();
            apply_missingness(&mut test, eta, seed)?;
            Ok((eta, test))
        })
        .collect()
}

/// Recovery methods to evaluate, paired with their oracle rate.
/// Recovery methods paired with their oracle rate, if any.
type RecoveryGrid = Vec<(Option<f64>, Box<dyn Recovery>)>;

fn recovery_methods(
    config: &ExperimentConfig,
    data: &Dataset,
    fitted: Option<CrossModalLinear>,
) -> Result<RecoveryGrid, HarnessError> {
    if config.recovery.method == "oracle" {
        return config
            .eval
            .rates
            .iter()
            .map(|&r| Ok((Some(r), Box::new(OracleRecovery::new(r)?) as Box<dyn Recovery>)))
            .collect();
    }
    if let Some(maps) = fitted {
        return Ok(vec![(None, Box::new(maps))]);
    }
    let ctx = RecoveryContext { train: &data.train, dims: data.dims() };
    Ok(vec![(None, RecoveryRegistry::default().build(&config.recovery, &ctx)?)])
}

/// One row per strategy for a masked test set, plus traces when requested.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_point(
    ctx: SelectionContext<'_>,
    test: &[Sample],
    recovery: &dyn Recovery,
    strategies: &[Box<dyn SelectionStrategy>],
    eta: f64,
    r: Option<f64>,
    seed: u64,
    delta: f64,
    trace: bool,
) -> Result<Vec<(EvalRow, Vec<TraceExport>)>, HarnessError> {
    let per_sample: Vec<Vec<(SampleOutcome, Option<TraceExport>)>> = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<_, HarnessError> {
            let mut rng = rng::indexed_stream(seed, "eval/recovery", i as u64);
            let recovered = recovery.recover(s, &mut rng)?;
            let baseline = ctx.model.forward(&s.payloads, s.observed)?.prediction();
            strategies
                .iter()
                .map(|st| {
                    let sel = st.select(&ctx, s, &recovered)?;
                    let outcome = SampleOutcome {
                        label: s.label,
                        prediction: sel.prediction,
                        baseline_prediction: baseline,
                        logits: sel.logits,
                        iterations: sel.trace.iterations.len(),
                        offered: s.missing().len(),
                        fused_extra: sel.fused.len() - s.observed.len(),
                    };
                    let t = trace.then(|| TraceExport::new(i, st.name(), s.label, &sel.trace));
                    Ok((outcome, t))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let classes = ctx.model.num_classes();
    strategies
        .iter()
        .enumerate()
        .map(|(j, st)| {
            let outcomes: Vec<SampleOutcome> = per_sample.iter().map(|v| v[j].0.clone()).collect();
            let traces: Vec<TraceExport> = per_sample.iter().filter_map(|v| v[j].1.clone()).collect();
            let key =
                RowKey { mode: st.name().to_string(), metric: ctx.bank.metric().name().to_string(), eta, r, seed };
            Ok((summarize(key, &outcomes, classes, delta)?, traces))
        })
        .collect()
}

/// Rows and traces of a whole evaluation grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub traces: Vec<TraceExport>,
}

pub fn evaluate_grid(
    config: &ExperimentConfig,
    data: &Dataset,
    model: &FusionModel,
    bank: &PrototypeBank,
    fitted: Option<CrossModalLinear>,
    trace: bool,
) -> Result<EvalReport, HarnessError> {
    bank.check_model(model)?;
    let registry = SelectionRegistry::default();
    let strategies = config.eval.modes.iter().map(|m| registry.get(m)).collect::<Result<Vec<_>, _>>()?;
    let recoveries = recovery_methods(config, data, fitted)?;
    let ctx = SelectionContext { model, bank };
    let mut report = EvalReport::default();
    for &seed in &config.eval.seeds {
        for (eta, test) in masked_test_sets(config, data, seed)? {
            for (r, recovery) in &recoveries {
                for (row, traces) in
                    evaluate_point(ctx, &test, recovery.as_ref(), &strategies, eta, *r, seed, config.eval.delta, trace)?
                {
                    report.rows.push(row);
                    report.traces.extend(traces);
                }
            }
        }
    }
    Ok(report)
}

fn encode_traces(traces: &[TraceExport]) -> Result<String, HarnessError> {
    let mut s = String::new();
    for t in traces {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    Ok(s)
}

fn write_report(
    out: &Path,
    stem: &str,
    report: &EvalReport,
    extra: Option<serde_json::Value>,
    trace: bool,
) -> Result<(), HarnessError> {
    ensure_dir(out)?;
    write(&out.join(format!("{stem}.csv")), encode_csv(&report.rows).as_bytes())?;
    let mut json = serde_json::json!({ "rows": report.rows });
    if let Some(serde_json::Value::Object(map)) = extra {
        json.as_object_mut().expect("object").extend(map);
    }
    write(&out.join(format!("{stem}.json")), serde_json::to_string_pretty(&json)?.as_bytes())?;
    if trace {
        write(&out.join("traces.jsonl"), encode_traces(&report.traces)?.as_bytes())?;
    }
    Ok(())
}

/// Evaluates the artifacts in `out` over the configured grid and writes
/// `eval.csv`, `eval.json` and, with `trace`, `traces.jsonl`.
pub fn cmd_eval(config: &ExperimentConfig, out: &Path, trace: bool) -> Result<EvalReport, HarnessError> {
    config.validate()?;
    let data = config.load_dataset()?;
    let (model, bank) = load_artifacts(out)?;
    let maps_path = out.join(RECOVERY_FILE);
    let fitted = if config.recovery.method == "cross-modal-linear" && maps_path.is_file() {
        Some(CrossModalLinear::decode(&read(&maps_path)?)?)
    } else {
        None
    };
    let report = evaluate_grid(config, &data, &model, &bank, fitted, trace)?;
    write_report(out, "eval", &report, None, trace)?;
    Ok(report)
}

/// Accuracy of the complete test set for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub report: EvalReport,
    pub full: Vec<FullAccuracy>,
}

pub fn full_accuracy(model: &FusionModel, test: &[Sample]) -> Result<f64, HarnessError> {
    let correct = test
        .par_iter()
        .map(|s| Ok(model.forward(&s.payloads, ModalitySet::full(s.num_modalities()))?.prediction() == s.label))
        .collect::<Result<Vec<bool>, HarnessError>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / test.len() as f64)
}

/// Trains one model per seed and evaluates the oracle rate grid on each.
pub fn sweep_noisy_recovery(config: &ExperimentConfig, trace: bool) -> Result<SweepReport, HarnessError> {
    config.validate()?;
    if config.recovery.method != "oracle" {
        return Err(HarnessError::Config("the noisy-recovery sweep needs oracle recovery".into()));
    }
    let data = config.load_dataset()?;
    let mut sweep = SweepReport::default();
    for &seed in &config.eval.seeds {
        let seeded = config.with_seed(seed);
        let art = train_artifacts(&seeded, &data)?;
        sweep.full.push(FullAccuracy { seed, accuracy: full_accuracy(&art.model, &data.test)? });
        let r = evaluate_grid(&seeded, &data, &art.model, &art.bank, None, trace)?;
        sweep.report.rows.extend(r.rows);
        sweep.report.traces.extend(r.traces);
    }
    Ok(sweep)
}

/// Runs [`sweep_noisy_recovery`] and writes `sweep.csv`, `sweep.json` and
/// optionally `traces.jsonl` to `out`.
pub fn cmd_sweep_noisy_recovery(
    config: &ExperimentConfig,
    out: &Path,
    trace: bool,
) -> Result<SweepReport, HarnessError> {
    let sweep = sweep_noisy_recovery(config, trace)?;
    let extra = serde_json::json!({ "full_modality": sweep.full });
    write_report(out, "sweep", &sweep.report, Some(extra), trace)?;
    Ok(sweep)
}

/// Checks the information bound on random discrete instances and writes
/// `mi_bound.json`.
pub fn cmd_mi_bound_check(trials: usize, seed: u64, out: &Path) -> Result<MiBoundReport, HarnessError> {
    let report = mi_bound_check(trials, seed);
    ensure_dir(out)?;
    write(&out.join("mi_bound.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// Per-sample loss spread of the complete test set under the artifacts in
/// `out`; writes `loss_range.json`.
pub fn cmd_loss_range(config: &ExperimentConfig, out: &Path, delta: f64) -> Result<LossRange, HarnessError> {
    let data = config.load_dataset()?;
    let (model, _) = load_artifacts(out)?;
    let report = loss_range(&model, &data.test, delta)?;
    write(&out.join("loss_range.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// Generates the configured dataset and writes it to `out/dataset.bin`.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<PathBuf, HarnessError> {
    let DatasetSource::Spec(spec) = &config.dataset else {
        return Err(HarnessError::Config("gen-data needs a dataset spec, not a path".into()));
    };
    let data = dataset::generate(spec)?;
    ensure_dir(out)?;
    let path = out.join(DATASET_FILE);
    write(&path, &dataset::encode(&data))?;
    Ok(path)
}
