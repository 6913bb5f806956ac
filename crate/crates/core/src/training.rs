//! Incomplete-modality simulation training with a prototype-anchored
//! auxiliary loss, Adam updates and early stopping on validation loss.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::dataset::Sample;
use crate::fusion_model::{predict, BatchItem, FusionModel, ModelError};
use crate::metric_space::DistanceMetric;
use crate::modality::ModalitySet;
use crate::numerics::{NumericsError, ParameterStore, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot draw {requested} distinct subsets from {available}")]
    TooManySubsets { requested: usize, available: usize },
    #[error("no prototype for class {class}, subset {subset}")]
    MissingPrototype { class: usize, subset: ModalitySet },
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged { epoch: usize, step: usize, source: NumericsError },
    #[error("empty {0} partition")]
    EmptyPartition(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Subsets drawn per minibatch (`A`).
    pub subsets_per_batch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Distance used by the auxiliary loss.
    pub metric: DistanceMetric,
    /// Train on the complete modality set only, with no subset sampling.
    pub full_subset_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            subsets_per_batch: 2,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 20,
            min_delta: 1e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            metric: DistanceMetric::SquaredEuclidean,
            full_subset_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, modalities: usize) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let available = (1usize << modalities) - 1;
        if self.subsets_per_batch == 0 {
            return bad("subsets_per_batch must be at least 1");
        }
        if self.subsets_per_batch > available {
            return Err(TrainError::TooManySubsets { requested: self.subsets_per_batch, available });
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.min_delta < 0.0 {
            return bad("epsilon must be positive and min_delta nonnegative");
        }
        Ok(())
    }
}

/// `A` distinct nonempty subsets of `[M]`, uniform without replacement.
pub fn sample_subsets(modalities: usize, count: usize, rng: &mut rng::Rng) -> Result<Vec<ModalitySet>, TrainError> {
    let available = (1usize << modalities) - 1;
    if count > available {
        return Err(TrainError::TooManySubsets { requested: count, available });
    }
    Ok(rand::seq::index::sample(rng, available, count)
        .into_iter()
        .map(|i| ModalitySet::from_bits(i as u32 + 1))
        .collect())
}

/// Streaming per-(class, subset) latent sums and counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningPrototypes {
    classes: usize,
    modalities: usize,
    dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl RunningPrototypes {
    pub fn new(classes: usize, modalities: usize, dim: usize) -> Self {
        let n = classes * ((1usize << modalities) - 1);
        Self { classes, modalities, dim, sums: vec![vec![0.0; dim]; n], counts: vec![0; n] }
    }

    fn slot(&self, class: usize, subset: ModalitySet) -> usize {
        (class - 1) * ((1usize << self.modalities) - 1) + subset.bits() as usize - 1
    }

    /// Adds one latent of the 1-based `class` encoded under `subset`.
    pub fn add(&mut self, class: usize, subset: ModalitySet, latent: &[f64]) {
        let i = self.slot(class, subset);
        for (s, v) in self.sums[i].iter_mut().zip(latent) {
            *s += v;
        }
        self.counts[i] += 1;
    }

    pub fn count(&self, class: usize, subset: ModalitySet) -> usize {
        self.counts[self.slot(class, subset)]
    }

    pub fn sum(&self, class: usize, subset: ModalitySet) -> &[f64] {
        &self.sums[self.slot(class, subset)]
    }

    pub fn mean(&self, class: usize, subset: ModalitySet) -> Option<Vec<f64>> {
        let i = self.slot(class, subset);
        let n = self.counts[i];
        (n > 0).then(|| self.sums[i].iter().map(|s| s / n as f64).collect())
    }

    /// Class prototype pooled over every subset: total sum over total count.
    pub fn pooled_mean(&self, class: usize) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.dim];
        let mut n = 0;
        for s in ModalitySet::nonempty_subsets(self.modalities) {
            let i = self.slot(class, s);
            n += self.counts[i];
            for (a, v) in sum.iter_mut().zip(&self.sums[i]) {
                *a += v;
            }
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    }

    /// Total count over classes for `subset`.
    pub fn subset_total(&self, subset: ModalitySet) -> usize {
        (1..=self.classes).map(|k| self.count(k, subset)).sum()
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Mean negative log-softmax probability of the 1-based `labels`.
pub fn class_loss_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y - 1]
        })
        .sum();
    total / labels.len() as f64
}

/// Mean over rows of `−log softmax(−d(ẑ_i, c_k)/t)[y_i]`.
pub fn aux_loss_from_latents(
    latents: &[Vec<f64>],
    labels: &[usize],
    prototypes: &[Vec<f64>],
    temperature: f64,
    metric: DistanceMetric,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (z, &y) in latents.iter().zip(labels) {
        let logits: Vec<f64> = prototypes
            .iter()
            .map(|c| metric.distance(z, c).map(|d| -d / temperature))
            .collect::<Result<_, _>>()
            .map_err(|_| NumericsError::ZeroNorm { op: "aux_loss" })?;
        total += class_loss_from_logits(&[logits], &[y]);
    }
    Ok(total / labels.len() as f64)
}

/// Items of one minibatch: each sample under each drawn subset restricted
/// to its observed modalities, grouped by drawn subset.
struct BatchPlan<'a> {
    items: Vec<BatchItem<'a>>,
    labels: Vec<usize>,
    groups: Vec<std::ops::Range<usize>>,
}

fn plan_batch<'a>(batch: &[&'a Sample], subsets: &[ModalitySet]) -> BatchPlan<'a> {
    let mut items = Vec::with_capacity(batch.len() * subsets.len());
    let mut labels = Vec::with_capacity(items.capacity());
    let mut groups = Vec::with_capacity(subsets.len());
    for &s in subsets {
        let start = items.len();
        for sample in batch {
            let subset = s.intersection(sample.observed);
            if !subset.is_empty() {
                items.push(BatchItem { payloads: &sample.payloads, subset });
                labels.push(sample.label);
            }
        }
        if items.len() > start {
            groups.push(start..items.len());
        }
    }
    BatchPlan { items, labels, groups }
}

/// Detached class means of `latent` rows in `range`; `None` if a class is absent.
fn within_batch_means(
    latent: &Tensor,
    labels: &[usize],
    range: std::ops::Range<usize>,
    classes: usize,
) -> Option<Tensor> {
    let d = latent.cols();
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for r in range {
        let k = labels[r] - 1;
        counts[k] += 1;
        for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(latent.row_slice(r)) {
            *s += v;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    for k in 0..classes {
        sums[k * d..(k + 1) * d].iter_mut().for_each(|s| *s /= counts[k] as f64);
    }
    Tensor::matrix(classes, d, sums).ok()
}

/// Prototypes the auxiliary loss is anchored to.
enum Anchors<'p> {
    /// Class means of each subset group within the current batch.
    WithinBatch,
    /// One fixed `[K × latent]` matrix.
    Fixed(&'p Arc<Tensor>),
}

struct BatchLoss {
    total: Var,
    class: f64,
    aux: f64,
}

fn record_loss(
    tape: &mut Tape,
    model: &FusionModel,
    plan: &BatchPlan<'_>,
    anchors: Anchors<'_>,
    metric: DistanceMetric,
) -> Result<(BatchLoss, Var), TrainError> {
    let g = model.build_graph(tape, &plan.items)?;
    let zero_based: Vec<usize> = plan.labels.iter().map(|y| y - 1).collect();
    let class = tape.nll(g.logits, &zero_based)?;
    let inv_t = -1.0 / model.config().temperature;
    let classes = model.num_classes();
    let mut parts = Vec::new();
    match anchors {
        Anchors::Fixed(protos) => {
            let d = tape.pairwise_distance(g.latent, Arc::clone(protos), metric)?;
            let l = tape.scale(d, inv_t)?;
            parts.push((tape.nll(l, &zero_based)?, plan.items.len()));
        }
        Anchors::WithinBatch => {
            for range in &plan.groups {
                let Some(means) = within_batch_means(tape.value(g.latent), &plan.labels, range.clone(), classes) else {
                    continue;
                };
                let rows = tape.slice_rows(g.latent, range.start, range.len())?;
                let d = tape.pairwise_distance(rows, Arc::new(means), metric)?;
                let l = tape.scale(d, inv_t)?;
                parts.push((tape.nll(l, &zero_based[range.clone()])?, range.len()));
            }
        }
    }
    let n_aux: usize = parts.iter().map(|p| p.1).sum();
    let mut total = class;
    let mut aux = 0.0;
    for (v, n) in parts {
        let w = n as f64 / n_aux as f64;
        aux += w * tape.value(v).item();
        let weighted = tape.scale(v, w)?;
        total = tape.add(total, weighted)?;
    }
    let class_value = tape.value(class).item();
    Ok((BatchLoss { total, class: class_value, aux }, g.latent))
}

/// Records `L_class + L_aux` for `batch` under `subsets` on `tape`.
/// `prototypes` (`[K × latent]`, treated as constants) anchor the auxiliary
/// term; without them each subset group is anchored to its own detached
/// class means.
pub fn record_overall_loss(
    tape: &mut Tape,
    model: &FusionModel,
    batch: &[Sample],
    subsets: &[ModalitySet],
    prototypes: Option<&Arc<Tensor>>,
    metric: DistanceMetric,
) -> Result<Var, TrainError> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let plan = plan_batch(&refs, subsets);
    let anchors = match prototypes {
        Some(p) => Anchors::Fixed(p),
        None => Anchors::WithinBatch,
    };
    Ok(record_loss(tape, model, &plan, anchors, metric)?.0.total)
}

/// Classification loss of `batch` under each of `subsets` (restricted to
/// observed modalities), averaged over all sample–subset pairs.
pub fn loss_class(model: &FusionModel, batch: &[Sample], subsets: &[ModalitySet]) -> Result<f64, TrainError> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let plan = plan_batch(&refs, subsets);
    let out = model.forward_many(&plan.items)?;
    let logits: Vec<Vec<f64>> = out.into_iter().map(|o| o.logits).collect();
    Ok(class_loss_from_logits(&logits, &plan.labels))
}

/// Auxiliary loss of `batch` against fixed class `prototypes` (row `k − 1`
/// is class `k`).
pub fn loss_aux(
    model: &FusionModel,
    batch: &[Sample],
    subsets: &[ModalitySet],
    prototypes: &[Vec<f64>],
    metric: DistanceMetric,
) -> Result<f64, TrainError> {
    if prototypes.len() != model.num_classes() {
        return Err(TrainError::MissingPrototype {
            class: prototypes.len() + 1,
            subset: subsets.first().copied().unwrap_or(ModalitySet::EMPTY),
        });
    }
    let refs: Vec<&Sample> = batch.iter().collect();
    let plan = plan_batch(&refs, subsets);
    let out = model.forward_many(&plan.items)?;
    let latents: Vec<Vec<f64>> = out.into_iter().map(|o| o.latent).collect();
    aux_loss_from_latents(&latents, &plan.labels, prototypes, model.config().temperature, metric)
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { lr, beta1, beta2, epsilon, step: 0, moments: BTreeMap::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p, g) in store.params_and_grads_mut() {
            let (m, v) =
                self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_class: f64,
    pub loss_aux: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FusionModel,
    /// Statistics gathered during the last completed epoch.
    pub prototypes: RunningPrototypes,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Full-observed-set validation loss and accuracy.
pub fn validate(model: &FusionModel, samples: &[Sample]) -> Result<(f64, f64), TrainError> {
    let items: Vec<BatchItem<'_>> =
        samples.iter().map(|s| BatchItem { payloads: &s.payloads, subset: s.observed }).collect();
    let out = model.forward_many(&items)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let correct = out.iter().zip(&labels).filter(|(o, &y)| predict(&o.logits) == y).count();
    let logits: Vec<Vec<f64>> = out.into_iter().map(|o| o.logits).collect();
    Ok((class_loss_from_logits(&logits, &labels), correct as f64 / samples.len() as f64))
}

fn diverged(epoch: usize, step: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Model(ModelError::Numerics(source @ NumericsError::NonFinite { .. })) => {
            TrainError::Diverged { epoch, step, source }
        }
        other => other,
    }
}

/// Trains `model` on `train`, early-stopping on `val` loss and keeping the
/// best parameters seen.
pub fn train(
    model: FusionModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let m = model.num_modalities();
    let k = model.num_classes();
    config.validate(m)?;
    if train.is_empty() {
        return Err(TrainError::EmptyPartition("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyPartition("validation"));
    }
    let mut model = model;
    let latent_dim = model.config().latent_dim;
    let mut running = RunningPrototypes::new(k, m, latent_dim);
    let mut anchors: Option<Arc<Tensor>> = None;
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut log = Vec::new();
    let (mut best_loss, _) = validate(&model, val)?;
    let mut best_params = model.params().clone();
    let mut best_epoch = 0;
    let mut waited = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let full = [ModalitySet::full(m)];

    for epoch in 1..=config.max_epochs {
        let mut shuffle = rng::indexed_stream(config.seed, "train/shuffle", epoch as u64);
        let mut subset_rng = rng::indexed_stream(config.seed, "train/subsets", epoch as u64);
        order.shuffle(&mut shuffle);
        running.reset();
        let (mut sum_class, mut sum_aux, mut steps) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let subsets = if config.full_subset_only {
                full.to_vec()
            } else {
                sample_subsets(m, config.subsets_per_batch, &mut subset_rng)?
            };
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let plan = plan_batch(&batch, &subsets);
            if plan.items.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let mode = match &anchors {
                Some(a) => Anchors::Fixed(a),
                None => Anchors::WithinBatch,
            };
            let (loss, latent) =
                record_loss(&mut tape, &model, &plan, mode, config.metric).map_err(diverged(epoch, step))?;
            let latents = tape.value(latent);
            for (r, it) in plan.items.iter().enumerate() {
                running.add(plan.labels[r], it.subset, latents.row_slice(r));
            }
            let grads = tape.backward(loss.total).map_err(|e| diverged(epoch, step)(e.into()))?;
            drop(tape);
            grads.write_into(model.params_mut());
            adam.step(model.params_mut());
            sum_class += loss.class;
            sum_aux += loss.aux;
            steps += 1;
        }
        let mut pooled = Vec::with_capacity(k * latent_dim);
        for class in 1..=k {
            let c = running
                .pooled_mean(class)
                .ok_or(TrainError::MissingPrototype { class, subset: ModalitySet::full(m) })?;
            pooled.extend(c);
        }
        anchors = Some(Arc::new(Tensor::matrix(k, latent_dim, pooled)?));

        let (val_loss, val_acc) = validate(&model, val)?;
        log.push(EpochLog {
            epoch,
            loss_class: sum_class / steps.max(1) as f64,
            loss_aux: sum_aux / steps.max(1) as f64,
            val_acc,
            lr: adam.learning_rate(),
        });
        if val_loss < best_loss - config.min_delta {
            best_loss = val_loss;
            best_params = model.params().clone();
            best_epoch = epoch;
            waited = 0;
        } else {
            waited += 1;
            if waited >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    if best_epoch != log.len() {
        *model.params_mut() = best_params;
    }
    Ok(TrainOutcome { model, prototypes: running, log, best_epoch, stopped_early })
}

/// One JSON object per epoch, one per line.
pub fn encode_log(log: &[EpochLog]) -> String {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("plain struct"));
        s.push('\n');
    }
    s
}

pub fn save_log(log: &[EpochLog], path: &Path) -> Result<(), TrainError> {
    codec::write_atomic(path, encode_log(log).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests;
