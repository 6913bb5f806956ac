//! Reward-driven selection of recovered modalities at inference time.
//!
//! A candidate `u` is scored by how much fusing it raises the prototype
//! posterior of the predicted class:
//! `r = −log p(ŷ | ẑ) + log p(ŷᵘ | ẑᵘ)`, or, calibrated by the ICS ratio `α`,
//! `r* = −log p(ŷ | ẑ) + α · log p(ŷᵘ | ẑᵘ)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::fusion_model::{predict, BatchItem, FusionModel, FusionOutput, ModelError};
use crate::metric_space::{alpha, MetricError, PrototypeBank};
use crate::modality::ModalitySet;
use crate::recovery::Recovered;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("sample has no observed modality")]
    NothingObserved,
    #[error("recovered modalities {recovered} differ from missing modalities {missing}")]
    RecoveredMismatch { recovered: ModalitySet, missing: ModalitySet },
    #[error("candidate {0} is already observed")]
    CandidateObserved(usize),
    #[error("unknown selection mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Scores of one candidate against the current fused set.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRecord {
    pub candidate: usize,
    /// Uncalibrated reward.
    pub r: f64,
    /// Calibrated reward; equals `r` when no calibration was computed.
    pub r_star: f64,
    pub ics_before: Option<f64>,
    pub ics_after: Option<f64>,
    pub alpha: Option<f64>,
    pub pred_before: usize,
    pub pred_after: usize,
    /// `log p(ŷ | ẑ)` under the prototype posterior.
    pub log_post_before: f64,
    /// `log p(ŷᵘ | ẑᵘ)`.
    pub log_post_after: f64,
}

impl RewardRecord {
    pub fn score(&self, calibrated: bool) -> f64 {
        if calibrated {
            self.r_star
        } else {
            self.r
        }
    }
}

/// `−log_post_before + log_post_after`.
pub fn raw_reward(log_post_before: f64, log_post_after: f64) -> f64 {
    -log_post_before + log_post_after
}

/// `−log_post_before + α · log_post_after`.
pub fn calibrated_reward(log_post_before: f64, log_post_after: f64, alpha: f64) -> f64 {
    -log_post_before + alpha * log_post_after
}

#[derive(Clone, Debug, PartialEq)]
pub struct Iteration {
    pub records: Vec<RewardRecord>,
    pub accepted: Option<usize>,
    pub pruned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionTrace {
    pub initial: ModalitySet,
    pub iterations: Vec<Iteration>,
    pub fused: ModalitySet,
    pub prediction: usize,
}

/// Result of selecting for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub fused: ModalitySet,
    pub prediction: usize,
    /// Classifier logits of the final fused set.
    pub logits: Vec<f64>,
    pub trace: SelectionTrace,
}

/// A trained model and the prototype bank built from it.
#[derive(Clone, Copy, Debug)]
pub struct SelectionContext<'a> {
    pub model: &'a FusionModel,
    pub bank: &'a PrototypeBank,
}

struct Base {
    pred: usize,
    log_post: f64,
    ics: Option<f64>,
}

impl<'a> SelectionContext<'a> {
    fn base(&self, set: ModalitySet, out: FusionOutput, calibrated: bool) -> Result<Base, SelectionError> {
        let pred = predict(&out.logits);
        let log_post = self.bank.log_posterior(&out.latent)?[pred - 1];
        let ics = if calibrated { Some(self.bank.ics(pred, &out.latent, set)?) } else { None };
        Ok(Base { pred, log_post, ics })
    }

    /// Scores every candidate against `observed`, in candidate order.
    pub fn score_candidates(
        &self,
        payloads: &[Vec<f64>],
        observed: ModalitySet,
        candidates: ModalitySet,
        calibrated: bool,
    ) -> Result<Vec<RewardRecord>, SelectionError> {
        if let Some(u) = candidates.intersection(observed).iter().next() {
            return Err(SelectionError::CandidateObserved(u));
        }
        let mut items = vec![BatchItem { payloads, subset: observed }];
        items.extend(candidates.iter().map(|u| BatchItem { payloads, subset: observed.with(u) }));
        let mut outs = self.model.forward_many(&items)?.into_iter();
        let base = self.base(observed, outs.next().expect("base item"), calibrated)?;
        candidates
            .iter()
            .zip(outs)
            .map(|(u, out)| {
                let after = self.base(observed.with(u), out, calibrated)?;
                let r = raw_reward(base.log_post, after.log_post);
                let (a, r_star) = match (base.ics, after.ics) {
                    (Some(b), Some(c)) => {
                        let a = alpha(b, c)?;
                        (Some(a), calibrated_reward(base.log_post, after.log_post, a))
                    }
                    _ => (None, r),
                };
                Ok(RewardRecord {
                    candidate: u,
                    r,
                    r_star,
                    ics_before: base.ics,
                    ics_after: after.ics,
                    alpha: a,
                    pred_before: base.pred,
                    pred_after: after.pred,
                    log_post_before: base.log_post,
                    log_post_after: after.log_post,
                })
            })
            .collect()
    }

    /// Uncalibrated reward of fusing `u` into `observed`.
    pub fn reward_raw(
        &self,
        payloads: &[Vec<f64>],
        observed: ModalitySet,
        u: usize,
    ) -> Result<RewardRecord, SelectionError> {
        Ok(self.score_candidates(payloads, observed, ModalitySet::single(u), false)?.remove(0))
    }

    /// Reward of fusing `u` into `observed` with ICS calibration.
    pub fn reward_calibrated(
        &self,
        payloads: &[Vec<f64>],
        observed: ModalitySet,
        u: usize,
    ) -> Result<RewardRecord, SelectionError> {
        Ok(self.score_candidates(payloads, observed, ModalitySet::single(u), true)?.remove(0))
    }

    fn finish(
        &self,
        payloads: &[Vec<f64>],
        fused: ModalitySet,
        initial: ModalitySet,
        iterations: Vec<Iteration>,
    ) -> Result<Selection, SelectionError> {
        let out = self.model.forward(payloads, fused)?;
        let prediction = predict(&out.logits);
        Ok(Selection {
            fused,
            prediction,
            logits: out.logits,
            trace: SelectionTrace { initial, iterations, fused, prediction },
        })
    }

    /// Accepts the best positive candidate, prunes every non-positive one and
    /// repeats until no candidate is left. Ties go to the lowest index.
    pub fn select_iterative(
        &self,
        sample: &Sample,
        recovered: &Recovered,
        calibrated: bool,
    ) -> Result<Selection, SelectionError> {
        let payloads = prepare(sample, recovered)?;
        let mut fused = sample.observed;
        let mut candidates = recovered.modalities();
        let mut iterations = Vec::new();
        while !candidates.is_empty() {
            let records = self.score_candidates(&payloads, fused, candidates, calibrated)?;
            let mut best: Option<&RewardRecord> = None;
            for rec in &records {
                if best.is_none_or(|b| rec.score(calibrated) > b.score(calibrated)) {
                    best = Some(rec);
                }
            }
            let accepted = best.filter(|b| b.score(calibrated) > 0.0).map(|b| b.candidate);
            let pruned: Vec<usize> =
                records.iter().filter(|r| r.score(calibrated) <= 0.0).map(|r| r.candidate).collect();
            if let Some(u) = accepted {
                fused = fused.with(u);
                candidates = candidates.without(u);
            }
            for &u in &pruned {
                candidates = candidates.without(u);
            }
            iterations.push(Iteration { records, accepted, pruned });
        }
        self.finish(&payloads, fused, sample.observed, iterations)
    }

    /// Scores every candidate once against the observed set and fuses all
    /// with positive uncalibrated reward in one step.
    pub fn select_simultaneous(&self, sample: &Sample, recovered: &Recovered) -> Result<Selection, SelectionError> {
        let payloads = prepare(sample, recovered)?;
        let candidates = recovered.modalities();
        let mut iterations = Vec::new();
        let mut fused = sample.observed;
        if !candidates.is_empty() {
            let records = self.score_candidates(&payloads, sample.observed, candidates, false)?;
            let pruned = records.iter().filter(|r| r.r <= 0.0).map(|r| r.candidate).collect();
            for r in records.iter().filter(|r| r.r > 0.0) {
                fused = fused.with(r.candidate);
            }
            iterations.push(Iteration { records, accepted: None, pruned });
        }
        self.finish(&payloads, fused, sample.observed, iterations)
    }

    /// Prediction from a fixed modality set of the merged payloads.
    pub fn select_fixed(
        &self,
        sample: &Sample,
        recovered: &Recovered,
        fused: ModalitySet,
    ) -> Result<Selection, SelectionError> {
        let payloads = prepare(sample, recovered)?;
        self.finish(&payloads, fused, sample.observed, Vec::new())
    }

    /// `|(CE(p(·|ẑ), y) − CE(p(·|ẑᵘ), y)) − reward(y)|`, where `reward` is
    /// evaluated with the true label in place of both predictions.
    pub fn reward_loss_equivalence_check<F>(&self, sample: &Sample, u: usize, reward: F) -> Result<f64, SelectionError>
    where
        F: Fn(f64, f64) -> f64,
    {
        let observed = sample.observed.without(u);
        if observed.is_empty() {
            return Err(SelectionError::NothingObserved);
        }
        let before = self.model.forward(&sample.payloads, observed)?;
        let after = self.model.forward(&sample.payloads, observed.with(u))?;
        let y = sample.label;
        let p_before = self.bank.posterior(&before.latent)?;
        let p_after = self.bank.posterior(&after.latent)?;
        let loss_difference = -p_before.prob(y).ln() + p_after.prob(y).ln();
        let lp_before = self.bank.log_posterior(&before.latent)?[y - 1];
        let lp_after = self.bank.log_posterior(&after.latent)?[y - 1];
        Ok((loss_difference - reward(lp_before, lp_after)).abs())
    }
}

fn prepare(sample: &Sample, recovered: &Recovered) -> Result<Vec<Vec<f64>>, SelectionError> {
    if sample.observed.is_empty() {
        return Err(SelectionError::NothingObserved);
    }
    if recovered.modalities() != sample.missing() {
        return Err(SelectionError::RecoveredMismatch { recovered: recovered.modalities(), missing: sample.missing() });
    }
    Ok(recovered.merged_with(sample))
}

/// A way of choosing which recovered modalities to fuse.
pub trait SelectionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the strategy consumes recovered payloads at all.
    fn uses_recovery(&self) -> bool {
        true
    }

    fn select(
        &self,
        ctx: &SelectionContext<'_>,
        sample: &Sample,
        recovered: &Recovered,
    ) -> Result<Selection, SelectionError>;
}

/// Predicts from the observed modalities only.
pub struct ObservedOnly;

impl SelectionStrategy for ObservedOnly {
    fn name(&self) -> &'static str {
        "observed-only"
    }

    fn uses_recovery(&self) -> bool {
        false
    }

    fn select(
        &self,
        ctx: &SelectionContext<'_>,
        sample: &Sample,
        recovered: &Recovered,
    ) -> Result<Selection, SelectionError> {
        ctx.select_fixed(sample, recovered, sample.observed)
    }
}

/// Fuses every recovered modality without scoring.
pub struct BaselineAll;

impl SelectionStrategy for BaselineAll {
    fn name(&self) -> &'static str {
        "baseline-all"
    }

    fn select(
        &self,
        ctx: &SelectionContext<'_>,
        sample: &Sample,
        recovered: &Recovered,
    ) -> Result<Selection, SelectionError> {
        ctx.select_fixed(sample, recovered, sample.observed.union(recovered.modalities()))
    }
}

/// One-shot fusion of all positively scored candidates.
pub struct Simultaneous;

impl SelectionStrategy for Simultaneous {
    fn name(&self) -> &'static str {
        "S"
    }

    fn select(
        &self,
        ctx: &SelectionContext<'_>,
        sample: &Sample,
        recovered: &Recovered,
    ) -> Result<Selection, SelectionError> {
        ctx.select_simultaneous(sample, recovered)
    }
}

/// Iterative selection, optionally with ICS calibration.
pub struct Iterative {
    pub calibrated: bool,
}

impl SelectionStrategy for Iterative {
    fn name(&self) -> &'static str {
        if self.calibrated {
            "I+C"
        } else {
            "I"
        }
    }

    fn select(
        &self,
        ctx: &SelectionContext<'_>,
        sample: &Sample,
        recovered: &Recovered,
    ) -> Result<Selection, SelectionError> {
        ctx.select_iterative(sample, recovered, self.calibrated)
    }
}

type StrategyFactory = fn() -> Box<dyn SelectionStrategy>;

/// Selection strategies keyed by mode name.
#[derive(Clone)]
pub struct SelectionRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl Default for SelectionRegistry {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("observed-only", || Box::new(ObservedOnly));
        r.register("baseline-all", || Box::new(BaselineAll));
        r.register("S", || Box::new(Simultaneous));
        r.register("I", || Box::new(Iterative { calibrated: false }));
        r.register("I+C", || Box::new(Iterative { calibrated: true }));
        r
    }
}

impl SelectionRegistry {
    pub fn register(&mut self, name: &str, factory: StrategyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<Box<dyn SelectionStrategy>, SelectionError> {
        self.factories.get(name).map(|f| f()).ok_or_else(|| SelectionError::UnknownMode(name.to_string()))
    }
}

/// Rounds to 12 significant digits.
pub fn round_sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateExport {
    pub candidate: usize,
    pub r: f64,
    pub r_star: f64,
    pub ics_before: Option<f64>,
    pub ics_after: Option<f64>,
    pub alpha: Option<f64>,
    pub pred_before: usize,
    pub pred_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationExport {
    pub candidates: Vec<CandidateExport>,
    pub accepted: Option<usize>,
    pub pruned: Vec<usize>,
}

/// JSON form of one sample's trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceExport {
    pub sample: usize,
    pub mode: String,
    pub label: usize,
    pub initial: Vec<usize>,
    pub iterations: Vec<IterationExport>,
    pub fused: Vec<usize>,
    pub prediction: usize,
}

impl TraceExport {
    pub fn new(sample: usize, mode: &str, label: usize, trace: &SelectionTrace) -> Self {
        let r12 = |v: Option<f64>| v.map(round_sig12);
        Self {
            sample,
            mode: mode.to_string(),
            label,
            initial: trace.initial.iter().collect(),
            iterations: trace
                .iterations
                .iter()
                .map(|it| IterationExport {
                    candidates: it
                        .records
                        .iter()
                        .map(|r| CandidateExport {
                            candidate: r.candidate,
                            r: round_sig12(r.r),
                            r_star: round_sig12(r.r_star),
                            ics_before: r12(r.ics_before),
                            ics_after: r12(r.ics_after),
                            alpha: r12(r.alpha),
                            pred_before: r.pred_before,
                            pred_after: r.pred_after,
                        })
                        .collect(),
                    accepted: it.accepted,
                    pruned: it.pruned.clone(),
                })
                .collect(),
            fused: trace.fused.iter().collect(),
            prediction: trace.prediction,
        }
    }
}

/// Structural violations found in a trace: termination bound, acceptance
/// soundness and monotone growth of the fused set.
pub fn trace_violations(trace: &TraceExport, modalities: usize, calibrated: bool) -> Vec<String> {
    let mut v = Vec::new();
    let initial = ModalitySet::from_indices(trace.initial.iter().copied());
    let fused = ModalitySet::from_indices(trace.fused.iter().copied());
    if trace.iterations.len() > modalities - initial.len() {
        v.push(format!("{} iterations exceed bound {}", trace.iterations.len(), modalities - initial.len()));
    }
    if !initial.is_subset_of(fused) {
        v.push("fused set lost an observed modality".into());
    }
    let mut current = initial;
    for (i, it) in trace.iterations.iter().enumerate() {
        if let Some(u) = it.accepted {
            let rec = it.candidates.iter().find(|c| c.candidate == u);
            match rec {
                Some(c) if (if calibrated { c.r_star } else { c.r }) > 0.0 => {}
                _ => v.push(format!("iteration {i}: accepted {u} without positive score")),
            }
            if current.contains(u) {
                v.push(format!("iteration {i}: accepted {u} twice"));
            }
            current = current.with(u);
        }
    }
    if trace.iterations.iter().any(|it| it.accepted.is_some()) && current != fused {
        v.push("fused set differs from accepted modalities".into());
    }
    v
}

#[cfg(test)]
mod tests;
