use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::fusion_model::FusionModel;

use super::HarnessError;

/// One evaluated grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: String,
    pub metric: String,
    pub eta: f64,
    /// Oracle correct-recovery rate; absent for other recovery methods.
    pub r: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
    /// Binary AUC; only for two classes.
    pub auc: Option<f64>,
    pub mean_iterations: f64,
    /// Fused recovered modalities over offered ones.
    pub acceptance_rate: f64,
    /// Transitions relative to observed-only predictions:
    /// correct→correct, correct→wrong, wrong→correct, wrong→wrong.
    pub cc: usize,
    pub cw: usize,
    pub wc: usize,
    pub ww: usize,
    pub ce_min: f64,
    pub ce_max: f64,
    pub ce_mean: f64,
    pub hoeffding_term: f64,
}

pub const CSV_HEADER: &str =
    "mode,metric,eta,r,seed,accuracy,auc,mean_iterations,acceptance_rate,cc,cw,wc,ww,ce_min,ce_max,hoeffding_term";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.metric,
            self.eta,
            opt(self.r),
            self.seed,
            self.accuracy,
            opt(self.auc),
            self.mean_iterations,
            self.acceptance_rate,
            self.cc,
            self.cw,
            self.wc,
            self.ww,
            self.ce_min,
            self.ce_max,
            self.hoeffding_term
        )
    }
}

pub fn encode_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// What happened to one test sample under one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub label: usize,
    pub prediction: usize,
    pub baseline_prediction: usize,
    pub logits: Vec<f64>,
    pub iterations: usize,
    pub offered: usize,
    pub fused_extra: usize,
}

/// Identifies a grid point in an [`EvalRow`].
#[derive(Clone, Debug, PartialEq)]
pub struct RowKey {
    pub mode: String,
    pub metric: String,
    pub eta: f64,
    pub r: Option<f64>,
    pub seed: u64,
}

pub fn summarize(key: RowKey, outcomes: &[SampleOutcome], classes: usize, delta: f64) -> Result<EvalRow, HarnessError> {
    if outcomes.is_empty() {
        return Err(HarnessError::Config("empty test set".into()));
    }
    let n = outcomes.len();
    let (mut cc, mut cw, mut wc, mut ww) = (0, 0, 0, 0);
    for o in outcomes {
        match (o.baseline_prediction == o.label, o.prediction == o.label) {
            (true, true) => cc += 1,
            (true, false) => cw += 1,
            (false, true) => wc += 1,
            (false, false) => ww += 1,
        }
    }
    let ce: Vec<f64> = outcomes.iter().map(|o| cross_entropy(&o.logits, o.label)).collect();
    let stats = LossRange::from_losses(&ce, delta);
    let auc = if classes == 2 {
        let scores: Vec<f64> = outcomes.iter().map(|o| softmax(&o.logits)[1]).collect();
        let positive: Vec<bool> = outcomes.iter().map(|o| o.label == 2).collect();
        auc_rank_sum(&scores, &positive)
    } else {
        None
    };
    let offered: usize = outcomes.iter().map(|o| o.offered).sum();
    let fused: usize = outcomes.iter().map(|o| o.fused_extra).sum();
    Ok(EvalRow {
        mode: key.mode,
        metric: key.metric,
        eta: key.eta,
        r: key.r,
        seed: key.seed,
        accuracy: (cc + wc) as f64 / n as f64,
        auc,
        mean_iterations: outcomes.iter().map(|o| o.iterations).sum::<usize>() as f64 / n as f64,
        acceptance_rate: if offered == 0 { 0.0 } else { fused as f64 / offered as f64 },
        cc,
        cw,
        wc,
        ww,
        ce_min: stats.ce_min,
        ce_max: stats.ce_max,
        ce_mean: stats.ce_mean,
        hoeffding_term: stats.hoeffding_term,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(logits)[label − 1]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label - 1]
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
/// `None` when either class is absent.
pub fn auc_rank_sum(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank, so midranks of tied runs stay integral
    let mut rank2 = vec![0u64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            rank2[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    let pos_rank2: u64 = (0..scores.len()).filter(|&k| positive[k]).map(|k| rank2[k]).sum();
    let u2 = pos_rank2 - (n_pos * (n_pos + 1)) as u64;
    Some(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// `G · sqrt(ln(1/δ) / (2N))`.
pub fn hoeffding_term(g: f64, n: usize, delta: f64) -> f64 {
    g * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Spread of per-sample test losses and the concentration term it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRange {
    pub n: usize,
    pub ce_min: f64,
    pub ce_max: f64,
    pub ce_mean: f64,
    /// Observed maximum loss.
    pub g: f64,
    pub delta: f64,
    pub hoeffding_term: f64,
}

impl LossRange {
    pub fn from_losses(losses: &[f64], delta: f64) -> Self {
        let n = losses.len();
        let ce_min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let ce_max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ce_mean = losses.iter().sum::<f64>() / n as f64;
        Self { n, ce_min, ce_max, ce_mean, g: ce_max, delta, hoeffding_term: hoeffding_term(ce_max, n, delta) }
    }
}

/// Per-sample classifier cross-entropy under each sample's observed set.
pub fn loss_range(model: &FusionModel, samples: &[Sample], delta: f64) -> Result<LossRange, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::Config("empty test set".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(HarnessError::Config(format!("δ = {delta} outside (0, 1)")));
    }
    let mut losses = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(&s.payloads, s.observed)?;
        losses.push(cross_entropy(&out.logits, s.label));
    }
    Ok(LossRange::from_losses(&losses, delta))
}
