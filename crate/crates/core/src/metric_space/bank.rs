//! Subset-specific and averaged class prototypes with within-class distance
//! scales.
//!
//! Bank file: JSON header line `{M, K, metric, latent_dim, model}`, then one
//! record per `(k, S)` in class-then-subset order as `(u16 k, u32 S, u64
//! count, u8 flags, f64 mean…, f64 σ)`, then one `(u16 k, f64 c̄_k…)` record
//! per class, then a CRC-32 of the records. Flag bit 0 marks a defined σ,
//! bit 1 a floored one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ics_from_distance, log_posterior_from_distances, posterior_from_distances, DistanceMetric, MetricError,
    PosteriorVector,
};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::dataset::Sample;
use crate::fusion_model::{BatchItem, FusionModel};
use crate::modality::ModalitySet;

/// Lower bound applied to a vanishing distance scale.
pub const SIGMA_FLOOR: f64 = 1e-6;

const FLAG_SIGMA: u8 = 1;
const FLAG_FLOORED: u8 = 2;

/// Statistics of class `k` encoded under subset `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeEntry {
    pub class: usize,
    pub subset: ModalitySet,
    pub count: usize,
    pub mean: Vec<f64>,
    /// `sqrt(mean d²)`; `None` when fewer than two samples contributed.
    pub sigma: Option<f64>,
    /// The raw scale was below [`SIGMA_FLOOR`] and was raised to it.
    pub floored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    metric: DistanceMetric,
    modalities: usize,
    classes: usize,
    latent_dim: usize,
    model: String,
    entries: Vec<PrototypeEntry>,
    averaged: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    #[serde(rename = "M")]
    modalities: usize,
    #[serde(rename = "K")]
    classes: usize,
    metric: DistanceMetric,
    latent_dim: usize,
    model: String,
}

fn subset_count(modalities: usize) -> usize {
    (1usize << modalities) - 1
}

impl PrototypeBank {
    /// Builds a bank from labelled latents. Every `(class, subset)` pair must
    /// occur at least once; `model` tags the producing checkpoint.
    pub fn from_latents<'a>(
        metric: DistanceMetric,
        modalities: usize,
        classes: usize,
        model: impl Into<String>,
        rows: impl IntoIterator<Item = (usize, ModalitySet, &'a [f64])> + Clone,
    ) -> Result<Self, MetricError> {
        let n_sub = subset_count(modalities);
        let mut latent_dim = None;
        let mut sums: Vec<Vec<f64>> = vec![Vec::new(); classes * n_sub];
        let mut counts = vec![0usize; classes * n_sub];
        for (class, subset, z) in rows.clone() {
            let d = *latent_dim.get_or_insert(z.len());
            if z.len() != d {
                return Err(MetricError::DimensionMismatch(d, z.len()));
            }
            let i = slot(n_sub, class, subset);
            if sums[i].is_empty() {
                sums[i] = vec![0.0; d];
            }
            for (s, v) in sums[i].iter_mut().zip(z) {
                *s += v;
            }
            counts[i] += 1;
        }
        for k in 1..=classes {
            if counts[slot(n_sub, k, ModalitySet::from_bits(1))..][..n_sub].iter().all(|&c| c == 0) {
                return Err(MetricError::ClassWithoutSamples(k));
            }
        }
        let latent_dim = latent_dim.unwrap_or(0);
        let mut entries = Vec::with_capacity(classes * n_sub);
        for k in 1..=classes {
            for subset in ModalitySet::nonempty_subsets(modalities) {
                let i = slot(n_sub, k, subset);
                if counts[i] == 0 {
                    return Err(MetricError::MissingPrototype { class: k, subset });
                }
                let n = counts[i] as f64;
                entries.push(PrototypeEntry {
                    class: k,
                    subset,
                    count: counts[i],
                    mean: sums[i].iter().map(|s| s / n).collect(),
                    sigma: None,
                    floored: false,
                });
            }
        }
        let mut sq = vec![0.0; classes * n_sub];
        for (class, subset, z) in rows {
            let i = slot(n_sub, class, subset);
            let d = metric.distance(z, &entries[i].mean)?;
            sq[i] += d * d;
        }
        for (e, s) in entries.iter_mut().zip(sq) {
            if e.count >= 2 {
                let sigma = (s / e.count as f64).sqrt();
                e.floored = sigma < SIGMA_FLOOR;
                e.sigma = Some(sigma.max(SIGMA_FLOOR));
            }
        }
        let averaged = (1..=classes)
            .map(|k| {
                let mut c = vec![0.0; latent_dim];
                for e in &entries[slot(n_sub, k, ModalitySet::from_bits(1))..][..n_sub] {
                    for (a, v) in c.iter_mut().zip(&e.mean) {
                        *a += v;
                    }
                }
                c.iter_mut().for_each(|a| *a /= n_sub as f64);
                c
            })
            .collect();
        Ok(Self { metric, modalities, classes, latent_dim, model: model.into(), entries, averaged })
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Fingerprint of the model the bank was built from.
    pub fn model_fingerprint(&self) -> &str {
        &self.model
    }

    pub fn entries(&self) -> &[PrototypeEntry] {
        &self.entries
    }

    pub fn entry(&self, class: usize, subset: ModalitySet) -> Result<&PrototypeEntry, MetricError> {
        if class == 0
            || class > self.classes
            || subset.is_empty()
            || !subset.is_subset_of(ModalitySet::full(self.modalities))
        {
            return Err(MetricError::MissingPrototype { class, subset });
        }
        Ok(&self.entries[slot(subset_count(self.modalities), class, subset)])
    }

    /// Averaged prototype `c̄_k` of the 1-based class `class`.
    pub fn averaged(&self, class: usize) -> &[f64] {
        &self.averaged[class - 1]
    }

    pub fn averaged_prototypes(&self) -> &[Vec<f64>] {
        &self.averaged
    }

    /// Entries whose scale is undefined or floored.
    pub fn degenerate_entries(&self) -> impl Iterator<Item = &PrototypeEntry> {
        self.entries.iter().filter(|e| e.sigma.is_none() || e.floored)
    }

    /// Distances from `latent` to every averaged prototype.
    pub fn distances(&self, latent: &[f64]) -> Result<Vec<f64>, MetricError> {
        self.averaged.iter().map(|c| self.metric.distance(latent, c)).collect()
    }

    pub fn posterior(&self, latent: &[f64]) -> Result<PosteriorVector, MetricError> {
        Ok(posterior_from_distances(&self.distances(latent)?))
    }

    pub fn log_posterior(&self, latent: &[f64]) -> Result<Vec<f64>, MetricError> {
        Ok(log_posterior_from_distances(&self.distances(latent)?))
    }

    /// Intra-class similarity of `latent` to class `class` under `subset`.
    pub fn ics(&self, class: usize, latent: &[f64], subset: ModalitySet) -> Result<f64, MetricError> {
        let e = self.entry(class, subset)?;
        let sigma = e.sigma.ok_or(MetricError::DegenerateScale { class, subset })?;
        Ok(ics_from_distance(self.metric.distance(latent, &e.mean)?, sigma))
    }

    /// Fails unless the bank was built from `model`.
    pub fn check_model(&self, model: &FusionModel) -> Result<(), MetricError> {
        let fp = model.fingerprint();
        if fp != self.model || model.num_modalities() != self.modalities || model.num_classes() != self.classes {
            return Err(MetricError::IncompatibleModel { bank: self.model.clone(), model: fp });
        }
        Ok(())
    }
}

fn slot(n_sub: usize, class: usize, subset: ModalitySet) -> usize {
    (class - 1) * n_sub + subset.bits() as usize - 1
}

/// Encodes every training sample under every nonempty subset and collects
/// per-class, per-subset latent statistics.
pub fn build_bank(model: &FusionModel, train: &[Sample], metric: DistanceMetric) -> Result<PrototypeBank, MetricError> {
    let m = model.num_modalities();
    let k = model.num_classes();
    let mut counts = vec![0usize; k];
    for s in train {
        if s.label == 0 || s.label > k {
            return Err(MetricError::MissingPrototype { class: s.label, subset: ModalitySet::full(m) });
        }
        counts[s.label - 1] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(MetricError::ClassWithoutSamples(c + 1));
    }
    let subsets: Vec<ModalitySet> = ModalitySet::nonempty_subsets(m).collect();
    let mut items = Vec::with_capacity(train.len() * subsets.len());
    let mut keys = Vec::with_capacity(items.capacity());
    for (index, s) in train.iter().enumerate() {
        for &subset in &subsets {
            if !subset.is_subset_of(s.observed) {
                return Err(MetricError::IncompleteSample { index, subset });
            }
            items.push(BatchItem { payloads: &s.payloads, subset });
            keys.push((s.label, subset));
        }
    }
    let outputs = model.forward_many(&items)?;
    let rows = keys.iter().zip(&outputs).map(|(&(label, subset), o)| (label, subset, o.latent.as_slice()));
    PrototypeBank::from_latents(metric, m, k, model.fingerprint(), rows)
}

pub fn encode_bank(bank: &PrototypeBank) -> Vec<u8> {
    let header = BankHeader {
        modalities: bank.modalities,
        classes: bank.classes,
        metric: bank.metric,
        latent_dim: bank.latent_dim,
        model: bank.model.clone(),
    };
    let mut w = ByteWriter::new();
    for e in &bank.entries {
        w.u16(e.class as u16);
        w.u32(e.subset.bits());
        w.u64(e.count as u64);
        let mut flags = 0;
        if e.sigma.is_some() {
            flags |= FLAG_SIGMA;
        }
        if e.floored {
            flags |= FLAG_FLOORED;
        }
        w.u8(flags);
        w.f64s(&e.mean);
        w.f64(e.sigma.unwrap_or(0.0));
    }
    for (k, c) in bank.averaged.iter().enumerate() {
        w.u16(k as u16 + 1);
        w.f64s(c);
    }
    codec::encode_frame(&header, &w.into_inner())
}

pub fn decode_bank(bytes: &[u8]) -> Result<PrototypeBank, MetricError> {
    let malformed = |m: &str| MetricError::Malformed(m.to_string());
    let (text, rest) = codec::split_header(bytes).ok_or_else(|| malformed("no header line"))?;
    let h: BankHeader = codec::parse_header(text).map_err(|e| MetricError::Malformed(e.to_string()))?;
    let (body, stored) = codec::split_trailer(rest).ok_or_else(|| malformed("missing checksum"))?;
    let computed = codec::crc32(body);
    if stored != computed {
        return Err(MetricError::ChecksumMismatch { stored, computed });
    }
    if h.modalities == 0 || h.modalities > 16 || h.classes == 0 {
        return Err(malformed("implausible M or K"));
    }
    let truncated = || malformed("truncated record");
    let mut r = ByteReader::new(body);
    let n_sub = subset_count(h.modalities);
    let mut entries = Vec::with_capacity(h.classes * n_sub);
    for k in 1..=h.classes {
        for subset in ModalitySet::nonempty_subsets(h.modalities) {
            let class = r.u16().ok_or_else(truncated)? as usize;
            let bits = r.u32().ok_or_else(truncated)?;
            if class != k || bits != subset.bits() {
                return Err(malformed("records out of order"));
            }
            let count = r.u64().ok_or_else(truncated)? as usize;
            let flags = r.u8().ok_or_else(truncated)?;
            let mean = r.f64s(h.latent_dim).ok_or_else(truncated)?;
            let sigma = r.f64().ok_or_else(truncated)?;
            entries.push(PrototypeEntry {
                class,
                subset,
                count,
                mean,
                sigma: (flags & FLAG_SIGMA != 0).then_some(sigma),
                floored: flags & FLAG_FLOORED != 0,
            });
        }
    }
    let mut averaged = Vec::with_capacity(h.classes);
    for k in 1..=h.classes {
        if r.u16().ok_or_else(truncated)? as usize != k {
            return Err(malformed("averaged prototypes out of order"));
        }
        averaged.push(r.f64s(h.latent_dim).ok_or_else(truncated)?);
    }
    if r.remaining() != 0 {
        return Err(malformed("trailing bytes"));
    }
    Ok(PrototypeBank {
        metric: h.metric,
        modalities: h.modalities,
        classes: h.classes,
        latent_dim: h.latent_dim,
        model: h.model,
        entries,
        averaged,
    })
}

pub fn save_bank(bank: &PrototypeBank, path: &Path) -> Result<(), MetricError> {
    codec::write_atomic(path, &encode_bank(bank))?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<PrototypeBank, MetricError> {
    decode_bank(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(points: &[(usize, u32, Vec<f64>)]) -> Vec<(usize, ModalitySet, Vec<f64>)> {
        points.iter().map(|(k, s, z)| (*k, ModalitySet::from_bits(*s), z.clone())).collect()
    }

    fn bank_of(points: &[(usize, ModalitySet, Vec<f64>)], m: usize, k: usize) -> Result<PrototypeBank, MetricError> {
        PrototypeBank::from_latents(
            DistanceMetric::SquaredEuclidean,
            m,
            k,
            "test",
            points.iter().map(|(c, s, z)| (*c, *s, z.as_slice())),
        )
    }

    #[test]
    fn single_sample_prototypes_are_that_sample() {
        let pts = rows(&[
            (1, 1, vec![1.0, 2.0]),
            (1, 2, vec![3.0, 4.0]),
            (1, 3, vec![5.0, 6.0]),
            (2, 1, vec![-1.0, 0.0]),
            (2, 2, vec![0.0, -1.0]),
            (2, 3, vec![-1.0, -1.0]),
        ]);
        let b = bank_of(&pts, 2, 2).unwrap();
        assert_eq!(b.entry(1, ModalitySet::from_bits(2)).unwrap().mean, vec![3.0, 4.0]);
        assert_eq!(b.entry(1, ModalitySet::from_bits(2)).unwrap().sigma, None);
        assert_eq!(b.degenerate_entries().count(), 6);
        assert!(matches!(
            b.ics(1, &[0.0, 0.0], ModalitySet::from_bits(1)),
            Err(MetricError::DegenerateScale { class: 1, .. })
        ));
        assert_eq!(b.averaged(1), &[3.0, 4.0]);
    }

    #[test]
    fn identical_samples_floor_sigma() {
        let mut pts = Vec::new();
        for k in 1..=2 {
            for s in 1..=3u32 {
                for _ in 0..2 {
                    pts.push((k, ModalitySet::from_bits(s), vec![k as f64, s as f64]));
                }
            }
        }
        let b = bank_of(&pts, 2, 2).unwrap();
        for e in b.entries() {
            assert!(e.floored);
            assert_eq!(e.sigma, Some(SIGMA_FLOOR));
        }
        assert_eq!(b.ics(2, &[2.0, 1.0], ModalitySet::from_bits(1)).unwrap(), 1.0);
    }

    #[test]
    fn sigma_is_root_mean_squared_distance() {
        let pts = rows(&[(1, 1, vec![0.0]), (1, 1, vec![2.0]), (1, 1, vec![4.0])]);
        let b = bank_of(&pts, 1, 1).unwrap();
        let e = b.entry(1, ModalitySet::single(0)).unwrap();
        assert_eq!(e.mean, vec![2.0]);
        // d = 4, 0, 4 under the squared metric
        assert!((e.sigma.unwrap() - (32.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn averaged_prototype_is_unweighted_subset_mean() {
        let mut pts = Vec::new();
        for s in 1..=3u32 {
            for r in 0..(s as usize) {
                pts.push((1, ModalitySet::from_bits(s), vec![s as f64 * 10.0 + r as f64]));
            }
        }
        let b = bank_of(&pts, 2, 1).unwrap();
        let direct: f64 = b.entries().iter().map(|e| e.mean[0]).sum::<f64>() / 3.0;
        assert_eq!(b.averaged(1)[0], direct);
    }

    #[test]
    fn missing_class_is_an_error() {
        let pts = rows(&[(1, 1, vec![0.0]), (1, 2, vec![0.0]), (1, 3, vec![0.0])]);
        assert!(matches!(bank_of(&pts, 2, 2), Err(MetricError::ClassWithoutSamples(2))));
    }

    #[test]
    fn collapsed_classes_give_confident_posterior() {
        let centres = [vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let mut pts = Vec::new();
        for (k, c) in centres.iter().enumerate() {
            for s in 1..=3u32 {
                pts.push((k + 1, ModalitySet::from_bits(s), c.clone()));
                pts.push((k + 1, ModalitySet::from_bits(s), c.clone()));
            }
        }
        let b = bank_of(&pts, 2, 3).unwrap();
        for (k, c) in centres.iter().enumerate() {
            let p = b.posterior(c).unwrap();
            assert!(p.prob(k + 1) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let mut pts = Vec::new();
        for k in 1..=2 {
            for s in 1..=3u32 {
                pts.push((k, ModalitySet::from_bits(s), vec![k as f64, 0.5 * s as f64, -1.0]));
                pts.push((k, ModalitySet::from_bits(s), vec![k as f64 + 0.25, 0.0, 1.0]));
            }
        }
        pts.push((1, ModalitySet::from_bits(1), vec![0.0, 0.0, 0.0]));
        let b = bank_of(&pts, 2, 2).unwrap();
        let bytes = encode_bank(&b);
        assert_eq!(decode_bank(&bytes).unwrap(), b);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x40;
        assert!(matches!(decode_bank(&bad), Err(MetricError::ChecksumMismatch { .. })));
        assert!(decode_bank(&bytes[..n - 20]).is_err());
    }
}
