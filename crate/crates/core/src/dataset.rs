//! Synthetic multimodal classification data, modality dropout, and the
//! on-disk dataset format.
//!
//! Each modality `m` has `K` class means placed along random orthonormal
//! directions so that every pair of means is `relevance_m · separation`
//! apart; a sample's payload is its class mean plus isotropic Gaussian noise.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::modality::{ModalitySet, MAX_MODALITIES};
use crate::rng::{self, Rng};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Pairwise class-mean distance of a modality with relevance 1.
pub const DEFAULT_SEPARATION: f64 = 3.5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("missing rate {eta} would mask {drop} of {modalities} modalities")]
    MasksEverything { eta: f64, drop: usize, modalities: usize },
    #[error("missing rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes of records and checksum, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub dim: usize,
    /// Scales the separation of this modality's class means, in `[0, 1]`.
    pub relevance: f64,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub modalities: Vec<ModalitySpec>,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_separation() -> f64 {
    DEFAULT_SEPARATION
}

impl DatasetSpec {
    /// `M` modalities of width `dim`, unit noise, given relevances.
    pub fn with_relevances(relevances: &[f64], dim: usize, classes: usize, counts: [usize; 3], seed: u64) -> Self {
        Self {
            modalities: relevances.iter().map(|&relevance| ModalitySpec { dim, relevance, noise: 1.0 }).collect(),
            classes,
            n_train: counts[0],
            n_val: counts[1],
            n_test: counts[2],
            seed,
            separation: DEFAULT_SEPARATION,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim).collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let m = self.modalities.len();
        if !(2..=MAX_MODALITIES).contains(&m) {
            return Err(DatasetError::InvalidSpec(format!("need 2..={MAX_MODALITIES} modalities, got {m}")));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(DatasetError::InvalidSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(DatasetError::InvalidSpec("every partition needs at least one sample".into()));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(DatasetError::InvalidSpec(format!("separation {}", self.separation)));
        }
        for (i, ms) in self.modalities.iter().enumerate() {
            if ms.dim == 0 {
                return Err(DatasetError::InvalidSpec(format!("modality {i}: dim must be ≥ 1")));
            }
            if !(0.0..=1.0).contains(&ms.relevance) {
                return Err(DatasetError::InvalidSpec(format!(
                    "modality {i}: relevance {} outside [0, 1]",
                    ms.relevance
                )));
            }
            if !(ms.noise > 0.0 && ms.noise.is_finite()) {
                return Err(DatasetError::InvalidSpec(format!("modality {i}: noise must be > 0")));
            }
        }
        Ok(())
    }

    /// Class means `[modality][class] -> vector`, drawn from the spec's seed.
    pub fn class_means(&self) -> Vec<Vec<Vec<f64>>> {
        let mut rng = rng::stream(self.seed, "dataset/means");
        self.modalities
            .iter()
            .map(|ms| {
                let dirs = random_directions(&mut rng, ms.dim, self.classes);
                let radius = ms.relevance * self.separation / std::f64::consts::SQRT_2;
                dirs.into_iter().map(|d| d.into_iter().map(|x| x * radius).collect()).collect()
            })
            .collect()
    }
}

fn gaussian_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` unit vectors; the first `min(count, dim)` are mutually orthogonal.
fn random_directions(rng: &mut Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian_vector(rng, dim);
        if out.len() < dim {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= proj * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

/// One multimodal sample. Payloads of every modality are retained, including
/// masked ones; only `observed` payloads may be shown to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub payloads: Vec<Vec<f64>>,
    pub observed: ModalitySet,
    /// Class label in `1..=K`.
    pub label: usize,
}

impl Sample {
    pub fn num_modalities(&self) -> usize {
        self.payloads.len()
    }

    /// 0-based class index.
    pub fn class_index(&self) -> usize {
        self.label - 1
    }

    pub fn missing(&self) -> ModalitySet {
        ModalitySet::full(self.payloads.len()).difference(self.observed)
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }

    /// Held-back payload of a (possibly masked) modality.
    pub fn ground_truth(&self, m: usize) -> &[f64] {
        &self.payloads[m]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(rename = "M")]
    pub modalities: usize,
    #[serde(rename = "K")]
    pub classes: usize,
    pub dims: Vec<usize>,
    pub counts: PartitionCounts,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_modalities(&self) -> usize {
        self.header.modalities
    }

    pub fn num_classes(&self) -> usize {
        self.header.classes
    }

    pub fn dims(&self) -> &[usize] {
        &self.header.dims
    }
}

/// Draws train/val/test partitions of fully observed samples.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = rng::stream(spec.seed, "dataset/samples");
    let m = spec.num_modalities();
    let mut draw = |n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let class = rng.random_range(0..spec.classes);
                let payloads = spec
                    .modalities
                    .iter()
                    .enumerate()
                    .map(|(mi, ms)| {
                        means[mi][class].iter().map(|mu| mu + ms.noise * rng.sample::<f64, _>(StandardNormal)).collect()
                    })
                    .collect();
                Sample { payloads, observed: ModalitySet::full(m), label: class + 1 }
            })
            .collect()
    };
    let train = draw(spec.n_train);
    let val = draw(spec.n_val);
    let test = draw(spec.n_test);
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_FORMAT_VERSION,
            modalities: m,
            classes: spec.classes,
            dims: spec.dims(),
            counts: PartitionCounts { train: spec.n_train, val: spec.n_val, test: spec.n_test },
            seed: spec.seed,
        },
        train,
        val,
        test,
    })
}

/// Number of modalities dropped per sample at rate `eta`.
pub fn drop_count(eta: f64, modalities: usize) -> Result<usize, DatasetError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(DatasetError::RateOutOfRange(eta));
    }
    let drop = (eta * modalities as f64).round() as usize;
    if drop >= modalities {
        return Err(DatasetError::MasksEverything { eta, drop, modalities });
    }
    Ok(drop)
}

/// Masks exactly `round(η·M)` modalities per sample, uniformly without replacement.
pub fn apply_missingness(samples: &mut [Sample], eta: f64, seed: u64) -> Result<(), DatasetError> {
    let Some(m) = samples.first().map(Sample::num_modalities) else {
        return Ok(());
    };
    let drop = drop_count(eta, m)?;
    let mut rng = rng::stream(seed, "missingness");
    for s in samples.iter_mut() {
        let dropped = ModalitySet::from_indices(index::sample(&mut rng, m, drop));
        s.observed = ModalitySet::full(m).difference(dropped);
    }
    Ok(())
}

/// Masks the same modalities in every sample.
pub fn apply_fixed_missing(samples: &mut [Sample], missing: ModalitySet) -> Result<(), DatasetError> {
    for s in samples.iter_mut() {
        let m = s.num_modalities();
        let observed = ModalitySet::full(m).difference(missing);
        if observed.is_empty() {
            return Err(DatasetError::MasksEverything {
                eta: missing.len() as f64 / m as f64,
                drop: missing.len(),
                modalities: m,
            });
        }
        s.observed = observed;
    }
    Ok(())
}

fn record_len(dims: &[usize]) -> usize {
    2 + 4 + 8 * dims.iter().sum::<usize>()
}

pub fn encode(dataset: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    for s in dataset.train.iter().chain(&dataset.val).chain(&dataset.test) {
        w.u16(s.label as u16);
        w.u32(s.observed.bits());
        for p in &s.payloads {
            w.f64s(p);
        }
    }
    codec::encode_frame(&dataset.header, &w.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let (header_text, rest) =
        codec::split_header(bytes).ok_or_else(|| DatasetError::MalformedHeader("no header line".into()))?;
    let header: DatasetHeader =
        codec::parse_header(header_text).map_err(|e| DatasetError::MalformedHeader(e.to_string()))?;
    if header.dims.len() != header.modalities {
        return Err(DatasetError::MalformedHeader(format!(
            "M = {} but {} dims listed",
            header.modalities,
            header.dims.len()
        )));
    }
    if header.modalities == 0 || header.modalities > MAX_MODALITIES || header.dims.contains(&0) {
        return Err(DatasetError::MalformedHeader(format!("unsupported modality layout {:?}", header.dims)));
    }
    if header.classes < 2 {
        return Err(DatasetError::MalformedHeader(format!("K = {}", header.classes)));
    }
    let c = header.counts;
    let total = c.train + c.val + c.test;
    let expected = total * record_len(&header.dims) + 4;
    if rest.len() < expected {
        return Err(DatasetError::TruncatedPayload { expected, found: rest.len() });
    }
    if rest.len() > expected {
        return Err(DatasetError::MalformedHeader(format!(
            "header describes {expected} bytes of records but {} follow",
            rest.len()
        )));
    }
    let (body, stored) = codec::split_trailer(rest).expect("length checked");
    let computed = codec::crc32(body);
    if stored != computed {
        return Err(DatasetError::ChecksumMismatch { stored, computed });
    }
    let full = ModalitySet::full(header.modalities);
    let mut r = ByteReader::new(body);
    let mut samples = Vec::with_capacity(total);
    for index in 0..total {
        let label = r.u16().expect("length checked") as usize;
        let observed = ModalitySet::from_bits(r.u32().expect("length checked"));
        if label == 0 || label > header.classes {
            return Err(DatasetError::InvalidRecord {
                index,
                reason: format!("label {label} outside 1..={}", header.classes),
            });
        }
        if observed.is_empty() || !observed.is_subset_of(full) {
            return Err(DatasetError::InvalidRecord { index, reason: format!("observed mask {:#x}", observed.bits()) });
        }
        let payloads = header.dims.iter().map(|&d| r.f64s(d).expect("length checked")).collect();
        samples.push(Sample { payloads, observed, label });
    }
    let test = samples.split_off(c.train + c.val);
    let val = samples.split_off(c.train);
    Ok(Dataset { header, train: samples, val, test })
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    codec::write_atomic(path, &encode(dataset))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    decode(&fs::read(path)?)
}
