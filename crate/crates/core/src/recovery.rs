//! Recovery methods that synthesize payloads for missing modalities, behind
//! a name-keyed registry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::dataset::Sample;
use crate::fusion_model::{decode_store, encode_store, ModelError};
use crate::modality::ModalitySet;
use crate::numerics::{ParameterStore, Tensor};
use crate::rng::Rng;

/// Ridge penalty of the cross-modal least-squares maps.
pub const RIDGE_LAMBDA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("sample has no observed modality")]
    NothingObserved,
    #[error("no fitted map from {source_set} to modality {target}")]
    Unfitted { target: usize, source_set: ModalitySet },
    #[error("unknown recovery method `{0}`")]
    UnknownMethod(String),
    #[error("invalid recovery parameters: {0}")]
    InvalidParams(String),
    #[error("cannot fit on {0}")]
    BadTrainingData(String),
    #[error("recovery file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for RecoveryError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => RecoveryError::Io(io),
            other => RecoveryError::Malformed(other.to_string()),
        }
    }
}

/// Recovered payloads, one per missing modality, in modality order.
#[derive(Clone, Debug, PartialEq)]
pub struct Recovered {
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl Recovered {
    pub fn modalities(&self) -> ModalitySet {
        ModalitySet::from_indices(self.entries.iter().map(|e| e.0))
    }

    /// Payload slots for every modality: observed payloads of `sample`,
    /// recovered payloads where it is missing, empty where neither exists.
    pub fn merged_with(&self, sample: &Sample) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = (0..sample.num_modalities())
            .map(|m| if sample.observed.contains(m) { sample.payloads[m].clone() } else { Vec::new() })
            .collect();
        for (m, p) in &self.entries {
            out[*m] = p.clone();
        }
        out
    }
}

/// A recovery method Υ. Implementations never read the sample's label.
pub trait Recovery: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Payloads for exactly the modalities missing from `sample`.
    fn recover(&self, sample: &Sample, rng: &mut Rng) -> Result<Recovered, RecoveryError>;
}

fn check_observed(sample: &Sample) -> Result<(), RecoveryError> {
    if sample.observed.is_empty() {
        return Err(RecoveryError::NothingObserved);
    }
    Ok(())
}

/// Ground truth with probability `correct_rate` per sample, all-zero
/// payloads otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRecovery {
    correct_rate: f64,
}

impl OracleRecovery {
    pub fn new(correct_rate: f64) -> Result<Self, RecoveryError> {
        if !(0.0..=1.0).contains(&correct_rate) {
            return Err(RecoveryError::InvalidParams(format!("correct rate {correct_rate} outside [0, 1]")));
        }
        Ok(Self { correct_rate })
    }

    pub fn correct_rate(&self) -> f64 {
        self.correct_rate
    }
}

impl Recovery for OracleRecovery {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn recover(&self, sample: &Sample, rng: &mut Rng) -> Result<Recovered, RecoveryError> {
        check_observed(sample)?;
        let truthful = rng.random::<f64>() < self.correct_rate;
        let entries = sample
            .missing()
            .iter()
            .map(|m| {
                let p = sample.ground_truth(m);
                (m, if truthful { p.to_vec() } else { vec![0.0; p.len()] })
            })
            .collect();
        Ok(Recovered { entries })
    }
}

/// Standard-normal payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecovery {
    dims: Vec<usize>,
}

impl NoiseRecovery {
    pub fn new(dims: &[usize]) -> Self {
        Self { dims: dims.to_vec() }
    }
}

impl Recovery for NoiseRecovery {
    fn name(&self) -> &'static str {
        "noise"
    }

    fn recover(&self, sample: &Sample, rng: &mut Rng) -> Result<Recovered, RecoveryError> {
        check_observed(sample)?;
        let entries = sample
            .missing()
            .iter()
            .map(|m| (m, (0..self.dims[m]).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        Ok(Recovered { entries })
    }
}

/// Affine map `y = ȳ + (x − x̄)·W` from concatenated source payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// `[inputs × outputs]`, row-major.
    pub weights: Vec<f64>,
}

impl LinearMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let out = self.y_mean.len();
        let mut y = self.y_mean.clone();
        for (i, (&xi, &mi)) in x.iter().zip(&self.x_mean).enumerate() {
            let d = xi - mi;
            for (yj, &w) in y.iter_mut().zip(&self.weights[i * out..(i + 1) * out]) {
                *yj += d * w;
            }
        }
        y
    }
}

/// In-place Cholesky factor `L` (lower, row-major) of a symmetric
/// positive-definite `n × n` matrix.
fn cholesky(a: &mut [f64], n: usize) -> Result<(), RecoveryError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(RecoveryError::BadTrainingData("Gram matrix is not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L·Lᵀ·X = B` for `X` (`n × m`, row-major) given the factor `L`.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
    }
}

/// Ridge regression of rows `ys` on rows `xs` with an unpenalized intercept.
pub fn fit_ridge(xs: &[Vec<f64>], ys: &[Vec<f64>], lambda: f64) -> Result<LinearMap, RecoveryError> {
    let n = xs.len();
    if n == 0 || ys.len() != n {
        return Err(RecoveryError::BadTrainingData(format!("{} inputs, {} targets", n, ys.len())));
    }
    let p = xs[0].len();
    let q = ys[0].len();
    let mean = |rows: &[Vec<f64>], d: usize| {
        let mut m = vec![0.0; d];
        for r in rows {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n as f64);
        m
    };
    let x_mean = mean(xs, p);
    let y_mean = mean(ys, q);
    let mut gram = vec![0.0; p * p];
    let mut cross = vec![0.0; p * q];
    let mut xc = vec![0.0; p];
    for (x, y) in xs.iter().zip(ys) {
        for i in 0..p {
            xc[i] = x[i] - x_mean[i];
        }
        for i in 0..p {
            for j in 0..=i {
                gram[i * p + j] += xc[i] * xc[j];
            }
            for j in 0..q {
                cross[i * q + j] += xc[i] * (y[j] - y_mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
        gram[i * p + i] += lambda;
    }
    cholesky(&mut gram, p)?;
    cholesky_solve(&gram, p, &mut cross, q);
    Ok(LinearMap { x_mean, y_mean, weights: cross })
}

fn concat_sources(payloads: &[Vec<f64>], sources: ModalitySet) -> Vec<f64> {
    sources.iter().flat_map(|m| payloads[m].iter().copied()).collect()
}

/// Ridge maps from every observed subset `S` to every modality `u ∉ S`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalLinear {
    dims: Vec<usize>,
    maps: BTreeMap<(usize, ModalitySet), LinearMap>,
}

#[derive(Serialize, Deserialize)]
struct RecoveryHeader {
    version: u32,
    method: String,
    dims: Vec<usize>,
    lambda: f64,
}

impl CrossModalLinear {
    /// Fits one map per `(target, source subset)` on complete `train` samples.
    pub fn fit(train: &[Sample], dims: &[usize]) -> Result<Self, RecoveryError> {
        let m = dims.len();
        if train.is_empty() {
            return Err(RecoveryError::BadTrainingData("an empty training set".into()));
        }
        if let Some(i) = train.iter().position(|s| !s.is_complete()) {
            return Err(RecoveryError::BadTrainingData(format!("incomplete training sample {i}")));
        }
        let mut maps = BTreeMap::new();
        for target in 0..m {
            let ys: Vec<Vec<f64>> = train.iter().map(|s| s.payloads[target].clone()).collect();
            for sources in ModalitySet::full(m).without(target).nonempty_subsets_of() {
                let xs: Vec<Vec<f64>> = train.iter().map(|s| concat_sources(&s.payloads, sources)).collect();
                maps.insert((target, sources), fit_ridge(&xs, &ys, RIDGE_LAMBDA)?);
            }
        }
        Ok(Self { dims: dims.to_vec(), maps })
    }

    pub fn map(&self, target: usize, sources: ModalitySet) -> Option<&LinearMap> {
        self.maps.get(&(target, sources))
    }

    pub fn num_maps(&self) -> usize {
        self.maps.len()
    }

    /// Persists the maps in the parameter-store file layout.
    pub fn encode(&self) -> Vec<u8> {
        let mut store = ParameterStore::new();
        for ((u, s), map) in &self.maps {
            let p = map.x_mean.len();
            let q = map.y_mean.len();
            let key = format!("map.{u}.{}", s.bits());
            let put = |store: &mut ParameterStore, suffix: &str, t: Tensor| {
                store.insert(format!("{key}.{suffix}"), t).expect("distinct map keys")
            };
            put(&mut store, "w", Tensor::matrix(p, q, map.weights.clone()).expect("sized"));
            put(&mut store, "x_mean", Tensor::row(map.x_mean.clone()));
            put(&mut store, "y_mean", Tensor::row(map.y_mean.clone()));
        }
        let header = RecoveryHeader {
            version: 1,
            method: "cross-modal-linear".into(),
            dims: self.dims.clone(),
            lambda: RIDGE_LAMBDA,
        };
        encode_store(&header, &store)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RecoveryError> {
        let (header, store): (RecoveryHeader, ParameterStore) = decode_store(bytes)?;
        if header.version != 1 || header.method != "cross-modal-linear" {
            return Err(RecoveryError::Malformed(format!("unsupported {} v{}", header.method, header.version)));
        }
        let m = header.dims.len();
        let mut maps = BTreeMap::new();
        for target in 0..m {
            for sources in ModalitySet::full(m).without(target).nonempty_subsets_of() {
                let key = format!("map.{target}.{}", sources.bits());
                let get = |suffix: &str| {
                    store
                        .get(&format!("{key}.{suffix}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| RecoveryError::Malformed(format!("missing {key}.{suffix}")))
                };
                maps.insert(
                    (target, sources),
                    LinearMap { weights: get("w")?, x_mean: get("x_mean")?, y_mean: get("y_mean")? },
                );
            }
        }
        Ok(Self { dims: header.dims, maps })
    }

    pub fn save(&self, path: &Path) -> Result<(), RecoveryError> {
        codec::write_atomic(path, &self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RecoveryError> {
        Self::decode(&std::fs::read(path)?)
    }
}

impl Recovery for CrossModalLinear {
    fn name(&self) -> &'static str {
        "cross-modal-linear"
    }

    fn recover(&self, sample: &Sample, _rng: &mut Rng) -> Result<Recovered, RecoveryError> {
        check_observed(sample)?;
        let x = concat_sources(&sample.payloads, sample.observed);
        let entries = sample
            .missing()
            .iter()
            .map(|u| {
                let map = self
                    .map(u, sample.observed)
                    .ok_or(RecoveryError::Unfitted { target: u, source_set: sample.observed })?;
                Ok((u, map.apply(&x)))
            })
            .collect::<Result<_, RecoveryError>>()?;
        Ok(Recovered { entries })
    }
}

/// Configuration of a recovery method as it appears in experiment files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverySpec {
    pub method: String,
    /// Correct-recovery rate of the oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_rate: Option<f64>,
}

impl RecoverySpec {
    pub fn oracle(correct_rate: f64) -> Self {
        Self { method: "oracle".into(), correct_rate: Some(correct_rate) }
    }

    pub fn named(method: &str) -> Self {
        Self { method: method.into(), correct_rate: None }
    }
}

/// What a method may be fitted on.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryContext<'a> {
    pub train: &'a [Sample],
    pub dims: &'a [usize],
}

pub type RecoveryFactory = fn(&RecoverySpec, &RecoveryContext<'_>) -> Result<Box<dyn Recovery>, RecoveryError>;

/// Recovery constructors keyed by method name.
#[derive(Clone)]
pub struct RecoveryRegistry {
    factories: BTreeMap<String, RecoveryFactory>,
}

impl Default for RecoveryRegistry {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("oracle", |spec, _| {
            let rate =
                spec.correct_rate.ok_or_else(|| RecoveryError::InvalidParams("oracle needs correct_rate".into()))?;
            Ok(Box::new(OracleRecovery::new(rate)?))
        });
        r.register("noise", |_, ctx| Ok(Box::new(NoiseRecovery::new(ctx.dims))));
        r.register("cross-modal-linear", |_, ctx| Ok(Box::new(CrossModalLinear::fit(ctx.train, ctx.dims)?)));
        r
    }
}

impl RecoveryRegistry {
    pub fn register(&mut self, name: &str, factory: RecoveryFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &RecoverySpec, ctx: &RecoveryContext<'_>) -> Result<Box<dyn Recovery>, RecoveryError> {
        let f = self.factories.get(&spec.method).ok_or_else(|| RecoveryError::UnknownMethod(spec.method.clone()))?;
        f(spec, ctx)
    }
}
