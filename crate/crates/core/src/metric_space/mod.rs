//! Latent-space geometry: distances, prototype banks, the prototype
//! posterior, intra-class similarity (ICS) and the calibration ratio.

mod bank;
mod distance;
mod normal;

pub use bank::{
    build_bank, decode_bank, encode_bank, load_bank, save_bank, PrototypeBank, PrototypeEntry, SIGMA_FLOOR,
};
pub use distance::DistanceMetric;
pub use normal::{normal_cdf, normal_pdf, normal_sf};

use thiserror::Error;

use crate::fusion_model::ModelError;
use crate::modality::ModalitySet;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vectors of length {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine distance with a zero vector")]
    ZeroVector,
    #[error("unknown distance metric `{0}`")]
    UnknownMetric(String),
    #[error("class {0} has no training samples")]
    ClassWithoutSamples(usize),
    #[error("training sample {index} does not observe subset {subset}")]
    IncompleteSample { index: usize, subset: ModalitySet },
    #[error("no prototype for class {class}, subset {subset}")]
    MissingPrototype { class: usize, subset: ModalitySet },
    #[error("class {class}, subset {subset}: distance scale undefined (fewer than 2 samples)")]
    DegenerateScale { class: usize, subset: ModalitySet },
    #[error("ICS before fusion is 0; calibration ratio undefined")]
    ZeroIcsBefore,
    #[error("ICS value {0} outside [0, 1]")]
    IcsOutOfRange(f64),
    #[error("bank file: {0}")]
    Malformed(String),
    #[error("bank checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bank was built for model {bank}, checkpoint is {model}")]
    IncompatibleModel { bank: String, model: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Class probabilities from the prototype posterior; entry `k − 1` is class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorVector(Vec<f64>);

impl PosteriorVector {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    /// Probability of the 1-based class `class`.
    pub fn prob(&self, class: usize) -> f64 {
        self.0[class - 1]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `log softmax(−distances)`, computed with a max shift.
pub fn log_posterior_from_distances(distances: &[f64]) -> Vec<f64> {
    let neg_min = distances.iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
    let lse = neg_min + distances.iter().map(|d| (-d - neg_min).exp()).sum::<f64>().ln();
    distances.iter().map(|d| -d - lse).collect()
}

/// `softmax(−distances)`.
pub fn posterior_from_distances(distances: &[f64]) -> PosteriorVector {
    PosteriorVector(log_posterior_from_distances(distances).into_iter().map(f64::exp).collect())
}

/// `ICS = 2·(1 − Φ(d/σ))`: probability that a half-normal within-class
/// distance exceeds `d`.
pub fn ics_from_distance(distance: f64, sigma: f64) -> f64 {
    (2.0 * normal_sf(distance / sigma)).clamp(0.0, 1.0)
}

/// Asymmetric calibration ratio: 1 when the fused representation is more
/// typical of its class than before, otherwise `ics_after / ics_before`.
pub fn alpha(ics_before: f64, ics_after: f64) -> Result<f64, MetricError> {
    for v in [ics_before, ics_after] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricError::IcsOutOfRange(v));
        }
    }
    if ics_before == 0.0 {
        return Err(MetricError::ZeroIcsBefore);
    }
    if ics_after > ics_before {
        Ok(1.0)
    } else {
        Ok(ics_after / ics_before)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equidistant_posterior_is_uniform() {
        let p = posterior_from_distances(&[2.5, 2.5, 2.5, 2.5]);
        for &v in p.probabilities() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_posterior() {
        let p = posterior_from_distances(&[0.0, 10.0]);
        let e = (-10f64).exp();
        assert!((p.prob(1) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.prob(2) - e / (1.0 + e)).abs() < 1e-15);
        assert!((p.prob(1) - 0.9999546).abs() < 1e-7);
        assert!((p.prob(2) - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn ics_reference_points() {
        assert_eq!(ics_from_distance(0.0, 1.3), 1.0);
        assert!((ics_from_distance(1.959964, 1.0) - 0.05).abs() < 1e-6);
        assert!(ics_from_distance(1e3, 1.0) < 1e-300);
    }

    #[test]
    fn alpha_branches() {
        assert_eq!(alpha(0.3, 0.9).unwrap(), 1.0);
        assert!((alpha(0.8, 0.2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(alpha(0.4, 0.4).unwrap(), 1.0);
        assert!(matches!(alpha(0.0, 0.5), Err(MetricError::ZeroIcsBefore)));
        assert!(alpha(1.2, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn posterior_is_shift_invariant(
            d in prop::collection::vec(0.0f64..20.0, 2..6),
            shift in -50.0f64..50.0,
        ) {
            let a = posterior_from_distances(&d);
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            let b = posterior_from_distances(&shifted);
            let sum: f64 = a.probabilities().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn alpha_in_unit_interval_and_monotone(before in 1e-6f64..1.0, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let x = alpha(before, lo).unwrap();
            let y = alpha(before, hi).unwrap();
            prop_assert!(x > 0.0 || lo == 0.0);
            prop_assert!(x <= 1.0 && y <= 1.0);
            prop_assert!(x <= y);
            prop_assert_eq!(y == 1.0 && hi != before, hi > before || (hi / before) == 1.0);
        }
    }
}
