use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Distance used for prototypes, posteriors and the auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// `‖u − v‖²`
    SquaredEuclidean,
    /// `1 − u·v / (‖u‖‖v‖)`
    Cosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 2] = [DistanceMetric::SquaredEuclidean, DistanceMetric::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::SquaredEuclidean => "squared-euclidean",
            DistanceMetric::Cosine => "cosine",
        }
    }

    pub fn distance(self, u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
        if u.len() != v.len() {
            return Err(MetricError::DimensionMismatch(u.len(), v.len()));
        }
        match self {
            DistanceMetric::SquaredEuclidean => Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()),
            DistanceMetric::Cosine => {
                let nu = norm(u);
                let nv = norm(v);
                if nu == 0.0 || nv == 0.0 {
                    return Err(MetricError::ZeroVector);
                }
                let cos = dot(u, v) / (nu * nv);
                // rounding can push u·v/(‖u‖‖v‖) a hair above 1
                Ok((1.0 - cos).max(0.0))
            }
        }
    }

    /// `out += weight · ∂d(z, proto)/∂z`.
    pub(crate) fn accumulate_gradient(self, z: &[f64], proto: &[f64], weight: f64, out: &mut [f64]) {
        match self {
            DistanceMetric::SquaredEuclidean => {
                for ((o, a), b) in out.iter_mut().zip(z).zip(proto) {
                    *o += weight * 2.0 * (a - b);
                }
            }
            DistanceMetric::Cosine => {
                let nz = norm(z);
                let np = norm(proto);
                let s = dot(z, proto) / (nz * np);
                for ((o, a), b) in out.iter_mut().zip(z).zip(proto) {
                    *o += weight * (s * a / (nz * nz) - b / (nz * np));
                }
            }
        }
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared-euclidean" | "sqeuclidean" | "euclidean" => Ok(DistanceMetric::SquaredEuclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(MetricError::UnknownMetric(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        let se = DistanceMetric::SquaredEuclidean;
        let cos = DistanceMetric::Cosine;
        assert_eq!(se.distance(&[1., 0.], &[0., 1.]).unwrap(), 2.0);
        assert!((cos.distance(&[1., 0.], &[0., 1.]).unwrap() - 1.0).abs() < 1e-15);
        let u = [0.3, -1.2, 2.5];
        let v: Vec<f64> = u.iter().map(|x| 3.0 * x).collect();
        assert!(cos.distance(&u, &v).unwrap().abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(DistanceMetric::Cosine.distance(&[0., 0.], &[1., 0.]), Err(MetricError::ZeroVector)));
    }

    #[test]
    fn parse_names() {
        for m in DistanceMetric::ALL {
            assert_eq!(m.name().parse::<DistanceMetric>().unwrap(), m);
        }
        assert!("manhattan".parse::<DistanceMetric>().is_err());
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_and_zero_on_self(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            for m in DistanceMetric::ALL {
                let duv = m.distance(&u, &v).unwrap();
                let dvu = m.distance(&v, &u).unwrap();
                prop_assert!(duv >= 0.0);
                prop_assert!((duv - dvu).abs() < 1e-12);
                prop_assert!(m.distance(&u, &u).unwrap().abs() < 1e-12);
            }
        }
    }
}
