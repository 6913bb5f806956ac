//! Standard normal distribution functions.
//!
//! The upper tail `Q(x) = 1 − Φ(x)` is evaluated directly so that tiny
//! tail probabilities keep their relative precision: a positive-term Taylor
//! series near the origin and the Laplace continued fraction in the tail.

use std::f64::consts::PI;

const SERIES_LIMIT: f64 = 3.0;
const CF_DEPTH: usize = 400;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `Φ(x) − 1/2 = φ(x) · Σ x^{2n+1} / (2n+1)!!`.
fn central_half(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        n += 2.0;
        term *= x2 / n;
        sum += term;
        if term.abs() <= sum.abs() * 1e-17 {
            break;
        }
    }
    normal_pdf(x) * sum
}

/// `Q(x) = φ(x) / (x + 1/(x + 2/(x + 3/(x + …))))`, valid for `x > 0`.
fn tail_continued_fraction(x: f64) -> f64 {
    let mut t = x;
    for k in (1..=CF_DEPTH).rev() {
        t = x + k as f64 / t;
    }
    normal_pdf(x) / t
}

/// Upper tail probability `P(Z > x)` of a standard normal.
pub fn normal_sf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 1.0 - normal_sf(-x);
    }
    if x <= SERIES_LIMIT {
        0.5 - central_half(x)
    } else if x.is_infinite() {
        0.0
    } else {
        tail_continued_fraction(x)
    }
}

/// Standard normal CDF `Φ(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        normal_sf(-x)
    } else {
        1.0 - normal_sf(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn cdf_at_zero_is_half() {
        assert_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn cdf_quantile_975() {
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-7);
    }

    #[test]
    fn matches_erf_reference_on_grid() {
        let mut worst: f64 = 0.0;
        for i in 0..=16000 {
            let x = -8.0 + i as f64 * 1e-3;
            worst = worst.max((normal_cdf(x) - reference_cdf(x)).abs());
        }
        assert!(worst <= 1e-10, "worst {worst:e}");
    }

    #[test]
    fn tail_keeps_relative_precision() {
        for &x in &[3.5, 5.0, 8.0, 12.0, 20.0, 30.0] {
            let reference = 0.5 * libm::erfc(x / std::f64::consts::SQRT_2);
            let rel = (normal_sf(x) - reference).abs() / reference;
            assert!(rel < 1e-12, "x={x} rel={rel:e}");
        }
    }

    #[test]
    fn symmetry() {
        for i in 0..200 {
            let x = i as f64 * 0.05;
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() <= 1e-12);
        }
    }
}
