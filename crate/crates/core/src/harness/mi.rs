//! Exact check of `I(Y; Z) ≥ H(Y) − CE` on enumerable discrete distributions.

use rand::Rng as _;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};

/// Joint `p[z][y]`.
pub type Joint = Vec<Vec<f64>>;
/// Conditional model `q[z][y] = q(y | z)`.
pub type Conditional = Vec<Vec<f64>>;

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

pub fn marginal_y(p: &Joint) -> Vec<f64> {
    let mut out = vec![0.0; p[0].len()];
    for row in p {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub fn entropy_y(p: &Joint) -> f64 {
    -marginal_y(p).iter().map(|&v| xlogy(v, v)).sum::<f64>()
}

pub fn mutual_information(p: &Joint) -> f64 {
    let py = marginal_y(p);
    let mut i = 0.0;
    for row in p {
        let pz: f64 = row.iter().sum();
        for (v, y) in row.iter().zip(&py) {
            if *v > 0.0 {
                i += v * (v / (pz * y)).ln();
            }
        }
    }
    i
}

/// Expected `−ln q(y | z)` under `p`.
pub fn cross_entropy(p: &Joint, q: &Conditional) -> f64 {
    -p.iter().zip(q).map(|(pr, qr)| pr.iter().zip(qr).map(|(&a, &b)| xlogy(a, b)).sum::<f64>()).sum::<f64>()
}

/// The true conditional `p(y | z)`.
pub fn conditional_of(p: &Joint) -> Conditional {
    p.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Random joint over `z_size × y_size` with full support.
pub fn random_joint(z_size: usize, y_size: usize, rng: &mut Rng) -> Joint {
    simplex(z_size * y_size, rng).chunks(y_size).map(<[f64]>::to_vec).collect()
}

pub fn random_conditional(z_size: usize, y_size: usize, rng: &mut Rng) -> Conditional {
    (0..z_size).map(|_| simplex(y_size, rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiBoundReport {
    pub trials: usize,
    pub slack: f64,
    /// Trials with `H(Y) − CE − I(Y; Z) > slack` for a random model.
    pub violations: usize,
    /// Largest `H(Y) − CE − I(Y; Z)` over random models (≤ 0 when the bound holds).
    pub max_gap: f64,
    /// Largest `|I − (H(Y) − CE)|` when the model is the true conditional.
    pub max_equality_residual: f64,
    /// Largest `|CE − ln K|` for the uniform model.
    pub max_uniform_residual: f64,
    pub passed: bool,
}

/// Runs `trials` random instances with supports of size 2 to 8.
pub fn mi_bound_check(trials: usize, seed: u64) -> MiBoundReport {
    let slack = 1e-12;
    let mut rng = rng::stream(seed, "mi-bound");
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    let mut max_eq: f64 = 0.0;
    let mut max_uniform: f64 = 0.0;
    for _ in 0..trials {
        let zs = rng.random_range(2..=8);
        let ys = rng.random_range(2..=8);
        let p = random_joint(zs, ys, &mut rng);
        let q = random_conditional(zs, ys, &mut rng);
        let (i, h) = (mutual_information(&p), entropy_y(&p));
        let gap = h - cross_entropy(&p, &q) - i;
        if gap > slack {
            violations += 1;
        }
        max_gap = max_gap.max(gap);
        max_eq = max_eq.max((i - (h - cross_entropy(&p, &conditional_of(&p)))).abs());
        let uniform = vec![vec![1.0 / ys as f64; ys]; zs];
        max_uniform = max_uniform.max((cross_entropy(&p, &uniform) - (ys as f64).ln()).abs());
    }
    MiBoundReport {
        trials,
        slack,
        violations,
        max_gap,
        max_equality_residual: max_eq,
        max_uniform_residual: max_uniform,
        passed: violations == 0 && max_eq <= slack,
    }
}
