//! Shared helpers for the integration tests: random inputs, finite
//! differences, brute-force oracles and the acceptance checks.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
pub mod runs;

use modsep::numcore::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Result of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    pub fn assert_pass(&self, name: &str) {
        assert!(self.pass, "{name}: {}", self.detail);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, scale: f32) -> f32 {
    let z: f32 = rng.sample(StandardNormal);
    z * scale
}

pub fn rand_vec(rng: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| normal(rng, scale)).collect()
}

pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::new(rows, cols, rand_vec(rng, rows * cols, scale)).unwrap()
}

/// `Σ m ⊙ r` in f64; used as a scalar probe of a block's output.
pub fn probe(m: &Matrix, r: &Matrix) -> f64 {
    assert_eq!(m.shape(), r.shape());
    m.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

pub fn probe_vec(v: &[f32], r: &[f32]) -> f64 {
    v.iter().zip(r).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

/// Central difference with one Richardson step. The divisor uses the exact
/// perturbation after f32 rounding.
pub fn fd_partial(f: impl Fn(f32) -> f64, x: f32, h: f32) -> f64 {
    let d = |h: f32| {
        let (xp, xm) = (x + h, x - h);
        (f(xp) - f(xm)) / (f64::from(xp) - f64::from(xm))
    };
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

/// Finite-difference gradient of `f` over every coordinate of `theta`.
pub fn fd_grad(theta: &[f32], h: f32, f: impl Fn(&[f32]) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|c| {
            fd_partial(
                |x| {
                    let mut t = theta.to_vec();
                    t[c] = x;
                    f(&t)
                },
                theta[c],
                h,
            )
        })
        .collect()
}

/// `‖fd − an‖ / max(‖fd‖, ‖an‖)`, with a floor so all-zero gradients compare
/// as equal.
pub fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    assert_eq!(fd.len(), an.len());
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n1 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = an.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / n1.max(n2).max(1e-10)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn concat(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().chain(b).copied().collect()
}
