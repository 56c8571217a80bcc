#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pte_lab::matstat::SymPdMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `A′A + 0.1 I` with uniform `A` entries.
pub fn random_gamma(rng: &mut ChaCha8Rng, p: usize) -> SymPdMatrix {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    SymPdMatrix::new(a.transpose() * &a + DMatrix::identity(p, p) * 0.1).unwrap()
}

pub fn random_upsilon(rng: &mut ChaCha8Rng, p: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, r, |_, _| rng.random_range(-1.0..1.0))
}

/// Uniform draw from the ball of the given radius.
pub fn tau_in_ball(rng: &mut ChaCha8Rng, p: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut *rng));
    let u: f64 = rng.random_range(0.0..1.0);
    dir.normalize() * (radius * u.powf(1.0 / p as f64))
}

/// Random `(p, r)` with `1 ≤ r < p ≤ max_p`.
pub fn random_dims(rng: &mut ChaCha8Rng, max_p: usize) -> (usize, usize) {
    let p = rng.random_range(2..=max_p);
    (p, rng.random_range(1..p))
}

pub fn random_pd(rng: &mut ChaCha8Rng, k: usize) -> SymPdMatrix {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    SymPdMatrix::new(a.transpose() * &a + DMatrix::identity(k, k) * 0.3).unwrap()
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

/// Running mean and standard error (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSe {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanSe {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn se(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }

    /// `|mean − target|` in standard errors.
    pub fn z(&self, target: f64) -> f64 {
        let gap = (self.mean - target).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.se()
        }
    }
}
