//! Sampling checks of the multisample covariance model: score moments, test
//! size and null quantiles, power, and the pretest choice at tiny levels.

mod common;

use std::sync::OnceLock;

use common::MeanSe;
use nalgebra::DMatrix;
use pte_lab::matstat::SymPdMatrix;
use pte_lab::montecarlo::{theorem1_check, SimConfig};
use pte_lab::multicov::{
    central_sequence, information_matrix, pte_estimator, test_df, HomogeneityKind, MultiCovTheta, SampleSet,
};
use pte_lab::statfn::chi2_quantile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const REPS: usize = 10_000;
const SIZES: [usize; 2] = [1500, 2500];
const ALPHA: f64 = 0.05;

fn null_cov() -> SymPdMatrix {
    SymPdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap()
}

/// Raw data, one `n_i × k` matrix per sample, drawn as `Z L′`.
fn draw(rng: &mut ChaCha8Rng, covs: &[SymPdMatrix], sizes: &[usize]) -> Vec<DMatrix<f64>> {
    covs.iter()
        .zip(sizes)
        .map(|(c, &n)| {
            let l = c.as_matrix().clone().cholesky().unwrap().l();
            let z: DMatrix<f64> = DMatrix::from_fn(n, c.dim(), |_, _| StandardNormal.sample(&mut *rng));
            z * l.transpose()
        })
        .collect()
}

struct NullRun {
    truth: MultiCovTheta,
    scores: Vec<Vec<f64>>,
    /// Test statistics per replication in `HomogeneityKind::ALL` order.
    q: Vec<[f64; 3]>,
    rejected: Vec<[bool; 3]>,
}

fn null_run() -> &'static NullRun {
    static RUN: OnceLock<NullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let covs = vec![null_cov(), null_cov()];
        let truth = MultiCovTheta::from_covariances(&covs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut run = NullRun { truth, scores: vec![], q: vec![], rejected: vec![] };
        for _ in 0..REPS {
            let samples = SampleSet::from_data(&draw(&mut rng, &covs, &SIZES)).unwrap();
            run.scores.push(central_sequence(&run.truth, &samples).unwrap().iter().copied().collect());
            let mut q = [0.0; 3];
            let mut rejected = [false; 3];
            for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
                let out = pte_estimator(&samples, kind, ALPHA).unwrap();
                q[j] = out.q;
                rejected[j] = !out.used_constrained;
            }
            run.q.push(q);
            run.rejected.push(rejected);
        }
        run
    })
}

fn binomial_z(hits: usize, n: usize, prob: f64) -> f64 {
    let freq = hits as f64 / n as f64;
    (freq - prob).abs() / (prob * (1.0 - prob) / n as f64).sqrt()
}

#[test]
fn score_has_mean_zero_and_information_covariance() {
    let run = null_run();
    let p = run.truth.p();
    let gamma = information_matrix(&run.truth).unwrap();
    for i in 0..p {
        let mut mean = MeanSe::default();
        run.scores.iter().for_each(|s| mean.push(s[i]));
        assert!(mean.z(0.0) <= 3.0, "Δ_{i} mean {} is {:.2} SE from 0", mean.mean(), mean.z(0.0));
    }
    // the mean is known to be zero, so E[Δ_i Δ_j] estimates the covariance
    for i in 0..p {
        for j in i..p {
            let mut prod = MeanSe::default();
            run.scores.iter().for_each(|s| prod.push(s[i] * s[j]));
            let target = gamma.as_matrix()[(i, j)];
            assert!(
                prod.z(target) <= 3.0,
                "cov({i},{j}) = {} vs Γ {target} ({:.2} SE)",
                prod.mean(),
                prod.z(target)
            );
        }
    }
}

#[test]
fn tests_hold_their_level_under_the_null() {
    let run = null_run();
    for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
        let hits = run.rejected.iter().filter(|r| r[j]).count();
        let z = binomial_z(hits, REPS, ALPHA);
        assert!(z <= 3.0, "{kind}: {hits} rejections in {REPS} ({z:.2} SE from α)");
    }
}

#[test]
fn null_statistic_matches_chi_square_quantiles() {
    let run = null_run();
    for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
        let df = test_df(kind, 2, 2).unwrap() as f64;
        for level in [0.5, 0.9, 0.95] {
            let cut = chi2_quantile(level, df).unwrap();
            let exceed = run.q.iter().filter(|q| q[j] > cut).count();
            let z = binomial_z(exceed, REPS, 1.0 - level);
            assert!(z <= 3.0, "{kind} at {level}: {exceed} exceedances ({z:.2} SE)");
        }
    }
}

#[test]
fn statistic_is_never_negative() {
    assert!(null_run().q.iter().flatten().all(|&q| q >= 0.0));
}

#[test]
fn doubled_covariance_is_detected_by_scale_and_cov_tests() {
    // Σ₂ = 2Σ₁ changes the scale only; the shape hypothesis still holds
    let base = null_cov();
    let doubled = SymPdMatrix::new(base.as_matrix() * 2.0).unwrap();
    let alternative = MultiCovTheta::from_covariances(&[base, doubled]).unwrap();
    let cfg = SimConfig { n_i: vec![2000, 2000], reps: 1000, seed: 77, ..SimConfig::desk() };
    let report = theorem1_check(&cfg, &alternative).unwrap();
    let [scale, shape, cov] = report.agreement;
    assert!(scale >= 0.99, "scale power {scale}");
    assert!(cov >= 0.99, "cov power {cov}");
    let n = report.m_effective;
    let shape_hits = (shape * n as f64).round() as usize;
    assert!(binomial_z(shape_hits, n, ALPHA) <= 3.0, "shape test rejects {shape} under its null");
}

#[test]
fn tiny_level_keeps_the_constrained_estimate() {
    let alpha = 1e-6;
    let covs = vec![null_cov(), null_cov()];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let reps = 2000;
    let mut kept = [0usize; 3];
    for _ in 0..reps {
        let samples = SampleSet::from_data(&draw(&mut rng, &covs, &[400, 400])).unwrap();
        for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
            let out = pte_estimator(&samples, kind, alpha).unwrap();
            if out.used_constrained {
                assert_eq!(out.estimate, out.constrained);
                kept[j] += 1;
            }
        }
    }
    let se = (alpha * (1.0 - alpha) / reps as f64).sqrt();
    for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
        let freq = kept[j] as f64 / reps as f64;
        assert!(freq >= 1.0 - alpha - 3.0 * se, "{kind}: constrained chosen in {freq} of replications");
    }
}
