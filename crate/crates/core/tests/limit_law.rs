//! Monte Carlo checks of the limit-law formulas in the efficient case.

mod common;

use common::{random_gamma, random_upsilon, MeanSe};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pte_lab::pte::{
    amse_pte, amse_scalar_pte_closed, conditional_moments, delta_vec, prop1_mean_var, sample_limit_law,
    ConstraintSpec, EfficientCase, UlanJointLaw,
};
use pte_lab::statfn::{gamma_pair, rejection_threshold};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sqrt_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(f64::sqrt);
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn fixed_case(seed: u64, p: usize, r: usize, alpha: f64, tau_scale: f64) -> EfficientCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = random_gamma(&mut rng, p);
    let upsilon = random_upsilon(&mut rng, p, r);
    let tau = DVector::from_fn(p, |i, _| tau_scale * (1.0 + i as f64) / p as f64);
    EfficientCase::new(gamma, upsilon, tau, alpha).unwrap()
}

fn assert_within(acc: &MeanSe, target: f64, what: &str) {
    assert!(acc.z(target) <= 3.0, "{what}: MC {} vs {target} ({:.2} SE)", acc.mean(), acc.z(target));
}

#[test]
fn conditional_mean_moments_match_closed_form() {
    for (seed, p, r, alpha, tau_scale) in [(1, 4, 2, 0.1, 1.5), (2, 3, 1, 0.05, 0.0)] {
        let case = fixed_case(seed, p, r, alpha, tau_scale);
        let g = case.gamma.as_matrix();
        let u = case.spec.upsilon();
        // P⊥ = I − Γ^{1/2}Υ(Υ′ΓΥ)⁻¹Υ′Γ^{1/2}, built independently of the library
        let root = sqrt_sym(g);
        let inner = (u.transpose() * g * u).try_inverse().unwrap();
        let complement = DMatrix::identity(p, p) - &root * u * inner * u.transpose() * &root;
        let d_mean = &complement * &root * &case.tau;

        let law = UlanJointLaw::efficient(&case.gamma, &case.spec).unwrap();
        let threshold = rejection_threshold(p - r, alpha).unwrap();
        let (mean, var) = prop1_mean_var(&case).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut first = vec![MeanSe::default(); p];
        let mut second = vec![MeanSe::default(); p * p];
        for _ in 0..100_000 {
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let d = &d_mean + &complement * z;
            let m = conditional_moments(&law, &case.spec, &case.tau, &d, threshold).unwrap().mean;
            let centred = &m - &mean;
            for i in 0..p {
                first[i].push(m[i]);
                for j in 0..p {
                    second[i * p + j].push(centred[i] * centred[j]);
                }
            }
        }
        for i in 0..p {
            assert_within(&first[i], mean[i], &format!("case {seed}, mean {i}"));
            for j in i..p {
                assert_within(&second[i * p + j], var[(i, j)], &format!("case {seed}, var ({i},{j})"));
            }
        }
    }
}

#[test]
fn sampled_limit_law_reproduces_amse() {
    for (seed, p, r, alpha, tau_scale) in [(3, 4, 2, 0.1, 2.0), (4, 5, 3, 0.25, 1.0)] {
        let case = fixed_case(seed, p, r, alpha, tau_scale);
        let law = UlanJointLaw::efficient(&case.gamma, &case.spec).unwrap();
        let spec = ConstraintSpec::new(case.spec.upsilon().clone()).unwrap();
        let threshold = rejection_threshold(p - r, alpha).unwrap();
        let draws = sample_limit_law(&law, &spec, &case.tau, threshold, 100_000, seed).unwrap();

        let target = amse_pte(&case).unwrap();
        let delta_sq = delta_vec(&case.gamma, spec.upsilon(), &case.tau).unwrap().norm_squared();
        let scalar_target = amse_scalar_pte_closed(p, r, alpha, delta_sq).unwrap();
        let root = sqrt_sym(case.gamma.as_matrix());

        let mut outer = vec![MeanSe::default(); p * p];
        let mut scalar = MeanSe::default();
        for z in &draws {
            for i in 0..p {
                for j in 0..p {
                    outer[i * p + j].push(z[i] * z[j]);
                }
            }
            scalar.push((&root * z).norm_squared());
        }
        for i in 0..p {
            for j in i..p {
                assert_within(&outer[i * p + j], target[(i, j)], &format!("case {seed}, AMSE ({i},{j})"));
            }
        }
        assert_within(&scalar, scalar_target, &format!("case {seed}, scalar AMSE"));
    }
}

#[test]
fn acceptance_probabilities_match_chi_square_draws() {
    let (p, r, alpha) = (4, 1, 0.1);
    let t = rejection_threshold(p - r, alpha).unwrap();
    for (k, delta_sq) in [0.0, 3.0].into_iter().enumerate() {
        let (g2, g4) = gamma_pair(p, r, alpha, delta_sq).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        let (mut acc2, mut acc4) = (MeanSe::default(), MeanSe::default());
        for _ in 0..1_000_000 {
            let z: Vec<f64> = (0..p - r + 4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let v2 = (z[0] + delta_sq.sqrt()).powi(2) + z[1..p - r + 2].iter().map(|x| x * x).sum::<f64>();
            let v4 = v2 + z[p - r + 2..].iter().map(|x| x * x).sum::<f64>();
            acc2.push(f64::from(u8::from(v2 <= t)));
            acc4.push(f64::from(u8::from(v4 <= t)));
        }
        assert_within(&acc2, g2, &format!("γ₂ at δ² = {delta_sq}"));
        assert_within(&acc4, g4, &format!("γ₄ at δ² = {delta_sq}"));
    }
}
