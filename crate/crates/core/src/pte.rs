//! Generic preliminary test estimation machinery.
//!
//! A preliminary test estimator (PTE) returns the constrained estimate when a
//! chi-square pretest accepts the constraint `θ ∈ M(Υ)` and the unconstrained
//! estimate otherwise. This module holds the combination rule, the conditional
//! limit moments given the test statistic's limit `D`, the exact asymptotic
//! mean-square-error (AMSE) matrices for efficient estimators, and a sampler
//! for the unconditional limit law.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::matstat::{
    asymmetry, check_full_column_rank, efficient_projection, moore_penrose, psd_factor, sym_inv_sqrt,
    sym_sqrt, ProjectionPair, SymPdMatrix,
};
use crate::statfn::gamma_pair;

const LAW_TOL: f64 = 1e-8;

/// Combines unconstrained and constrained estimates: the constrained one is
/// kept when `q ≤ threshold`, the unconstrained one otherwise.
pub fn pte_combine(
    theta_u: &DVector<f64>,
    theta_c: &DVector<f64>,
    q: f64,
    threshold: f64,
) -> Result<DVector<f64>> {
    if !(q >= 0.0) {
        return domain(format!("test statistic must be nonnegative, got {q}"));
    }
    if theta_u.len() != theta_c.len() {
        return domain("unconstrained and constrained estimates differ in length");
    }
    Ok(if q <= threshold { theta_c.clone() } else { theta_u.clone() })
}

/// The linear constraint `θ ∈ M(Υ)` with `Υ` a full-rank `p × r` matrix, `r < p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    upsilon: DMatrix<f64>,
}

impl ConstraintSpec {
    pub fn new(upsilon: DMatrix<f64>) -> Result<Self> {
        check_full_column_rank(&upsilon)?;
        if upsilon.ncols() >= upsilon.nrows() {
            return domain(format!(
                "constraint must be proper: r = {} is not below p = {}",
                upsilon.ncols(),
                upsilon.nrows()
            ));
        }
        Ok(Self { upsilon })
    }

    pub fn upsilon(&self) -> &DMatrix<f64> {
        &self.upsilon
    }

    pub fn p(&self) -> usize {
        self.upsilon.nrows()
    }

    pub fn r(&self) -> usize {
        self.upsilon.ncols()
    }

    /// `P_Υ`.
    pub fn projection(&self) -> Result<DMatrix<f64>> {
        crate::matstat::projection_matrix(&self.upsilon)
    }

    /// `P_{Υ,eff}` and its complement under the information `gamma`.
    pub fn efficient_projection(&self, gamma: &SymPdMatrix) -> Result<ProjectionPair> {
        efficient_projection(gamma, &self.upsilon)
    }
}

/// Parameters of the joint limit law of `(S_θ, Δ_θ)` and the representation
/// matrices of the unconstrained estimator (`A`), constrained estimator (`B`)
/// and test statistic (`C`).
#[derive(Debug, Clone, PartialEq)]
pub struct UlanJointLaw {
    pub sigma: DMatrix<f64>,
    pub gamma: SymPdMatrix,
    pub omega: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl UlanJointLaw {
    pub fn new(
        sigma: DMatrix<f64>,
        gamma: SymPdMatrix,
        omega: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        let p = gamma.dim();
        for (name, m, shape) in [
            ("Σ", &sigma, (p, p)),
            ("Ω", &omega, (p, p)),
            ("A", &a, (p, p)),
            ("C", &c, (p, p)),
        ] {
            if m.shape() != shape {
                return domain(format!("{name} must be {p}x{p}, got {:?}", m.shape()));
            }
        }
        if b.ncols() != p || b.nrows() == 0 || b.nrows() >= p {
            return domain(format!("B must be r x {p} with 0 < r < {p}, got {:?}", b.shape()));
        }
        let scale = sigma.amax().max(1.0);
        if asymmetry(&sigma) > 1e-10 * scale {
            return domain("Σ must be symmetric");
        }
        let eig = nalgebra::SymmetricEigen::new(sigma.clone());
        if eig.eigenvalues.min() < -1e-10 * scale {
            return domain("Σ must be positive semi-definite");
        }
        let law = Self { sigma, gamma, omega, a, b, c };
        law.check_test_conditions()?;
        Ok(law)
    }

    /// Efficient estimators and the most stringent test:
    /// `A = Γ^{-1}`, `B = (Υ′ΓΥ)^{-1}Υ′`, `Σ = Ω = Γ`,
    /// `C = (I − Γ^{1/2}ΥBΓ^{1/2})Γ^{-1/2}`.
    pub fn efficient(gamma: &SymPdMatrix, spec: &ConstraintSpec) -> Result<Self> {
        if spec.p() != gamma.dim() {
            return domain("constraint and information dimensions differ");
        }
        let p = gamma.dim();
        let g = gamma.as_matrix();
        let u = spec.upsilon();
        let inner = (u.transpose() * g * u)
            .try_inverse()
            .ok_or_else(|| crate::PteError::Domain("Υ′ΓΥ is singular".into()))?;
        let b = inner * u.transpose();
        let root = sym_sqrt(gamma)?.into_inner();
        let inv_root = sym_inv_sqrt(gamma);
        let c = (DMatrix::identity(p, p) - &root * u * &b * &root) * inv_root;
        Self::new(g.clone(), gamma.clone(), g.clone(), gamma.inverse(), b, c)
    }

    pub fn p(&self) -> usize {
        self.gamma.dim()
    }

    pub fn r(&self) -> usize {
        self.b.nrows()
    }

    /// `ΣC′CΣC′CΣ = ΣC′CΣ` and `tr[C′CΣ] = p − r`.
    fn check_test_conditions(&self) -> Result<()> {
        let ctc = self.c.transpose() * &self.c;
        let lhs = &self.sigma * &ctc * &self.sigma * &ctc * &self.sigma;
        let rhs = &self.sigma * &ctc * &self.sigma;
        let scale = rhs.amax().max(1.0);
        if (&lhs - &rhs).amax() > LAW_TOL * scale {
            return domain("test representation C violates ΣC′CΣC′CΣ = ΣC′CΣ");
        }
        let tr = (&ctc * &self.sigma).trace();
        let target = (self.p() - self.r()) as f64;
        if (tr - target).abs() > LAW_TOL * target.max(1.0) {
            return domain(format!("tr[C′CΣ] = {tr} differs from p − r = {target}"));
        }
        Ok(())
    }
}

/// An efficient estimation problem localized at `θ + ν_n τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficientCase {
    pub gamma: SymPdMatrix,
    pub spec: ConstraintSpec,
    pub tau: DVector<f64>,
    pub alpha: f64,
}

impl EfficientCase {
    pub fn new(gamma: SymPdMatrix, upsilon: DMatrix<f64>, tau: DVector<f64>, alpha: f64) -> Result<Self> {
        let spec = ConstraintSpec::new(upsilon)?;
        if spec.p() != gamma.dim() || tau.len() != gamma.dim() {
            return domain("Γ, Υ and τ must share the parameter dimension");
        }
        if !(0.0..=1.0).contains(&alpha) {
            return domain(format!("level must lie in [0, 1], got {alpha}"));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return domain("τ has non-finite entries");
        }
        Ok(Self { gamma, spec, tau, alpha })
    }

    pub fn p(&self) -> usize {
        self.gamma.dim()
    }

    pub fn r(&self) -> usize {
        self.spec.r()
    }

    fn parts(&self) -> Result<EfficientParts> {
        EfficientParts::new(&self.gamma, &self.spec, &self.tau)
    }
}

/// Matrices shared by the efficient-case formulas.
struct EfficientParts {
    inv_root: DMatrix<f64>,
    pair: ProjectionPair,
    /// `Γ^{-1/2} P⊥ Γ^{1/2} τ`
    bias: DVector<f64>,
    delta: DVector<f64>,
}

impl EfficientParts {
    fn new(gamma: &SymPdMatrix, spec: &ConstraintSpec, tau: &DVector<f64>) -> Result<Self> {
        if tau.len() != gamma.dim() {
            return domain("τ and Γ dimensions differ");
        }
        let pair = spec.efficient_projection(gamma)?;
        let root = sym_sqrt(gamma)?.into_inner();
        let inv_root = sym_inv_sqrt(gamma);
        let delta = &pair.complement * (&root * tau);
        let bias = &inv_root * &delta;
        Ok(Self { inv_root, pair, bias, delta })
    }

    /// `Γ^{-1/2} X Γ^{-1/2}`
    fn sandwich(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.inv_root * x * &self.inv_root
    }
}

/// Mean and covariance of a normal law.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Precomputed pieces of the conditional limit law of the normalized PTE
/// error given `D`.
struct ConditionalKernel {
    threshold: f64,
    mu_d: DVector<f64>,
    sigma_d: DMatrix<f64>,
    tau_shift_u: DVector<f64>,
    tau_shift_c: DVector<f64>,
    gain_u: DMatrix<f64>,
    gain_c: DMatrix<f64>,
    cov_u: DMatrix<f64>,
    cov_c: DMatrix<f64>,
}

impl ConditionalKernel {
    fn new(law: &UlanJointLaw, spec: &ConstraintSpec, tau: &DVector<f64>, threshold: f64) -> Result<Self> {
        let p = law.p();
        if spec.p() != p || tau.len() != p {
            return domain("law, constraint and τ dimensions differ");
        }
        if spec.r() != law.r() {
            return domain("constraint rank and B row count differ");
        }
        let id = DMatrix::<f64>::identity(p, p);
        let (s, c, o) = (&law.sigma, &law.c, &law.omega);
        let sigma_d = c * s * c.transpose();
        let sigma_d = (&sigma_d + sigma_d.transpose()) * 0.5;
        let pinv = moore_penrose(&sigma_d)?;
        let g = s * c.transpose() * &pinv;
        let l = &g * c * s;
        let resid = s - l;
        let ub = spec.upsilon() * &law.b;
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        Ok(Self {
            threshold,
            mu_d: c * o * tau,
            tau_shift_u: (&law.a * o - &id) * tau,
            tau_shift_c: (&ub * o - &id) * tau,
            gain_u: &law.a * &g,
            gain_c: &ub * &g,
            cov_u: sym(&law.a * &resid * law.a.transpose()),
            cov_c: sym(&ub * &resid * ub.transpose()),
            sigma_d,
        })
    }

    fn accepts(&self, d: &DVector<f64>) -> bool {
        d.norm_squared() <= self.threshold
    }

    fn mean(&self, d: &DVector<f64>) -> DVector<f64> {
        let centred = d - &self.mu_d;
        if self.accepts(d) {
            &self.tau_shift_c + &self.gain_c * centred
        } else {
            &self.tau_shift_u + &self.gain_u * centred
        }
    }

    fn moments(&self, d: &DVector<f64>) -> ConditionalMoments {
        let cov = if self.accepts(d) { self.cov_c.clone() } else { self.cov_u.clone() };
        ConditionalMoments { mean: self.mean(d), cov }
    }
}

/// Conditional limit mean and covariance of `ν_n^{-1}(θ̂_PTE − θ_n)` given
/// that the test statistic's limit equals `d`.
pub fn conditional_moments(
    law: &UlanJointLaw,
    spec: &ConstraintSpec,
    tau: &DVector<f64>,
    d: &DVector<f64>,
    threshold: f64,
) -> Result<ConditionalMoments> {
    if d.len() != law.p() {
        return domain("D has the wrong dimension");
    }
    Ok(ConditionalKernel::new(law, spec, tau, threshold)?.moments(d))
}

/// Mean and covariance of the random conditional mean in the efficient case,
/// in closed form through `γ₂` and `γ₄`.
pub fn prop1_mean_var(case: &EfficientCase) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let parts = case.parts()?;
    let (g2, g4) = gamma_pair(case.p(), case.r(), case.alpha, parts.delta.norm_squared())?;
    let mean = &parts.bias * -g2;
    let bias_outer = &parts.bias * parts.bias.transpose();
    let var = parts.sandwich(&parts.pair.complement) * (1.0 - g2)
        + bias_outer * ((1.0 - g4) - (1.0 - g2).powi(2));
    Ok((mean, var))
}

/// AMSE matrix of the efficient PTE:
/// `Γ^{-1} − γ₂Γ^{-1/2}P⊥Γ^{-1/2} + (2γ₂ − γ₄)bb′` with `b = Γ^{-1/2}P⊥Γ^{1/2}τ`.
pub fn amse_pte(case: &EfficientCase) -> Result<DMatrix<f64>> {
    let parts = case.parts()?;
    let (g2, g4) = gamma_pair(case.p(), case.r(), case.alpha, parts.delta.norm_squared())?;
    let out = case.gamma.inverse() - parts.sandwich(&parts.pair.complement) * g2
        + &parts.bias * parts.bias.transpose() * (2.0 * g2 - g4);
    Ok((&out + out.transpose()) * 0.5)
}

/// Second route to [`amse_pte`]: conditional covariance plus the variance and
/// squared mean of the conditional mean.
pub fn amse_pte_via_moments(case: &EfficientCase) -> Result<DMatrix<f64>> {
    let parts = case.parts()?;
    let (mean, var) = prop1_mean_var(case)?;
    let cond_cov = parts.sandwich(&parts.pair.proj);
    let out = cond_cov + var + &mean * mean.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// AMSE of the efficient unconstrained estimator, `Γ^{-1}`.
pub fn amse_u(gamma: &SymPdMatrix) -> DMatrix<f64> {
    gamma.inverse()
}

/// AMSE of the efficient constrained estimator:
/// `Γ^{-1/2}P_{Υ,eff}Γ^{-1/2} + bb′`.
pub fn amse_c(gamma: &SymPdMatrix, upsilon: &DMatrix<f64>, tau: &DVector<f64>) -> Result<DMatrix<f64>> {
    let spec = ConstraintSpec::new(upsilon.clone())?;
    let parts = EfficientParts::new(gamma, &spec, tau)?;
    let out = parts.sandwich(&parts.pair.proj) + &parts.bias * parts.bias.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// `δ = P⊥_{Υ,eff} Γ^{1/2} τ`; `‖δ‖²` is the noncentrality of every `γ_j`.
pub fn delta_vec(gamma: &SymPdMatrix, upsilon: &DMatrix<f64>, tau: &DVector<f64>) -> Result<DVector<f64>> {
    let spec = ConstraintSpec::new(upsilon.clone())?;
    Ok(EfficientParts::new(gamma, &spec, tau)?.delta)
}

/// Scalar summary `tr[Γ^{1/2} AMSE Γ^{1/2}]`.
pub fn amse_scalar(gamma: &SymPdMatrix, amse: &DMatrix<f64>) -> Result<f64> {
    if amse.shape() != (gamma.dim(), gamma.dim()) {
        return domain("AMSE matrix and information matrix dimensions differ");
    }
    let root = sym_sqrt(gamma)?.into_inner();
    Ok((&root * amse * &root).trace())
}

/// Closed-form scalar AMSE of the PTE, `p − γ₂(p − r) + (2γ₂ − γ₄)‖δ‖²`.
pub fn amse_scalar_pte_closed(p: usize, r: usize, alpha: f64, delta_sq: f64) -> Result<f64> {
    let (g2, g4) = gamma_pair(p, r, alpha, delta_sq)?;
    Ok(p as f64 - g2 * (p - r) as f64 + (2.0 * g2 - g4) * delta_sq)
}

/// Scalar AMSE of the unconstrained, constrained and pretest estimators at one
/// noncentrality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PteCurvePoint {
    pub delta_sq: f64,
    pub unconstrained: f64,
    pub constrained: f64,
    pub pretest: f64,
}

/// Scalar risk curves over a grid of noncentralities.
pub fn amse_curve(p: usize, r: usize, alpha: f64, grid: &[f64]) -> Result<Vec<PteCurvePoint>> {
    grid.iter()
        .map(|&d| {
            Ok(PteCurvePoint {
                delta_sq: d,
                unconstrained: p as f64,
                constrained: r as f64 + d,
                pretest: amse_scalar_pte_closed(p, r, alpha, d)?,
            })
        })
        .collect()
}

/// Draws from the unconditional limit law of `ν_n^{-1}(θ̂_PTE − θ_n)`:
/// first `D ~ N(CΩτ, CΣC′)`, then the PTE error given `D` from its
/// conditional normal law. Deterministic for a given `seed`.
pub fn sample_limit_law(
    law: &UlanJointLaw,
    spec: &ConstraintSpec,
    tau: &DVector<f64>,
    threshold: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if n_draws == 0 {
        return domain("need at least one draw");
    }
    let kernel = ConditionalKernel::new(law, spec, tau, threshold)?;
    let factor_d = psd_factor(&kernel.sigma_d)?;
    let factor_u = psd_factor(&kernel.cov_u)?;
    let factor_c = psd_factor(&kernel.cov_c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = |n: usize| -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
    };
    let mut out = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let d = &kernel.mu_d + &factor_d * normals(factor_d.ncols());
        let factor = if kernel.accepts(&d) { &factor_c } else { &factor_u };
        let z = kernel.mean(&d) + factor * normals(factor.ncols());
        out.push(z);
    }
    Ok(out)
}
