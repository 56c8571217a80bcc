//! Simple linear regression `Y = ρ1 + βx + ε` with known error variance,
//! pretesting `β = β₀`.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Result};
use crate::matstat::SymPdMatrix;
use crate::pte::{amse_pte, pte_combine, EfficientCase};
use crate::statfn::{gamma_pair, rejection_threshold};

/// Covariate design together with the known error variance and the slope
/// value under test.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRegDesign {
    x: DVector<f64>,
    sigma_sq: f64,
    beta0: f64,
}

impl LinRegDesign {
    pub fn new(x: DVector<f64>, sigma_sq: f64, beta0: f64) -> Result<Self> {
        if x.is_empty() {
            return domain("covariate vector is empty");
        }
        if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
            return domain(format!("error variance must be positive, got {sigma_sq}"));
        }
        if !beta0.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return domain("design contains non-finite values");
        }
        let design = Self { x, sigma_sq, beta0 };
        if !(design.s_x() > 0.0) {
            return domain("covariate has zero spread");
        }
        Ok(design)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn x_bar(&self) -> f64 {
        self.x.mean()
    }

    /// `n⁻¹x′x − n⁻²(1′x)²`, computed from centered values.
    pub fn s_x(&self) -> f64 {
        let m = self.x_bar();
        self.x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.n() as f64
    }

    /// Information matrix evaluated at the design's finite-sample moments.
    pub fn information(&self) -> Result<SymPdMatrix> {
        information_matrix(self.x_bar(), self.s_x(), self.sigma_sq)
    }

    fn check_response(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.n() {
            return domain(format!("response has length {}, design has {}", y.len(), self.n()));
        }
        Ok(())
    }
}

/// Least-squares intercept and slope.
pub fn fit_unconstrained(y: &DVector<f64>, design: &LinRegDesign) -> Result<(f64, f64)> {
    design.check_response(y)?;
    let n = design.n() as f64;
    let x_bar = design.x_bar();
    let y_bar = y.mean();
    let sxy = design.x.iter().zip(y.iter()).map(|(xi, yi)| (xi - x_bar) * (yi - y_bar)).sum::<f64>() / n;
    let beta_hat = sxy / design.s_x();
    let rho_hat = y_bar - beta_hat * x_bar;
    Ok((rho_hat, beta_hat))
}

/// Intercept fitted with the slope pinned at `β₀`.
pub fn fit_constrained(y: &DVector<f64>, design: &LinRegDesign) -> Result<(f64, f64)> {
    design.check_response(y)?;
    let rho_tilde = y.mean() - design.beta0 * design.x_bar();
    Ok((rho_tilde, design.beta0))
}

/// `n(β̂ − β₀)² s_x / σ²`.
pub fn wald_stat(beta_hat: f64, design: &LinRegDesign, n: usize) -> f64 {
    let d = beta_hat - design.beta0;
    n as f64 * d * d * design.s_x() / design.sigma_sq
}

/// Outcome of the regression pretest estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRegPte {
    pub estimate: DVector<f64>,
    pub q: f64,
    pub threshold: f64,
    pub used_constrained: bool,
}

pub fn pte_estimate(y: &DVector<f64>, design: &LinRegDesign, alpha: f64) -> Result<LinRegPte> {
    let (rho_hat, beta_hat) = fit_unconstrained(y, design)?;
    let (rho_tilde, beta0) = fit_constrained(y, design)?;
    let q = wald_stat(beta_hat, design, design.n());
    let threshold = rejection_threshold(1, alpha)?;
    let estimate = pte_combine(
        &DVector::from_vec(vec![rho_hat, beta_hat]),
        &DVector::from_vec(vec![rho_tilde, beta0]),
        q,
        threshold,
    )?;
    Ok(LinRegPte { estimate, q, threshold, used_constrained: q <= threshold })
}

fn check_moments(x_bar0: f64, s0: f64, sigma_sq: f64) -> Result<()> {
    if !x_bar0.is_finite() {
        return domain("covariate mean must be finite");
    }
    if !(s0 > 0.0) || !s0.is_finite() {
        return domain(format!("covariate spread must be positive, got {s0}"));
    }
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return domain(format!("error variance must be positive, got {sigma_sq}"));
    }
    Ok(())
}

/// `σ⁻²[[1, x̄₀], [x̄₀, s₀ + x̄₀²]]`.
pub fn information_matrix(x_bar0: f64, s0: f64, sigma_sq: f64) -> Result<SymPdMatrix> {
    check_moments(x_bar0, s0, sigma_sq)?;
    let m = DMatrix::from_row_slice(2, 2, &[1.0, x_bar0, x_bar0, s0 + x_bar0 * x_bar0]) / sigma_sq;
    SymPdMatrix::new(m)
}

/// Closed-form inverse of [`information_matrix`].
pub fn information_inverse(x_bar0: f64, s0: f64, sigma_sq: f64) -> Result<DMatrix<f64>> {
    check_moments(x_bar0, s0, sigma_sq)?;
    let off = -x_bar0 / s0;
    Ok(DMatrix::from_row_slice(2, 2, &[1.0 + x_bar0 * x_bar0 / s0, off, off, 1.0 / s0]) * sigma_sq)
}

/// Noncentrality of the pretest under the local slope shift `δ`: `s₀δ²/σ²`.
pub fn noncentrality(sigma_sq: f64, s0: f64, delta: f64) -> f64 {
    s0 * delta * delta / sigma_sq
}

/// Closed-form 2×2 AMSE matrix of the regression PTE under `τ = (0, δ)′`.
pub fn amse_pte_linreg(sigma_sq: f64, x_bar0: f64, s0: f64, delta: f64, alpha: f64) -> Result<DMatrix<f64>> {
    check_moments(x_bar0, s0, sigma_sq)?;
    if !delta.is_finite() {
        return domain("local slope shift must be finite");
    }
    let (g2, g4) = gamma_pair(2, 1, alpha, noncentrality(sigma_sq, s0, delta))?;
    let w = (2.0 * g2 - g4) * delta * delta;
    let a11 = sigma_sq * (1.0 + x_bar0 * x_bar0 / s0 - g2 * x_bar0 * x_bar0 / s0) + w * x_bar0 * x_bar0;
    let a12 = sigma_sq * (g2 - 1.0) * x_bar0 / s0 - w * x_bar0;
    let a22 = sigma_sq * (1.0 - g2) / s0 + w;
    Ok(DMatrix::from_row_slice(2, 2, &[a11, a12, a12, a22]))
}

/// The regression instance of the general efficient-case problem.
pub fn linreg_case(sigma_sq: f64, x_bar0: f64, s0: f64, delta: f64, alpha: f64) -> Result<EfficientCase> {
    let gamma = information_matrix(x_bar0, s0, sigma_sq)?;
    let upsilon = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    EfficientCase::new(gamma, upsilon, DVector::from_vec(vec![0.0, delta]), alpha)
}

/// Same AMSE matrix computed through the general efficient-case formula.
pub fn amse_pte_linreg_general(sigma_sq: f64, x_bar0: f64, s0: f64, delta: f64, alpha: f64) -> Result<DMatrix<f64>> {
    amse_pte(&linreg_case(sigma_sq, x_bar0, s0, delta, alpha)?)
}
