//! Multisample Gaussian covariance model.
//!
//! Each of `m` mean-zero `k`-variate samples has covariance `Σ_i = σ_i² V_i`
//! with scale `σ_i² = (det Σ_i)^{1/k}` and unit-determinant shape `V_i`. The
//! parameter stacks the `m` scales followed by the `vech°` coordinates of the
//! `m` shapes, so `p = m(d_k + 1)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, PteError, Result};
use crate::matstat::{
    block_diag, hk_matrix, mk_matrix, shape_dim, shape_from_vech_ring, vec, vech_ring, ShapeMatrix,
    SymPdMatrix,
};
use crate::pte::pte_combine;
use crate::statfn::rejection_threshold;

/// Length of the stacked parameter for `m` samples in dimension `k`.
pub fn param_dim(m: usize, k: usize) -> usize {
    m * (shape_dim(k) + 1)
}

/// Scales and shapes of all samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCovTheta {
    scales: Vec<f64>,
    shapes: Vec<ShapeMatrix>,
}

impl MultiCovTheta {
    pub fn new(scales: Vec<f64>, shapes: Vec<ShapeMatrix>) -> Result<Self> {
        if scales.is_empty() || scales.len() != shapes.len() {
            return domain(format!(
                "need one scale per shape, got {} scales and {} shapes",
                scales.len(),
                shapes.len()
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return domain(format!("scales must be positive and finite, got {s}"));
        }
        let k = shapes[0].dim();
        if shapes.iter().any(|v| v.dim() != k) {
            return domain("shapes have differing dimensions");
        }
        Ok(Self { scales, shapes })
    }

    pub fn from_covariances(covs: &[SymPdMatrix]) -> Result<Self> {
        let (scales, shapes) = covs.iter().map(decompose_cov).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Self::new(scales, shapes)
    }

    /// Inverse of [`MultiCovTheta::flatten`].
    pub fn from_flat(flat: &DVector<f64>, m: usize, k: usize) -> Result<Self> {
        if flat.len() != param_dim(m, k) {
            return domain(format!("expected a parameter of length {}, got {}", param_dim(m, k), flat.len()));
        }
        let d = shape_dim(k);
        let scales = flat.rows(0, m).iter().copied().collect();
        let shapes = (0..m)
            .map(|i| shape_from_vech_ring(flat.rows(m + i * d, d).as_slice(), k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales, shapes)
    }

    pub fn m(&self) -> usize {
        self.scales.len()
    }

    pub fn k(&self) -> usize {
        self.shapes[0].dim()
    }

    pub fn p(&self) -> usize {
        param_dim(self.m(), self.k())
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn shapes(&self) -> &[ShapeMatrix] {
        &self.shapes
    }

    /// `(σ₁², …, σ_m², vech°V₁, …, vech°V_m)`.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.p());
        out.extend_from_slice(&self.scales);
        for v in &self.shapes {
            out.extend(vech_ring(v.as_matrix()).expect("shape matrices are symmetric").iter());
        }
        DVector::from_vec(out)
    }

    /// `σ_i² V_i` for every sample.
    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        self.scales.iter().zip(&self.shapes).map(|(s, v)| v.as_matrix() * *s).collect()
    }
}

/// Splits `Σ` into `(det Σ)^{1/k}` and `Σ / (det Σ)^{1/k}`.
pub fn decompose_cov(sigma: &SymPdMatrix) -> Result<(f64, ShapeMatrix)> {
    let scale = sigma.det_root();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(PteError::Numeric(format!("covariance scale is not finite: {scale}")));
    }
    let shape = ShapeMatrix::new(sigma.as_matrix() / scale)?;
    Ok((scale, shape))
}

/// Uncentered second-moment matrix of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCov {
    pub matrix: DMatrix<f64>,
    /// Set when the matrix is not numerically positive definite.
    pub degenerate: bool,
}

/// `n_i⁻¹ Σ_j X_j X_j′` for an `n_i × k` data matrix (rows are observations).
pub fn sample_cov(data: &DMatrix<f64>) -> Result<SampleCov> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return domain("sample is empty");
    }
    let matrix = data.transpose() * data / data.nrows() as f64;
    let degenerate = SymPdMatrix::new(matrix.clone()).is_err();
    Ok(SampleCov { matrix, degenerate })
}

/// Sample sizes together with per-sample and pooled second-moment matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    sizes: Vec<usize>,
    covs: Vec<SymPdMatrix>,
    pooled: SymPdMatrix,
}

impl SampleSet {
    pub fn from_data(data: &[DMatrix<f64>]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(data.len());
        let mut covs = Vec::with_capacity(data.len());
        for (i, x) in data.iter().enumerate() {
            let s = sample_cov(x)?;
            if s.degenerate {
                return Err(PteError::Numeric(format!("sample {} has a degenerate covariance", i + 1)));
            }
            sizes.push(x.nrows());
            covs.push(s.matrix);
        }
        Self::from_moments(sizes, covs)
    }

    /// Builds the set from sample sizes and second-moment matrices `S_i`.
    pub fn from_moments(sizes: Vec<usize>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if sizes.len() != covs.len() || sizes.is_empty() {
            return domain("need one sample size per covariance matrix");
        }
        if sizes.contains(&0) {
            return domain("sample sizes must be positive");
        }
        let k = covs[0].nrows();
        if covs.iter().any(|s| s.nrows() != k || s.ncols() != k) {
            return domain("covariance matrices must share one square dimension");
        }
        let n: usize = sizes.iter().sum();
        let mut pooled = DMatrix::zeros(k, k);
        for (s, &ni) in covs.iter().zip(&sizes) {
            pooled += s * ni as f64;
        }
        pooled /= n as f64;
        let covs = covs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                SymPdMatrix::new(s).map_err(|_| PteError::Numeric(format!("sample {} has a degenerate covariance", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = SymPdMatrix::new(pooled).map_err(|_| PteError::Numeric("pooled covariance is degenerate".into()))?;
        Ok(Self { sizes, covs, pooled })
    }

    pub fn m(&self) -> usize {
        self.sizes.len()
    }

    pub fn k(&self) -> usize {
        self.pooled.dim()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// `λ_i = n_i / n`.
    pub fn lambdas(&self) -> Vec<f64> {
        let n = self.n_total() as f64;
        self.sizes.iter().map(|&ni| ni as f64 / n).collect()
    }

    pub fn covs(&self) -> &[SymPdMatrix] {
        &self.covs
    }

    pub fn pooled(&self) -> &SymPdMatrix {
        &self.pooled
    }
}

/// Which aspect of the covariances the constraint declares common.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HomogeneityKind {
    Scale,
    Shape,
    Cov,
}

impl HomogeneityKind {
    pub const ALL: [HomogeneityKind; 3] = [HomogeneityKind::Scale, HomogeneityKind::Shape, HomogeneityKind::Cov];

    pub fn as_str(self) -> &'static str {
        match self {
            HomogeneityKind::Scale => "scale",
            HomogeneityKind::Shape => "shape",
            HomogeneityKind::Cov => "cov",
        }
    }
}

impl fmt::Display for HomogeneityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-sample scales and shapes of the sample covariances.
pub fn unconstrained_estimator(samples: &SampleSet) -> Result<MultiCovTheta> {
    MultiCovTheta::from_covariances(samples.covs())
}

/// Estimator under the homogeneity constraint `kind`: the common aspect is
/// taken from the pooled covariance, the free one from each sample.
pub fn constrained_estimator(samples: &SampleSet, kind: HomogeneityKind) -> Result<MultiCovTheta> {
    let per_sample = unconstrained_estimator(samples)?;
    let (pooled_scale, pooled_shape) = decompose_cov(samples.pooled())?;
    let m = samples.m();
    let scales = match kind {
        HomogeneityKind::Shape => per_sample.scales,
        HomogeneityKind::Scale | HomogeneityKind::Cov => vec![pooled_scale; m],
    };
    let shapes = match kind {
        HomogeneityKind::Scale => per_sample.shapes,
        HomogeneityKind::Shape | HomogeneityKind::Cov => vec![pooled_shape; m],
    };
    MultiCovTheta::new(scales, shapes)
}

fn check_compatible(theta: &MultiCovTheta, samples: &SampleSet) -> Result<()> {
    if theta.m() != samples.m() || theta.k() != samples.k() {
        return domain(format!(
            "parameter has (m, k) = ({}, {}) but samples have ({}, {})",
            theta.m(),
            theta.k(),
            samples.m(),
            samples.k()
        ));
    }
    Ok(())
}

/// Score of the sample log-likelihood, each block scaled by `n_i^{-1/2}`.
pub fn central_sequence(theta: &MultiCovTheta, samples: &SampleSet) -> Result<DVector<f64>> {
    check_compatible(theta, samples)?;
    let (m, k) = (theta.m(), theta.k());
    let d = shape_dim(k);
    let mut out = DVector::zeros(theta.p());
    for i in 0..m {
        let s2 = theta.scales[i];
        let v = theta.shapes[i].as_pd();
        let vinv = v.inverse();
        let s = samples.covs[i].as_matrix();
        let c = (samples.sizes[i] as f64).sqrt() / (2.0 * s2);
        let resid = s / s2 - v.as_matrix();
        out[i] = c * (&vinv * resid).trace();
        let w = &vinv * s * &vinv;
        let shape_score = mk_matrix(v) * vec(&w) * c;
        out.rows_mut(m + i * d, d).copy_from(&shape_score);
    }
    Ok(out)
}

/// `diag(k/(2σ_i⁴), H_k(V_i))` in parameter layout.
pub fn information_matrix(theta: &MultiCovTheta) -> Result<SymPdMatrix> {
    let k = theta.k() as f64;
    let scale_block = DMatrix::from_diagonal(&DVector::from_iterator(
        theta.m(),
        theta.scales.iter().map(|s| k / (2.0 * s * s)),
    ));
    let mut blocks = vec![scale_block];
    for v in &theta.shapes {
        blocks.push(hk_matrix(v.as_pd())?.into_inner());
    }
    SymPdMatrix::new(block_diag(&blocks))
}

/// Basis `Υ` of the homogeneity constraint in parameter layout.
pub fn constraint_matrix(kind: HomogeneityKind, m: usize, k: usize) -> Result<DMatrix<f64>> {
    if m < 2 || k < 2 {
        return domain(format!("homogeneity constraints need m ≥ 2 and k ≥ 2, got m = {m}, k = {k}"));
    }
    let d = shape_dim(k);
    let ones = DMatrix::from_element(m, 1, 1.0);
    let stacked_identity = ones.kronecker(&DMatrix::<f64>::identity(d, d));
    let scale_part = match kind {
        HomogeneityKind::Shape => DMatrix::identity(m, m),
        HomogeneityKind::Scale | HomogeneityKind::Cov => ones,
    };
    let shape_part = match kind {
        HomogeneityKind::Scale => DMatrix::identity(m * d, m * d),
        HomogeneityKind::Shape | HomogeneityKind::Cov => stacked_identity,
    };
    Ok(block_diag(&[scale_part, shape_part]))
}

/// Degrees of freedom `p − r` of the homogeneity test.
pub fn test_df(kind: HomogeneityKind, m: usize, k: usize) -> Result<usize> {
    let u = constraint_matrix(kind, m, k)?;
    Ok(u.nrows() - u.ncols())
}

/// `diag(λ_i^{-1/2})` repeated over each sample's scale and shape coordinates.
pub fn rn_matrix(lambdas: &[f64], k: usize) -> Result<DMatrix<f64>> {
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return domain(format!("sample fractions must lie in (0, 1], got {l}"));
    }
    let d = shape_dim(k);
    let m = lambdas.len();
    let mut diag = DVector::zeros(param_dim(m, k));
    for (i, l) in lambdas.iter().enumerate() {
        let w = l.powf(-0.5);
        diag[i] = w;
        diag.rows_mut(m + i * d, d).fill(w);
    }
    Ok(DMatrix::from_diagonal(&diag))
}

/// `Γ⁻¹ − R Υ (Υ′ R Γ R Υ)⁻¹ Υ′ R` with `R = r_n⁻¹`.
pub fn test_bracket(gamma: &SymPdMatrix, upsilon: &DMatrix<f64>, rn: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = gamma.dim();
    if upsilon.nrows() != p || rn.shape() != (p, p) {
        return domain("test bracket dimensions do not match the information matrix");
    }
    let rinv = rn.clone().try_inverse().ok_or_else(|| PteError::Domain("r_n is singular".into()))?;
    let u = &rinv * upsilon;
    let inner = SymPdMatrix::new(u.transpose() * gamma.as_matrix() * &u)?;
    let b = gamma.inverse() - &u * inner.inverse() * u.transpose();
    Ok((&b + b.transpose()) * 0.5)
}

/// Homogeneity test statistic evaluated at `theta_c`.
pub fn test_statistic(theta_c: &MultiCovTheta, samples: &SampleSet, kind: HomogeneityKind) -> Result<f64> {
    check_compatible(theta_c, samples)?;
    let delta = central_sequence(theta_c, samples)?;
    let gamma = information_matrix(theta_c)?;
    let upsilon = constraint_matrix(kind, theta_c.m(), theta_c.k())?;
    let rn = rn_matrix(&samples.lambdas(), theta_c.k())?;
    let q = (delta.transpose() * test_bracket(&gamma, &upsilon, &rn)? * &delta)[(0, 0)];
    if !q.is_finite() {
        return Err(PteError::Numeric(format!("test statistic is not finite: {q}")));
    }
    // the bracket is PSD; clip rounding below zero
    Ok(q.max(0.0))
}

/// Outcome of the pretest estimator for one constraint kind.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCovPte {
    pub estimate: MultiCovTheta,
    pub unconstrained: MultiCovTheta,
    pub constrained: MultiCovTheta,
    pub q: f64,
    pub threshold: f64,
    pub used_constrained: bool,
}

pub fn pte_estimator(samples: &SampleSet, kind: HomogeneityKind, alpha: f64) -> Result<MultiCovPte> {
    let unconstrained = unconstrained_estimator(samples)?;
    let constrained = constrained_estimator(samples, kind)?;
    pte_from_parts(samples, kind, alpha, unconstrained, constrained)
}

pub(crate) fn pte_from_parts(
    samples: &SampleSet,
    kind: HomogeneityKind,
    alpha: f64,
    unconstrained: MultiCovTheta,
    constrained: MultiCovTheta,
) -> Result<MultiCovPte> {
    let q = test_statistic(&constrained, samples, kind)?;
    let threshold = rejection_threshold(test_df(kind, samples.m(), samples.k())?, alpha)?;
    let flat = pte_combine(&unconstrained.flatten(), &constrained.flatten(), q, threshold)?;
    let used_constrained = q <= threshold;
    let estimate = if used_constrained { constrained.clone() } else { unconstrained.clone() };
    debug_assert_eq!(estimate.flatten(), flat);
    Ok(MultiCovPte { estimate, unconstrained, constrained, q, threshold, used_constrained })
}

/// Bivariate covariance of the `ℓ`-th design point for total sample size `n`:
/// scale `e^{ℓ/400}` and unit-determinant shape proportional to
/// `I₂ + ℓ n^{-1/2}(e₁e₂′ + e₂e₁′)`.
pub fn sigma_ell(ell: u32, n: usize) -> Result<SymPdMatrix> {
    if n == 0 {
        return domain("total sample size must be positive");
    }
    let rho = ell as f64 / (n as f64).sqrt();
    if rho >= 1.0 {
        return domain(format!("ℓ n^(-1/2) = {rho} must be below 1 for a positive-definite design"));
    }
    let base = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
    let det = 1.0 - rho * rho;
    SymPdMatrix::new(base * ((ell as f64 / 400.0).exp() / det.sqrt()))
}
