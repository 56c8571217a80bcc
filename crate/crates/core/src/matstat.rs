//! Matrix kit: projections, symmetric square roots, pseudo-inverses and the
//! structural matrices of the multisample covariance model.
//!
//! `vech` stacks the lower triangle column by column, so for a `k × k`
//! matrix the order is `(1,1), (2,1), …, (k,1), (2,2), (3,2), …, (k,k)`.
//! `vech°` drops the leading `(1,1)` entry. Every module shares this order.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{domain, PteError, Result};

const SYM_TOL: f64 = 1e-12;
const PD_REL_TOL: f64 = 1e-12;
const PINV_REL_CUTOFF: f64 = 1e-10;
const RANK_REL_TOL: f64 = 1e-10;
const UNIT_DET_TOL: f64 = 1e-10;

fn scale_of(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest entrywise asymmetry `|m_ij − m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..m.ncols() {
        for i in (j + 1)..m.nrows() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    if !m.is_square() {
        return domain(format!("{what}: expected a square matrix, got {}x{}", m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return domain(format!("{what}: matrix has non-finite entries"));
    }
    let asym = asymmetry(m);
    if asym > tol * scale_of(m) {
        return domain(format!("{what}: matrix is not symmetric (max asymmetry {asym:e})"));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// A real symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPdMatrix(DMatrix<f64>);

impl SymPdMatrix {
    /// Validates symmetry (to `1e-12` relative) and positive definiteness
    /// (`min eigenvalue > 1e-12 · max eigenvalue`); stores the symmetrized input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m, SYM_TOL, "SymPdMatrix")?;
        let m = symmetrize(&m);
        let eig = SymmetricEigen::new(m.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > 0.0) || !(min > PD_REL_TOL * max) {
            return domain(format!(
                "matrix is not positive definite (eigenvalues in [{min:e}, {max:e}])"
            ));
        }
        Ok(Self(m))
    }

    pub fn identity(k: usize) -> Self {
        Self(DMatrix::identity(k, k))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    /// Inverse through the Cholesky factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        match self.0.clone().cholesky() {
            Some(ch) => symmetrize(&ch.inverse()),
            None => self.spectral_map(|l| 1.0 / l),
        }
    }

    /// `ln det`, summed over eigenvalues.
    pub fn ln_det(&self) -> f64 {
        self.eigen().eigenvalues.iter().map(|l| l.ln()).sum()
    }

    /// `det^{1/k}`, computed in log space.
    pub fn det_root(&self) -> f64 {
        (self.ln_det() / self.dim() as f64).exp()
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let eig = self.eigen();
        let mapped = eig.eigenvalues.map(f);
        let q = &eig.eigenvectors;
        symmetrize(&(q * DMatrix::from_diagonal(&mapped) * q.transpose()))
    }
}

/// A positive-definite matrix with unit determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMatrix(SymPdMatrix);

impl ShapeMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let pd = SymPdMatrix::new(m)?;
        let det = pd.ln_det().exp();
        if (det - 1.0).abs() > UNIT_DET_TOL {
            return domain(format!("shape matrix must have unit determinant, got {det}"));
        }
        Ok(Self(pd))
    }

    pub fn identity(k: usize) -> Self {
        Self(SymPdMatrix::identity(k))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_pd(&self) -> &SymPdMatrix {
        &self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.0.as_matrix()
    }
}

/// Checks that `upsilon` has full column rank (smallest singular value above
/// `1e-10` times the largest).
pub fn check_full_column_rank(upsilon: &DMatrix<f64>) -> Result<()> {
    let (p, r) = upsilon.shape();
    if r == 0 || r > p {
        return domain(format!("constraint matrix must be p x r with 0 < r <= p, got {p}x{r}"));
    }
    if upsilon.iter().any(|v| !v.is_finite()) {
        return domain("constraint matrix has non-finite entries");
    }
    let sv = upsilon.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= RANK_REL_TOL * max {
        return domain(format!(
            "constraint matrix is rank deficient (singular values in [{min:e}, {max:e}])"
        ));
    }
    Ok(())
}

fn solve_pd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = a
        .clone()
        .cholesky()
        .ok_or_else(|| PteError::Domain("expected a positive-definite system matrix".into()))?;
    Ok(ch.solve(b))
}

/// Orthogonal projection `P_Υ = Υ(Υ′Υ)^{-1}Υ′` onto the column space of `upsilon`.
pub fn projection_matrix(upsilon: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_full_column_rank(upsilon)?;
    let gram = upsilon.transpose() * upsilon;
    let inner = solve_pd(&gram, &upsilon.transpose())?;
    Ok(symmetrize(&(upsilon * inner)))
}

/// A projection together with its orthogonal complement `I − P`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub proj: DMatrix<f64>,
    pub complement: DMatrix<f64>,
}

/// Efficient projection `P_{Υ,eff} = Γ^{1/2}Υ(Υ′ΓΥ)^{-1}Υ′Γ^{1/2}` and its complement.
pub fn efficient_projection(gamma: &SymPdMatrix, upsilon: &DMatrix<f64>) -> Result<ProjectionPair> {
    if upsilon.nrows() != gamma.dim() {
        return domain(format!(
            "constraint matrix has {} rows but the information matrix is {}x{}",
            upsilon.nrows(),
            gamma.dim(),
            gamma.dim()
        ));
    }
    check_full_column_rank(upsilon)?;
    let root = sym_sqrt(gamma)?.into_inner();
    let w = &root * upsilon;
    let inner = solve_pd(&(upsilon.transpose() * gamma.as_matrix() * upsilon), &w.transpose())?;
    let proj = symmetrize(&(&w * inner));
    let p = gamma.dim();
    let complement = DMatrix::identity(p, p) - &proj;
    Ok(ProjectionPair { proj, complement })
}

/// Symmetric square root by eigendecomposition.
pub fn sym_sqrt(m: &SymPdMatrix) -> Result<SymPdMatrix> {
    SymPdMatrix::new(m.spectral_map(f64::sqrt))
}

/// Symmetric inverse square root `m^{-1/2}`.
pub fn sym_inv_sqrt(m: &SymPdMatrix) -> DMatrix<f64> {
    m.spectral_map(|l| 1.0 / l.sqrt())
}

/// Moore–Penrose inverse of a symmetric matrix.
///
/// Eigenvalues with magnitude below `1e-10` times the largest magnitude are
/// treated as zero.
pub fn moore_penrose(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m, 1e-10, "moore_penrose")?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.amax();
    let n = m.nrows();
    if max == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let cutoff = PINV_REL_CUTOFF * max;
    let inv = eig.eigenvalues.map(|l| if l.abs() > cutoff { 1.0 / l } else { 0.0 });
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&inv) * q.transpose())))
}

/// Factor `F` (`n × rank`) with `F F′ = m` for a symmetric PSD matrix,
/// dropping eigen-directions below `1e-10` times the largest eigenvalue.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m, 1e-10, "psd_factor")?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.max();
    let n = m.nrows();
    if !(max > 0.0) {
        return Ok(DMatrix::zeros(n, 0));
    }
    if eig.eigenvalues.min() < -1e-8 * max {
        return domain("psd_factor: matrix has a materially negative eigenvalue");
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > PINV_REL_CUTOFF * max)
        .collect();
    let mut f = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        f.set_column(c, &(eig.eigenvectors.column(i) * s));
    }
    Ok(f)
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] for a `k × k` matrix.
pub fn unvec(v: &DVector<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(k, k, v.as_slice())
}

/// `d_k = k(k+1)/2 − 1`, the number of free shape coordinates.
pub fn shape_dim(k: usize) -> usize {
    k * (k + 1) / 2 - 1
}

/// `(row, col)` positions addressed by `vech`, in order.
fn vech_positions(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |j| (j..k).map(move |i| (i, j)))
}

/// Half-vectorization of a symmetric matrix.
pub fn vech(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_symmetric(m, 1e-10, "vech")?;
    let k = m.nrows();
    Ok(DVector::from_iterator(
        k * (k + 1) / 2,
        vech_positions(k).map(|(i, j)| m[(i, j)]),
    ))
}

/// `vech°`: [`vech`] without its leading `(1,1)` entry.
pub fn vech_ring(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let full = vech(m)?;
    Ok(full.rows(1, full.len() - 1).into_owned())
}

/// Symmetric matrix whose `vech°` is `coords` and whose `(1,1)` entry is `top_left`.
fn sym_from_vech_ring(coords: &[f64], top_left: f64, k: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(k, k);
    w[(0, 0)] = top_left;
    for ((i, j), &c) in vech_positions(k).skip(1).zip(coords) {
        w[(i, j)] = c;
        w[(j, i)] = c;
    }
    w
}

/// Rebuilds the unit-determinant shape matrix from its `vech°` coordinates.
///
/// The determinant is affine in the `(1,1)` entry, so the entry is solved
/// from `det = 1` by evaluating the determinant at two trial values.
pub fn shape_from_vech_ring(coords: &[f64], k: usize) -> Result<ShapeMatrix> {
    if coords.len() != shape_dim(k) {
        return domain(format!(
            "expected {} shape coordinates for k = {k}, got {}",
            shape_dim(k),
            coords.len()
        ));
    }
    if k == 1 {
        return Ok(ShapeMatrix::identity(1));
    }
    let d0 = sym_from_vech_ring(coords, 0.0, k).determinant();
    let d1 = sym_from_vech_ring(coords, 1.0, k).determinant();
    let slope = d1 - d0;
    if slope.abs() < 1e-300 {
        return domain("shape coordinates do not determine a unit-determinant matrix");
    }
    let v = sym_from_vech_ring(coords, (1.0 - d0) / slope, k);
    ShapeMatrix::new(v)
}

/// Commutation matrix `K_k = Σ_{r,s} (e_r e_s′) ⊗ (e_s e_r′)`.
pub fn commutation_matrix(k: usize) -> DMatrix<f64> {
    let n = k * k;
    let mut out = DMatrix::zeros(n, n);
    // vec(A)[i + j k] = A[i, j]; vec(A′)[j + i k] = A[i, j].
    for i in 0..k {
        for j in 0..k {
            out[(j + i * k, i + j * k)] = 1.0;
        }
    }
    out
}

/// `J_k = (vec I_k)(vec I_k)′`.
pub fn jk_matrix(k: usize) -> DMatrix<f64> {
    let v = vec(&DMatrix::identity(k, k));
    &v * v.transpose()
}

/// `M_k(V)` (`d_k × k²`), characterised by `M_k(V)′ vech°(w) = vec(w)` for
/// every symmetric `w` with `tr[V^{-1} w] = 0`.
///
/// Column `j` of `M_k(V)′` is `vec(w_j)`, where `w_j` has `vech°(w_j) = e_j`
/// and its `(1,1)` entry is solved from the trace constraint.
pub fn mk_matrix(v: &SymPdMatrix) -> DMatrix<f64> {
    let k = v.dim();
    let d = shape_dim(k);
    let vinv = v.inverse();
    let mut mt = DMatrix::zeros(k * k, d);
    let mut coords = vec![0.0; d];
    for j in 0..d {
        coords.iter_mut().for_each(|c| *c = 0.0);
        coords[j] = 1.0;
        let w = sym_from_vech_ring(&coords, 0.0, k);
        let off_trace = vinv.component_mul(&w).sum();
        let w = sym_from_vech_ring(&coords, -off_trace / vinv[(0, 0)], k);
        mt.set_column(j, &vec(&w));
    }
    mt.transpose()
}

/// Shape-block Fisher information
/// `H_k(V) = ¼ M_k(V)(I_{k²} + K_k)(V^{⊗2})^{-1} M_k(V)′`.
pub fn hk_matrix(v: &SymPdMatrix) -> Result<SymPdMatrix> {
    let k = v.dim();
    let m = mk_matrix(v);
    let vinv = v.inverse();
    let kron_inv = vinv.kronecker(&vinv);
    let sym = DMatrix::identity(k * k, k * k) + commutation_matrix(k);
    let h = &m * sym * kron_inv * m.transpose() * 0.25;
    SymPdMatrix::new(symmetrize(&h))
}

/// Block-diagonal matrix assembled from square or rectangular blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}
