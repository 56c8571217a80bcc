//! Replication engine for the two-sample covariance design.
//!
//! Samples `1..m−1` are drawn from `N(0, I₂)` and the last one from
//! `N(0, Σ_ℓ)`, for each localisation index `ℓ`. Every replication draws from
//! its own ChaCha substream keyed by `(seed, ℓ, replication)`, so the output
//! does not depend on how work is scheduled across threads. Per-replication
//! results are collected in order and folded with compensated sums.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, PteError, Result};
use crate::matstat::SymPdMatrix;
use crate::multicov::{
    central_sequence, constrained_estimator, constraint_matrix, information_matrix, param_dim, pte_from_parts,
    rn_matrix, sigma_ell, unconstrained_estimator, HomogeneityKind, MultiCovTheta, SampleSet,
};
use crate::pte::{amse_c, amse_pte, amse_scalar, amse_u, delta_vec, EfficientCase};

/// Exclusion rate above which a run is considered unreliable.
pub const MAX_EXCLUSION_RATE: f64 = 1e-3;

/// Normalisation of the empirical mean-square error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmseScaling {
    /// `n (θ̂ − θ)(θ̂ − θ)′`
    PaperN,
    /// `ν_n⁻¹ (θ̂ − θ)(θ̂ − θ)′ ν_n⁻¹` with `ν_n = n^{-1/2} r_n`
    NuN,
}

impl AmseScaling {
    pub fn as_str(self) -> &'static str {
        match self {
            AmseScaling::PaperN => "paper_n",
            AmseScaling::NuN => "nu_n",
        }
    }
}

impl std::str::FromStr for AmseScaling {
    type Err = PteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_n" => Ok(AmseScaling::PaperN),
            "nu_n" => Ok(AmseScaling::NuN),
            other => domain(format!("unknown scaling {other:?} (expected paper_n or nu_n)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub m: usize,
    pub k: usize,
    pub n_i: Vec<usize>,
    /// Replications per localisation index.
    pub reps: usize,
    pub alpha: f64,
    pub ells: Vec<u32>,
    pub seed: u64,
    pub scaling: AmseScaling,
    /// Worker threads; 0 lets the thread pool decide.
    pub threads: usize,
}

impl SimConfig {
    /// Two samples of 2,000 bivariate observations, 2,000 replications,
    /// `ℓ = 0..9`.
    pub fn desk() -> Self {
        Self {
            m: 2,
            k: 2,
            n_i: vec![2000, 2000],
            reps: 2000,
            alpha: 0.05,
            ells: (0..10).collect(),
            seed: 20_131_004,
            scaling: AmseScaling::NuN,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return domain(format!("need at least two samples, got m = {}", self.m));
        }
        if self.k != 2 {
            return domain(format!("the Σ_ℓ design is bivariate; got k = {}", self.k));
        }
        if self.n_i.len() != self.m {
            return domain(format!("expected {} sample sizes, got {}", self.m, self.n_i.len()));
        }
        if let Some(n) = self.n_i.iter().find(|&&n| n <= self.k) {
            return domain(format!("each sample size must exceed k = {}, got {n}", self.k));
        }
        if self.reps == 0 {
            return domain("need at least one replication");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return domain(format!("level must lie in [0, 1], got {}", self.alpha));
        }
        if self.ells.is_empty() {
            return domain("no localisation indices given");
        }
        if u32::try_from(self.reps).is_err() {
            return domain("replication count exceeds the substream key range");
        }
        for &ell in &self.ells {
            sigma_ell(ell, self.n_total())?;
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_i.iter().sum()
    }

    pub fn p(&self) -> usize {
        param_dim(self.m, self.k)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        let n = self.n_total() as f64;
        self.n_i.iter().map(|&ni| ni as f64 / n).collect()
    }

    /// Population covariances at index `ℓ`.
    pub fn covariances(&self, ell: u32) -> Result<Vec<SymPdMatrix>> {
        let mut covs = vec![SymPdMatrix::identity(self.k); self.m - 1];
        covs.push(sigma_ell(ell, self.n_total())?);
        Ok(covs)
    }

    pub fn theta(&self, ell: u32) -> Result<MultiCovTheta> {
        MultiCovTheta::from_covariances(&self.covariances(ell)?)
    }
}

/// `ChaCha8` generator for replication `rep` at index `ell`.
pub fn substream(seed: u64, ell: u32, rep: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(ell) << 32) | u64::from(rep));
    rng
}

/// Draws mean-zero Gaussian samples with the given covariance factors
/// (`Σ_i = L_i L_i′`) and returns their second-moment matrices. The data are
/// never stored: `S_i = L_i (n_i⁻¹ Σ z z′) L_i′`.
pub fn draw_sample_set(factors: &[DMatrix<f64>], sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<SampleSet> {
    if factors.len() != sizes.len() {
        return domain("need one covariance factor per sample");
    }
    let mut covs = Vec::with_capacity(sizes.len());
    for (l, &ni) in factors.iter().zip(sizes) {
        let k = l.nrows();
        let mut z = vec![0.0; k];
        let mut acc = DMatrix::<f64>::zeros(k, k);
        for _ in 0..ni {
            for zj in z.iter_mut() {
                *zj = StandardNormal.sample(rng);
            }
            for c in 0..k {
                for r in c..k {
                    acc[(r, c)] += z[r] * z[c];
                }
            }
        }
        acc.fill_upper_triangle_with_lower_triangle();
        acc /= ni as f64;
        covs.push(l * acc * l.transpose());
    }
    SampleSet::from_moments(sizes.to_vec(), covs)
}

/// What one replication contributes, or why it was dropped.
#[derive(Debug, Clone, PartialEq)]
pub enum Replication {
    Excluded,
    Done(Box<ReplicationOutcome>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    /// `θ̂_U − θ` in parameter layout.
    pub unconstrained: DVector<f64>,
    /// `θ̂_C − θ` per kind, in [`HomogeneityKind::ALL`] order.
    pub constrained: [DVector<f64>; 3],
    /// `θ̂_PTE − θ` per kind.
    pub pretest: [DVector<f64>; 3],
    /// Whether each pretest rejected its constraint.
    pub rejected: [bool; 3],
    pub q: [f64; 3],
    /// Central sequence at the true parameter.
    pub score: DVector<f64>,
}

fn cholesky_factors(covs: &[SymPdMatrix]) -> Result<Vec<DMatrix<f64>>> {
    covs.iter()
        .map(|s| {
            s.as_matrix()
                .clone()
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| PteError::Numeric("covariance has no Cholesky factor".into()))
        })
        .collect()
}

fn replicate(
    factors: &[DMatrix<f64>],
    truth: &MultiCovTheta,
    sizes: &[usize],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Replication> {
    let samples = match draw_sample_set(factors, sizes, rng) {
        Ok(s) => s,
        Err(PteError::Numeric(_)) => return Ok(Replication::Excluded),
        Err(e) => return Err(e),
    };
    let estimates = match estimate_all(&samples, alpha) {
        Ok(e) => e,
        Err(PteError::Numeric(_)) => return Ok(Replication::Excluded),
        Err(e) => return Err(e),
    };
    let theta = truth.flatten();
    let (u, cs, ps, rejected, q) = estimates;
    Ok(Replication::Done(Box::new(ReplicationOutcome {
        unconstrained: u - &theta,
        constrained: cs.map(|c| c - &theta),
        pretest: ps.map(|p| p - &theta),
        rejected,
        q,
        score: central_sequence(truth, &samples)?,
    })))
}

type Estimates = (DVector<f64>, [DVector<f64>; 3], [DVector<f64>; 3], [bool; 3], [f64; 3]);

fn estimate_all(samples: &SampleSet, alpha: f64) -> Result<Estimates> {
    let u = unconstrained_estimator(samples)?;
    let mut cs = Vec::with_capacity(3);
    let mut ps = Vec::with_capacity(3);
    let mut rejected = [false; 3];
    let mut q = [0.0; 3];
    for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
        let c = constrained_estimator(samples, kind)?;
        let out = pte_from_parts(samples, kind, alpha, u.clone(), c)?;
        rejected[j] = !out.used_constrained;
        q[j] = out.q;
        cs.push(out.constrained.flatten());
        ps.push(out.estimate.flatten());
    }
    let arr = |v: Vec<DVector<f64>>| -> [DVector<f64>; 3] { v.try_into().expect("three kinds") };
    Ok((u.flatten(), arr(cs), arr(ps), rejected, q))
}

/// Runs replication `rep` at index `ell`.
pub fn run_replication(cfg: &SimConfig, ell: u32, rep: u32) -> Result<Replication> {
    cfg.validate()?;
    let covs = cfg.covariances(ell)?;
    let truth = MultiCovTheta::from_covariances(&covs)?;
    let factors = cholesky_factors(&covs)?;
    replicate(&factors, &truth, &cfg.n_i, cfg.alpha, &mut substream(cfg.seed, ell, rep))
}

/// Local shift `τ = ν_n⁻¹(θ_ℓ − θ₀)` and the resulting noncentralities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalShift {
    pub tau: Vec<f64>,
    /// `‖δ‖²` per kind, in [`HomogeneityKind::ALL`] order.
    pub delta_sq: [f64; 3],
}

/// `ν_n⁻¹ = n^{1/2} r_n⁻¹`.
fn nu_inverse(cfg: &SimConfig) -> Result<DMatrix<f64>> {
    let rn = rn_matrix(&cfg.lambdas(), cfg.k)?;
    Ok(rn.map(|x| if x == 0.0 { 0.0 } else { 1.0 / x }) * (cfg.n_total() as f64).sqrt())
}

/// Constraint basis in local coordinates, `r_n⁻¹ Υ`.
fn local_constraint(cfg: &SimConfig, kind: HomogeneityKind) -> Result<DMatrix<f64>> {
    let rn = rn_matrix(&cfg.lambdas(), cfg.k)?;
    Ok(rn.map(|x| if x == 0.0 { 0.0 } else { 1.0 / x }) * constraint_matrix(kind, cfg.m, cfg.k)?)
}

pub fn tau_from_ell(ell: u32, cfg: &SimConfig) -> Result<LocalShift> {
    cfg.validate()?;
    let theta0 = cfg.theta(0)?;
    let tau = nu_inverse(cfg)? * (cfg.theta(ell)?.flatten() - theta0.flatten());
    let gamma = information_matrix(&theta0)?;
    let mut delta_sq = [0.0; 3];
    for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
        delta_sq[j] = delta_vec(&gamma, &local_constraint(cfg, kind)?, &tau)?.norm_squared();
    }
    Ok(LocalShift { tau: tau.iter().copied().collect(), delta_sq })
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Running sums of outer products `z z′` and of the scalar `z′Γz`.
#[derive(Debug, Clone)]
struct OuterAccumulator {
    outer: Vec<CompensatedSum>,
    scalar: CompensatedSum,
    scalar_sq: CompensatedSum,
    p: usize,
}

impl OuterAccumulator {
    fn new(p: usize) -> Self {
        Self {
            outer: vec![CompensatedSum::default(); p * p],
            scalar: CompensatedSum::default(),
            scalar_sq: CompensatedSum::default(),
            p,
        }
    }

    fn add(&mut self, z: &DVector<f64>, gamma: &DMatrix<f64>) {
        for c in 0..self.p {
            for r in 0..self.p {
                self.outer[r + c * self.p].add(z[r] * z[c]);
            }
        }
        let s = z.dot(&(gamma * z));
        self.scalar.add(s);
        self.scalar_sq.add(s * s);
    }

    fn matrix(&self, count: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |r, c| self.outer[r + c * self.p].value() / count as f64)
    }

    /// Mean of `z′Γz` and its standard error.
    fn scalar_mean_se(&self, count: usize) -> (f64, f64) {
        let n = count as f64;
        let mean = self.scalar.value() / n;
        if count < 2 {
            return (mean, 0.0);
        }
        let var = ((self.scalar_sq.value() - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    }
}

/// Empirical and analytic risk of one estimator at one `ℓ`, viewed from one
/// constraint kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub kind: HomogeneityKind,
    /// `U`, `C` or `PTE`.
    pub estimator: String,
    pub delta_sq: f64,
    /// Scalar summary under the configured scaling.
    pub empirical_amse_s: f64,
    pub se: f64,
    pub analytic_amse_s: f64,
    pub paper_n_amse_s: f64,
    pub paper_n_se: f64,
    pub nu_n_amse_s: f64,
    pub nu_n_se: f64,
    /// Empirical AMSE matrix under the configured scaling (row-major).
    pub empirical_matrix: Vec<Vec<f64>>,
    pub analytic_matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLevel {
    pub ell: u32,
    pub theta: Vec<f64>,
    pub shift: LocalShift,
    pub excluded: usize,
    pub m_effective: usize,
    /// Rejections of each pretest, in [`HomogeneityKind::ALL`] order.
    pub rejections: [usize; 3],
    pub points: Vec<SimPoint>,
    /// Mean of the central sequence at the true parameter.
    pub score_mean: Vec<f64>,
    /// Empirical covariance of the central sequence (row-major).
    pub score_cov: Vec<Vec<f64>>,
    /// Standard error of each `score_cov` entry.
    pub score_cov_se: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub p: usize,
    /// Information matrix at the common null parameter (row-major).
    pub gamma: Vec<Vec<f64>>,
    pub levels: Vec<SimLevel>,
}

impl SimResult {
    pub fn total_excluded(&self) -> usize {
        self.levels.iter().map(|l| l.excluded).sum()
    }

    pub fn exclusion_rate(&self) -> f64 {
        self.total_excluded() as f64 / (self.levels.len() * self.config.reps) as f64
    }

    pub fn exclusion_breach(&self) -> bool {
        self.exclusion_rate() > MAX_EXCLUSION_RATE
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PteError::Numeric(format!("cannot start worker threads: {e}")))
}

const ESTIMATORS: [&str; 3] = ["U", "C", "PTE"];

pub fn run_simulation(cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let pool = thread_pool(cfg.threads)?;
    let p = cfg.p();
    let theta0 = cfg.theta(0)?;
    let gamma0 = information_matrix(&theta0)?;
    let g = gamma0.as_matrix();
    let nu_inv = nu_inverse(cfg)?;
    let root_n = (cfg.n_total() as f64).sqrt();

    let mut levels = Vec::with_capacity(cfg.ells.len());
    for &ell in &cfg.ells {
        let covs = cfg.covariances(ell)?;
        let truth = MultiCovTheta::from_covariances(&covs)?;
        let factors = cholesky_factors(&covs)?;
        let outcomes: Vec<Result<Replication>> = pool.install(|| {
            (0..cfg.reps as u32)
                .into_par_iter()
                .map(|rep| replicate(&factors, &truth, &cfg.n_i, cfg.alpha, &mut substream(cfg.seed, ell, rep)))
                .collect()
        });

        // accumulators: 7 estimators (U, C×3, PTE×3) × 2 scalings
        let mut paper = vec![OuterAccumulator::new(p); 7];
        let mut nu = vec![OuterAccumulator::new(p); 7];
        let mut score_sum = vec![CompensatedSum::default(); p];
        let mut score_outer = OuterAccumulator::new(p);
        let mut score_outer_sq = vec![CompensatedSum::default(); p * p];
        let mut rejections = [0usize; 3];
        let mut excluded = 0usize;
        for outcome in outcomes {
            let out = match outcome? {
                Replication::Excluded => {
                    excluded += 1;
                    continue;
                }
                Replication::Done(o) => o,
            };
            let errors = std::iter::once(&out.unconstrained).chain(&out.constrained).chain(&out.pretest);
            for (j, e) in errors.enumerate() {
                paper[j].add(&(e * root_n), g);
                nu[j].add(&(&nu_inv * e), g);
            }
            for (j, r) in out.rejected.iter().enumerate() {
                rejections[j] += usize::from(*r);
            }
            for (a, s) in score_sum.iter_mut().zip(out.score.iter()) {
                a.add(*s);
            }
            score_outer.add(&out.score, g);
            for c in 0..p {
                for r in 0..p {
                    score_outer_sq[r + c * p].add((out.score[r] * out.score[c]).powi(2));
                }
            }
        }
        let count = cfg.reps - excluded;
        if count == 0 {
            return Err(PteError::Numeric(format!("every replication at ℓ = {ell} was excluded")));
        }

        let shift = tau_from_ell(ell, cfg)?;
        let tau = DVector::from_column_slice(&shift.tau);
        let mut points = Vec::with_capacity(9);
        for (j, kind) in HomogeneityKind::ALL.into_iter().enumerate() {
            let upsilon = local_constraint(cfg, kind)?;
            let analytic = [
                amse_u(&gamma0),
                amse_c(&gamma0, &upsilon, &tau)?,
                amse_pte(&EfficientCase::new(gamma0.clone(), upsilon.clone(), tau.clone(), cfg.alpha)?)?,
            ];
            for (e, name) in ESTIMATORS.into_iter().enumerate() {
                let idx = if e == 0 { 0 } else { e * 3 - 2 + j };
                let (pn, pn_se) = paper[idx].scalar_mean_se(count);
                let (nn, nn_se) = nu[idx].scalar_mean_se(count);
                let (emp, se, matrix) = match cfg.scaling {
                    AmseScaling::PaperN => (pn, pn_se, paper[idx].matrix(count)),
                    AmseScaling::NuN => (nn, nn_se, nu[idx].matrix(count)),
                };
                points.push(SimPoint {
                    kind,
                    estimator: name.to_string(),
                    delta_sq: shift.delta_sq[j],
                    empirical_amse_s: emp,
                    se,
                    analytic_amse_s: amse_scalar(&gamma0, &analytic[e])?,
                    paper_n_amse_s: pn,
                    paper_n_se: pn_se,
                    nu_n_amse_s: nn,
                    nu_n_se: nn_se,
                    empirical_matrix: rows(&matrix),
                    analytic_matrix: rows(&analytic[e]),
                });
            }
        }

        let nf = count as f64;
        let mean = DVector::from_iterator(p, score_sum.iter().map(|s| s.value() / nf));
        let second = score_outer.matrix(count);
        let cov = &second - &mean * mean.transpose();
        let cov_se = DMatrix::from_fn(p, p, |r, c| {
            let m2 = second[(r, c)];
            let m4 = score_outer_sq[r + c * p].value() / nf;
            ((m4 - m2 * m2).max(0.0) / nf).sqrt()
        });
        levels.push(SimLevel {
            ell,
            theta: truth.flatten().iter().copied().collect(),
            shift,
            excluded,
            m_effective: count,
            rejections,
            points,
            score_mean: mean.iter().copied().collect(),
            score_cov: rows(&cov),
            score_cov_se: rows(&cov_se),
        });
    }
    Ok(SimResult { config: cfg.clone(), p, gamma: rows(g), levels })
}

/// Agreement between the pretest and unconstrained estimators at a fixed
/// alternative, per constraint kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub m_effective: usize,
    pub excluded: usize,
    /// Fraction of replications where `θ̂_PTE = θ̂_U`, per kind.
    pub agreement: [f64; 3],
    /// Mean of `‖ν_n⁻¹(θ̂_PTE − θ̂_U)‖`, per kind.
    pub mean_gap: [f64; 3],
    /// Largest `‖ν_n⁻¹(θ̂_PTE − θ̂_U)‖`, per kind.
    pub max_gap: [f64; 3],
}

/// Samples from the fixed alternative `alternative` (sample sizes, level,
/// seed, replication count and threads taken from `cfg`) and measures how
/// often each pretest estimator coincides with the unconstrained one.
pub fn theorem1_check(cfg: &SimConfig, alternative: &MultiCovTheta) -> Result<AgreementReport> {
    if alternative.m() != cfg.m || alternative.k() != cfg.k {
        return domain("alternative does not match the configured dimensions");
    }
    cfg.validate()?;
    let covs = alternative
        .covariances()
        .into_iter()
        .map(SymPdMatrix::new)
        .collect::<Result<Vec<_>>>()?;
    let factors = cholesky_factors(&covs)?;
    let nu_inv = nu_inverse(cfg)?;
    let pool = thread_pool(cfg.threads)?;
    // a key outside the Σ_ℓ range keeps these streams apart from run_simulation's
    let key = u32::MAX;
    let outcomes: Vec<Result<Replication>> = pool.install(|| {
        (0..cfg.reps as u32)
            .into_par_iter()
            .map(|rep| replicate(&factors, alternative, &cfg.n_i, cfg.alpha, &mut substream(cfg.seed, key, rep)))
            .collect()
    });
    let mut agree = [0usize; 3];
    let mut gap_sum = [CompensatedSum::default(); 3];
    let mut max_gap = [0.0f64; 3];
    let mut excluded = 0;
    for outcome in outcomes {
        let out = match outcome? {
            Replication::Excluded => {
                excluded += 1;
                continue;
            }
            Replication::Done(o) => o,
        };
        for j in 0..3 {
            let gap = (&nu_inv * (&out.pretest[j] - &out.unconstrained)).norm();
            agree[j] += usize::from(out.pretest[j] == out.unconstrained);
            gap_sum[j].add(gap);
            max_gap[j] = max_gap[j].max(gap);
        }
    }
    let count = cfg.reps - excluded;
    if count == 0 {
        return Err(PteError::Numeric("every replication was excluded".into()));
    }
    Ok(AgreementReport {
        m_effective: count,
        excluded,
        agreement: agree.map(|a| a as f64 / count as f64),
        mean_gap: gap_sum.map(|s| s.value() / count as f64),
        max_gap,
    })
}
