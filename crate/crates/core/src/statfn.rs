//! Chi-square and noncentral chi-square distribution functions.
//!
//! Everything here is pure and allocation-free. The regularized incomplete
//! gamma function is evaluated with the power series below `a + 1` and a
//! modified Lentz continued fraction above it.

use crate::error::{domain, PteError, Result};

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 10_000;
const QUANTILE_CDF_TOL: f64 = 1e-10;
const POISSON_TAIL_TOL: f64 = 1e-12;
const POISSON_MAX_TERMS: usize = 100_000;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(z)` for `z > 0` (Lanczos, g = 7).
pub fn ln_gamma(z: f64) -> f64 {
    if z < 0.5 {
        // Reflection keeps the approximation in its accurate half-plane.
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return domain(format!("incomplete gamma shape must be positive, got {a}"));
    }
    if !(x >= 0.0) {
        return domain(format!("incomplete gamma argument must be nonnegative, got {x}"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x).map(|q| 1.0 - q)
    }
}

fn gamma_prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

fn gamma_series(a: f64, x: f64) -> Result<f64> {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            return Ok((sum * gamma_prefactor(a, x)).clamp(0.0, 1.0));
        }
    }
    Err(PteError::Numeric(format!(
        "incomplete gamma series did not converge (a = {a}, x = {x})"
    )))
}

/// Upper regularized gamma `Q(a, x)` by the modified Lentz method.
fn gamma_continued_fraction(a: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            return Ok((gamma_prefactor(a, x) * h).clamp(0.0, 1.0));
        }
    }
    Err(PteError::Numeric(format!(
        "incomplete gamma continued fraction did not converge (a = {a}, x = {x})"
    )))
}

fn check_df(df: f64) -> Result<()> {
    if !(df > 0.0) || !df.is_finite() {
        return domain(format!("degrees of freedom must be positive and finite, got {df}"));
    }
    Ok(())
}

/// Chi-square density.
pub fn chi2_pdf(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if !(x >= 0.0) {
        return domain(format!("chi-square argument must be nonnegative, got {x}"));
    }
    let half = 0.5 * df;
    if x == 0.0 {
        return Ok(match half.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        });
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(((half - 1.0) * x.ln() - 0.5 * x - half * std::f64::consts::LN_2 - ln_gamma(half)).exp())
}

/// Chi-square distribution function, `P(df/2, x/2)`.
pub fn chi2_cdf(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if !(x >= 0.0) {
        return domain(format!("chi-square argument must be nonnegative, got {x}"));
    }
    reg_lower_gamma(0.5 * df, 0.5 * x)
}

/// Inverse of [`chi2_cdf`]: the `prob`-quantile of the chi-square law.
///
/// The upper `β`-quantile written `χ²_{ℓ,β}` in risk formulas is
/// `chi2_quantile(β, ℓ)`.
pub fn chi2_quantile(prob: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if !(prob > 0.0 && prob < 1.0) {
        return domain(format!("quantile probability must lie in (0, 1), got {prob}"));
    }

    let mut lo = 0.0_f64;
    let mut hi = df.max(1.0);
    while chi2_cdf(hi, df)? < prob {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(PteError::Numeric(format!(
                "could not bracket chi-square quantile (prob = {prob}, df = {df})"
            )));
        }
    }

    // Newton steps on the CDF, falling back to bisection whenever a step
    // leaves the current bracket.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..500 {
        let f = chi2_cdf(x, df)? - prob;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = chi2_pdf(x, df)?;
        let newton = if slope > 0.0 && slope.is_finite() {
            x - f / slope
        } else {
            f64::NAN
        };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.max(f64::MIN_POSITIVE)
            || hi - lo <= 4.0 * f64::EPSILON * hi
        {
            x = next;
            break;
        }
        x = next;
    }

    let resid = (chi2_cdf(x, df)? - prob).abs();
    if resid > QUANTILE_CDF_TOL {
        return Err(PteError::Numeric(format!(
            "chi-square quantile residual {resid:e} exceeds tolerance (prob = {prob}, df = {df})"
        )));
    }
    Ok(x)
}

fn poisson_weight(k: usize, mean: f64) -> f64 {
    let kf = k as f64;
    (kf * mean.ln() - mean - ln_gamma(kf + 1.0)).exp()
}

/// Noncentral chi-square distribution function as a Poisson mixture of
/// central chi-square CDFs.
///
/// Summation starts at the Poisson mode and grows in whichever direction
/// carries the larger next weight until the unvisited Poisson mass drops
/// below `1e-12`.
pub fn noncentral_chi2_cdf(x: f64, df: f64, lambda: f64) -> Result<f64> {
    check_df(df)?;
    if !(x >= 0.0) {
        return domain(format!("chi-square argument must be nonnegative, got {x}"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return domain(format!("noncentrality must be nonnegative and finite, got {lambda}"));
    }
    if lambda == 0.0 {
        return chi2_cdf(x, df);
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }

    let mean = 0.5 * lambda;
    let mode = mean.floor() as usize;
    let term = |k: usize| -> Result<(f64, f64)> {
        let w = poisson_weight(k, mean);
        Ok((w, w * chi2_cdf(x, df + 2.0 * k as f64)?))
    };

    let (w0, t0) = term(mode)?;
    let mut mass = w0;
    let mut total = t0;
    let mut down = mode; // next index below is down - 1
    let mut up = mode + 1;
    let mut w_down = if down > 0 { poisson_weight(down - 1, mean) } else { 0.0 };
    let mut w_up = poisson_weight(up, mean);

    for _ in 0..POISSON_MAX_TERMS {
        if 1.0 - mass < POISSON_TAIL_TOL {
            return Ok(total.clamp(0.0, 1.0));
        }
        if w_down == 0.0 && w_up == 0.0 {
            // The remaining weights underflow; the leftover mass is rounding.
            return Ok(total.clamp(0.0, 1.0));
        }
        if down > 0 && w_down >= w_up {
            down -= 1;
            let (w, t) = term(down)?;
            mass += w;
            total += t;
            w_down = if down > 0 { poisson_weight(down - 1, mean) } else { 0.0 };
        } else {
            let (w, t) = term(up)?;
            mass += w;
            total += t;
            up += 1;
            w_up = poisson_weight(up, mean);
        }
    }
    Err(PteError::Numeric(format!(
        "noncentral chi-square series did not converge (x = {x}, df = {df}, lambda = {lambda})"
    )))
}

/// Arguments of the `γ_j` acceptance probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaJInputs {
    pub j: u32,
    pub p: usize,
    pub r: usize,
    pub alpha: f64,
    pub delta_sq: f64,
}

impl GammaJInputs {
    pub fn new(j: u32, p: usize, r: usize, alpha: f64, delta_sq: f64) -> Result<Self> {
        let inputs = Self { j, p, r, alpha, delta_sq };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || !self.j.is_multiple_of(2) {
            return domain(format!("γ_j offset must be a positive even integer, got {}", self.j));
        }
        if self.r == 0 || self.r >= self.p {
            return domain(format!("need 0 < r < p, got r = {}, p = {}", self.r, self.p));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return domain(format!("level must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.delta_sq >= 0.0) || !self.delta_sq.is_finite() {
            return domain(format!(
                "noncentrality must be nonnegative and finite, got {}",
                self.delta_sq
            ));
        }
        Ok(())
    }
}

/// Rejection threshold `χ²_{df,1−α}` of a level-`α` chi-square test.
///
/// `α = 1` gives `0` (always reject) and `α = 0` gives `+∞` (never reject).
pub fn rejection_threshold(df: usize, alpha: f64) -> Result<f64> {
    if df == 0 {
        return domain("test degrees of freedom must be positive");
    }
    if !(0.0..=1.0).contains(&alpha) {
        return domain(format!("level must lie in [0, 1], got {alpha}"));
    }
    if alpha == 1.0 {
        Ok(0.0)
    } else if alpha == 0.0 {
        Ok(f64::INFINITY)
    } else {
        chi2_quantile(1.0 - alpha, df as f64)
    }
}

/// `γ_j = P[V_j ≤ χ²_{p−r,1−α}]` with `V_j ~ χ²_{p−r+j}(δ²)`.
pub fn gamma_j(inputs: GammaJInputs) -> Result<f64> {
    inputs.validate()?;
    if inputs.alpha == 1.0 {
        return Ok(0.0);
    }
    if inputs.alpha == 0.0 {
        return Ok(1.0);
    }
    let df = inputs.p - inputs.r;
    let threshold = rejection_threshold(df, inputs.alpha)?;
    noncentral_chi2_cdf(threshold, (df + inputs.j as usize) as f64, inputs.delta_sq)
}

/// `(γ₂, γ₄)` for one localization.
pub fn gamma_pair(p: usize, r: usize, alpha: f64, delta_sq: f64) -> Result<(f64, f64)> {
    let g2 = gamma_j(GammaJInputs::new(2, p, r, alpha, delta_sq)?)?;
    let g4 = gamma_j(GammaJInputs::new(4, p, r, alpha, delta_sq)?)?;
    Ok((g2, g4))
}
