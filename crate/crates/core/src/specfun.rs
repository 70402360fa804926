//! Special functions behind the vMF density and the Dirichlet expectations.
//!
//! Everything is evaluated in log space. The modified Bessel function of the
//! first kind uses two regimes:
//!
//! * `x < max(12, ν/2)`: the ascending power series
//!   `I_ν(x) = (x/2)^ν Σ_m (x/2)^{2m} / (m! Γ(m+ν+1))`, whose terms are all
//!   positive, summed as a running product of term ratios.
//! * otherwise: the Debye uniform asymptotic expansion in the order. For
//!   `ν < 30` the expansion is evaluated at the shifted order `ν + n ≥ 30`
//!   (with `n` an integer) and brought back down with the three-term
//!   recurrence `I_{ν-1} = I_{ν+1} + (2ν/x) I_ν`, which is the stable
//!   direction for `I`.
//!
//! Both regimes agree to roughly 1e-13 in `log I_ν(x)` at the switch.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use crate::error::{domain, Error, Result};

/// `ln(2π)`.
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on `x` for the asymptotic regime.
pub const SERIES_SWITCH_X: f64 = 12.0;

/// Smallest order at which the Debye expansion is evaluated directly.
const DEBYE_MIN_ORDER: f64 = 30.0;

/// Number of Debye polynomials `u_0 .. u_{N-1}`.
const DEBYE_TERMS: usize = 13;

/// Order `ν` of a modified Bessel function, `ν >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BesselOrder(f64);

impl BesselOrder {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(domain("BesselOrder::new", format!("nu = {nu}")));
        }
        Ok(Self(nu))
    }

    /// The order `d/2 - 1` attached to the vMF normalizer in dimension `d`.
    pub fn for_dimension(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(domain("BesselOrder::for_dimension", format!("d = {d}")));
        }
        Ok(Self(d as f64 / 2.0 - 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `true` when `log_bessel_i` uses the power series at `(nu, x)`.
pub fn uses_series(nu: f64, x: f64) -> bool {
    x < SERIES_SWITCH_X.max(nu / 2.0)
}

/// `log I_ν(x)`.
///
/// Returns `-inf` at `x = 0` for `ν > 0` (since `I_ν(0) = 0`) and `0` for
/// `ν = 0`.
pub fn log_bessel_i(nu: BesselOrder, x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(domain("log_bessel_i", format!("x = {x}")));
    }
    Ok(log_bessel_i_unchecked(nu.0, x))
}

pub(crate) fn log_bessel_i_unchecked(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if uses_series(nu, x) {
        nu * (x / 2.0).ln() - log_gamma_unchecked(nu + 1.0) + log_series_sum(nu, x)
    } else {
        log_bessel_i_asymptotic(nu, x)
    }
}

/// `ln Σ_m Π_{i<=m} (x/2)^2 / (i (i+ν))`, i.e. `log[I_ν(x) Γ(ν+1) / (x/2)^ν]`.
fn log_series_sum(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut log_scale = 0.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 0.0;
    loop {
        m += 1.0;
        term *= q / (m * (m + nu));
        sum += term;
        if sum > 1e280 {
            log_scale += sum.ln();
            term /= sum;
            sum = 1.0;
        }
        // past the peak the ratio is < 1 and the tail is geometric
        if term < sum * 1e-17 && q < m * (m + nu) {
            break;
        }
    }
    log_scale + sum.ln()
}

fn log_bessel_i_asymptotic(nu: f64, x: f64) -> f64 {
    if nu >= DEBYE_MIN_ORDER {
        return log_bessel_i_debye(nu, x);
    }
    let shift = (DEBYE_MIN_ORDER - nu).ceil();
    let top = nu + shift;
    let mut log_i = log_bessel_i_debye(top, x);
    // ratio I_{n+1}/I_n at the current order n
    let mut ratio = (log_bessel_i_debye(top + 1.0, x) - log_i).exp();
    let mut n = top;
    while n > nu + 0.5 {
        let step = ratio + 2.0 * n / x;
        log_i += step.ln();
        ratio = 1.0 / step;
        n -= 1.0;
    }
    log_i
}

/// Debye expansion `I_ν(νz) ~ e^{νη} / (sqrt(2πν) (1+z²)^{1/4}) Σ u_k(t)/ν^k`.
fn log_bessel_i_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let root = z.hypot(1.0);
    let t = 1.0 / root;
    let eta = root + (z / (1.0 + root)).ln();

    let polys = debye_polynomials();
    let mut sum = 0.0;
    let mut inv_pow = 1.0;
    for p in polys.iter() {
        sum += inv_pow * eval_poly(p, t);
        inv_pow /= nu;
    }
    nu * eta - 0.5 * (LN_2PI + nu.ln()) - 0.5 * root.ln() + sum.ln()
}

fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Coefficients (ascending powers of `t`) of the Debye polynomials, built
/// from `u_{k+1} = t²(1-t²)/2 · u_k' + 1/8 ∫_0^t (1-5s²) u_k(s) ds`.
fn debye_polynomials() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys: Vec<Vec<f64>> = vec![vec![1.0]];
        for k in 0..DEBYE_TERMS - 1 {
            let u = &polys[k];
            let mut next = vec![0.0; u.len() + 3];
            // t²(1-t²)/2 · u'
            for (p, &c) in u.iter().enumerate().skip(1) {
                let dc = c * p as f64;
                next[p + 1] += 0.5 * dc;
                next[p + 3] -= 0.5 * dc;
            }
            // (1/8) ∫ (1 - 5s²) u
            for (p, &c) in u.iter().enumerate() {
                next[p + 1] += 0.125 * c / (p as f64 + 1.0);
                next[p + 3] -= 0.625 * c / (p as f64 + 3.0);
            }
            polys.push(next);
        }
        polys
    })
}

/// `log c_d(κ)` for the vMF density `c_d(κ) exp(κ μᵀx)` on `S^{d-1}`, where
/// `c_d(κ) = κ^{d/2-1} / ((2π)^{d/2} I_{d/2-1}(κ))`.
///
/// At `κ = 0` this is minus the log surface area of the sphere. In the
/// series regime the `κ^ν` factors cancel analytically, so small `κ` is
/// continuous with the limit.
pub fn log_vmf_normalizer(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(domain("log_vmf_normalizer", format!("d = {d}")));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(domain("log_vmf_normalizer", format!("kappa = {kappa}")));
    }
    Ok(log_vmf_normalizer_unchecked(d, kappa))
}

pub(crate) fn log_vmf_normalizer_unchecked(d: usize, kappa: f64) -> f64 {
    let half_d = d as f64 / 2.0;
    let nu = half_d - 1.0;
    if uses_series(nu, kappa) {
        -half_d * LN_2PI + nu * LN_2 + log_gamma_unchecked(nu + 1.0) - log_series_sum(nu, kappa)
    } else {
        nu * kappa.ln() - half_d * LN_2PI - log_bessel_i_asymptotic(nu, kappa)
    }
}

/// Log surface area of the unit sphere `S^{d-1}`: `ln(2 π^{d/2} / Γ(d/2))`.
pub fn log_sphere_area(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(domain("log_sphere_area", format!("d = {d}")));
    }
    let half_d = d as f64 / 2.0;
    Ok(LN_2 + half_d * PI.ln() - log_gamma_unchecked(half_d))
}

/// Digamma `ψ(x)` for `x > 0`: upward recurrence to `x >= 10`, then the
/// asymptotic series with Bernoulli numbers through `B_14`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain("digamma", format!("x = {x}")));
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Σ B_2n / (2n x^2n), n = 1..7
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 / x - tail
}

/// `ln Γ(x)` for `x > 0`: Stirling series for `x >= 10`, recurrence below.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain("log_gamma", format!("x = {x}")));
    }
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 10.0 {
        let mut shifted = x;
        let mut prod = 1.0;
        while shifted < 10.0 {
            prod *= shifted;
            shifted += 1.0;
        }
        return stirling_log_gamma(shifted) - prod.ln();
    }
    stirling_log_gamma(x)
}

fn stirling_log_gamma(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Σ B_2n / (2n (2n-1) x^{2n-1}), n = 1..7
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2
                                        * (1.0 / 1188.0
                                            - inv2 * (691.0 / 360360.0 - inv2 / 156.0))))));
    (x - 0.5) * x.ln() - x + 0.5 * LN_2PI + series
}

/// `A_d(κ) = I_{d/2}(κ) / I_{d/2-1}(κ)`, the mean resultant length of a vMF
/// with concentration `κ` in dimension `d`.
pub fn bessel_ratio_a(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(domain("bessel_ratio_a", format!("d = {d}")));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(domain("bessel_ratio_a", format!("kappa = {kappa}")));
    }
    Ok(bessel_ratio_a_unchecked(d, kappa))
}

fn bessel_ratio_a_unchecked(d: usize, kappa: f64) -> f64 {
    let nu = d as f64 / 2.0 - 1.0;
    (log_bessel_i_unchecked(nu + 1.0, kappa) - log_bessel_i_unchecked(nu, kappa)).exp()
}

/// Solves `A_d(κ) = rbar` for `κ` by bisection on a bracket grown from the
/// bound `A_d(κ) < κ/d`.
pub fn invert_bessel_ratio(d: usize, rbar: f64) -> Result<f64> {
    if d < 2 {
        return Err(domain("invert_bessel_ratio", format!("d = {d}")));
    }
    if !(rbar > 0.0 && rbar < 1.0) {
        return Err(domain("invert_bessel_ratio", format!("rbar = {rbar}")));
    }
    let a = |k: f64| bessel_ratio_a_unchecked(d, k);

    let mut lo = rbar * d as f64;
    while a(lo) > rbar {
        lo *= 0.5;
    }
    let mut hi = lo.max(1.0) * 2.0;
    while a(hi) < rbar {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numerical(format!(
                "invert_bessel_ratio: no bracket for rbar = {rbar}"
            )));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if a(mid) < rbar {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a_lo, a_hi) = (a(lo), a(hi));
    Ok(if (rbar - a_lo).abs() <= (a_hi - rbar).abs() {
        lo
    } else {
        hi
    })
}

/// `log Σ exp(v)`; `-inf` for an empty slice or all `-inf` entries.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
