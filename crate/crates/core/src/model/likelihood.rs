//! Negative-binomial cell likelihood in shape/scale form.
//!
//! A cell with shape `r` and overdispersion `ν` has mean `rν` and variance
//! `rν(1+ν)`:
//!
//! `p(y) = Γ(y+r) / (Γ(r) y!) · (1/(1+ν))^r · (ν/(1+ν))^y`.
//!
//! Independent cells with a shared `ν` add their shapes, which is what makes
//! the coarse-bracket likelihood exact.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Counts up to this value use exact finite sums instead of gamma-function
/// differences.
const SMALL_COUNT: u64 = 32;

/// `ln Γ(y + r) - ln Γ(r)`.
pub(crate) fn ln_rising(y: u64, r: f64) -> f64 {
    if y <= SMALL_COUNT {
        (0..y).map(|k| (r + k as f64).ln()).sum()
    } else {
        ln_gamma(y as f64 + r) - ln_gamma(r)
    }
}

/// `ψ(y + r) - ψ(r)`.
pub(crate) fn digamma_rising(y: u64, r: f64) -> f64 {
    if y <= SMALL_COUNT {
        (0..y).map(|k| 1.0 / (r + k as f64)).sum()
    } else {
        digamma(y as f64 + r) - digamma(r)
    }
}

/// `ln y!`
pub(crate) fn ln_factorial(y: u64) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

/// Log-probability of `count` under a negative binomial with shape
/// `alpha_sum` and overdispersion `nu`.
pub fn nb_cell_loglik(count: i64, alpha_sum: f64, nu: f64) -> Result<f64> {
    if count < 0 {
        return Err(Error::Domain(format!("negative count {count}")));
    }
    if !(alpha_sum > 0.0) || !(nu > 0.0) {
        return Err(Error::Domain(format!("negative binomial needs shape > 0 and nu > 0, got {alpha_sum} and {nu}")));
    }
    let y = count as u64;
    Ok(nb_loglik_unchecked(y, alpha_sum, nu, ln_factorial(y)))
}

#[inline]
pub(crate) fn nb_loglik_unchecked(y: u64, r: f64, nu: f64, ln_y_fact: f64) -> f64 {
    let l1p = nu.ln_1p();
    ln_rising(y, r) - ln_y_fact - r * l1p + y as f64 * (nu.ln() - l1p)
}

/// Log-likelihood with partial derivatives `(ℓ, ∂ℓ/∂r, ∂ℓ/∂ν)`.
#[inline]
pub(crate) fn nb_loglik_grad(y: u64, r: f64, nu: f64, ln_y_fact: f64) -> (f64, f64, f64) {
    let l1p = nu.ln_1p();
    let yf = y as f64;
    let ll = ln_rising(y, r) - ln_y_fact - r * l1p + yf * (nu.ln() - l1p);
    let d_r = digamma_rising(y, r) - l1p;
    let d_nu = -r / (1.0 + nu) + yf / (nu * (1.0 + nu));
    (ll, d_r, d_nu)
}
