//! Log densities of the prior families on their constrained scales.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

pub const BETA0_SD: f64 = 10.0;
pub const EFFECT_SD: f64 = 1.0;
pub const NU_RATE: f64 = 1.0;
pub const MAGNITUDE_SCALE: f64 = 1.0;
pub const LENGTHSCALE_SHAPE: f64 = 5.0;
pub const LENGTHSCALE_SCALE: f64 = 5.0;

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
}

pub fn exponential_logpdf(x: f64, rate: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    rate.ln() - rate * x
}

/// Cauchy(0, scale) truncated to `x > 0`.
pub fn half_cauchy_logpdf(x: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let u = x / scale;
    (2.0 / PI).ln() - scale.ln() - (u * u).ln_1p()
}

/// Inverse-gamma with the given shape and scale.
pub fn inv_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}
