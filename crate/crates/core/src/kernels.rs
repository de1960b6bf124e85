//! Stationary covariance kernels, their spectral densities, the Hilbert-space
//! (HSGP) eigenbasis and Kronecker-structured evaluation of 2-D random fields.
//!
//! A 2-D field on the grid `x1 × x2` is `f = (L2 ⊗ L1) z`, where each factor
//! `L = Φ sqrt(Δ)` is built from Laplacian eigenfunctions on `[-L, L]` and the
//! kernel's spectral density at the square-rooted eigenvalues. The product is
//! never materialised; `vec(L1 Z L2ᵀ)` is computed instead.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    #[serde(rename = "se", alias = "squared-exponential")]
    SquaredExponential,
    #[serde(rename = "matern32")]
    Matern32,
    #[serde(rename = "matern52")]
    Matern52,
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "se" | "squared-exponential" | "rbf" => Ok(KernelFamily::SquaredExponential),
            "matern32" | "matern-32" | "matern-3/2" => Ok(KernelFamily::Matern32),
            "matern52" | "matern-52" | "matern-5/2" => Ok(KernelFamily::Matern52),
            other => Err(Error::Config(format!("unknown kernel family {other:?}"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::SquaredExponential => "se",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
        })
    }
}

/// Magnitude `σ` and lengthscale `ℓ` of a one-dimensional kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub magnitude: f64,
    pub lengthscale: f64,
}

impl KernelHyperparams {
    pub fn new(magnitude: f64, lengthscale: f64) -> Result<Self> {
        let hp = Self { magnitude, lengthscale };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Domain(format!("kernel magnitude must be > 0, got {}", self.magnitude)));
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::Domain(format!("kernel lengthscale must be > 0, got {}", self.lengthscale)));
        }
        Ok(())
    }
}

/// Covariance `k(x, x')`.
pub fn kernel_eval(family: KernelFamily, hp: &KernelHyperparams, x: f64, x2: f64) -> Result<f64> {
    hp.validate()?;
    let s2 = hp.magnitude * hp.magnitude;
    let r = (x - x2).abs() / hp.lengthscale;
    Ok(match family {
        KernelFamily::SquaredExponential => s2 * (-0.5 * r * r).exp(),
        KernelFamily::Matern32 => {
            let u = 3f64.sqrt() * r;
            s2 * (1.0 + u) * (-u).exp()
        }
        KernelFamily::Matern52 => {
            let u = 5f64.sqrt() * r;
            s2 * (1.0 + u + u * u / 3.0) * (-u).exp()
        }
    })
}

/// One-dimensional spectral density `S(ω)` under the convention
/// `k(r) = (1/2π) ∫ S(ω) e^{iωr} dω`.
pub fn spectral_density(family: KernelFamily, hp: &KernelHyperparams, omega: f64) -> Result<f64> {
    hp.validate()?;
    if omega < 0.0 || !omega.is_finite() {
        return Err(Error::Domain(format!("frequency must be >= 0, got {omega}")));
    }
    let (log_unit, _) = log_unit_spectral_density(family, hp.lengthscale, omega);
    Ok(hp.magnitude * hp.magnitude * log_unit.exp())
}

/// `log S(ω)` for `σ = 1` and its derivative with respect to `log ℓ`.
pub(crate) fn log_unit_spectral_density(family: KernelFamily, ell: f64, omega: f64) -> (f64, f64) {
    let w2 = omega * omega;
    match family {
        KernelFamily::SquaredExponential => {
            let q = ell * ell * w2;
            (0.5 * (2.0 * PI).ln() + ell.ln() - 0.5 * q, 1.0 - q)
        }
        KernelFamily::Matern32 => {
            let lam2 = 3.0 / (ell * ell);
            let t = lam2 + w2;
            (4f64.ln() + 1.5 * lam2.ln() - 2.0 * t.ln(), -3.0 + 4.0 * lam2 / t)
        }
        KernelFamily::Matern52 => {
            let lam2 = 5.0 / (ell * ell);
            let t = lam2 + w2;
            ((16.0f64 / 3.0).ln() + 2.5 * lam2.ln() - 3.0 * t.ln(), -5.0 + 6.0 * lam2 / t)
        }
    }
}

/// Tuning parameters of the 2-D HSGP prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsgpConfig {
    pub kernel: KernelFamily,
    pub m1: usize,
    pub m2: usize,
    pub boundary_factor: f64,
}

impl Default for HsgpConfig {
    fn default() -> Self {
        Self { kernel: KernelFamily::Matern52, m1: 40, m2: 20, boundary_factor: 1.5 }
    }
}

impl HsgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 || self.m2 == 0 {
            return Err(Error::Config("HSGP basis counts must be >= 1".into()));
        }
        if !(self.boundary_factor > 1.0 && self.boundary_factor.is_finite()) {
            return Err(Error::Config(format!("boundary_factor must be > 1, got {}", self.boundary_factor)));
        }
        Ok(())
    }
}

/// Laplacian eigenfunctions on `[-L, L]` evaluated at a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HsgpBasis {
    /// `phi[[i, j]] = φ_{j+1}(x_i)`.
    pub phi: Array2<f64>,
    /// `sqrt_lambda[j] = (j+1)π / 2L`.
    pub sqrt_lambda: Vec<f64>,
    pub boundary: f64,
}

impl HsgpBasis {
    pub fn n_points(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.sqrt_lambda.len()
    }

    /// `sqrt(S(√λ_j))` for each basis function.
    pub fn sqrt_spectral_weights(&self, family: KernelFamily, hp: &KernelHyperparams) -> Result<Vec<f64>> {
        self.sqrt_lambda.iter().map(|&w| spectral_density(family, hp, w).map(f64::sqrt)).collect()
    }
}

pub fn build_basis(inputs: &[f64], boundary: f64, m: usize) -> Result<HsgpBasis> {
    if m == 0 {
        return Err(Error::Config("basis count must be >= 1".into()));
    }
    if !(boundary > 0.0) {
        return Err(Error::Domain(format!("boundary must be > 0, got {boundary}")));
    }
    if let Some(x) = inputs.iter().find(|x| x.abs() >= boundary || !x.is_finite()) {
        return Err(Error::Domain(format!("input {x} lies outside the open HSGP domain (-{boundary}, {boundary})")));
    }
    let sqrt_lambda: Vec<f64> = (1..=m).map(|j| j as f64 * PI / (2.0 * boundary)).collect();
    let norm = (1.0 / boundary).sqrt();
    let phi = Array2::from_shape_fn((inputs.len(), m), |(i, j)| norm * (sqrt_lambda[j] * (inputs[i] + boundary)).sin());
    Ok(HsgpBasis { phi, sqrt_lambda, boundary })
}

/// Low-rank factor `L̃ = Φ sqrt(Δ)` with `L̃ L̃ᵀ ≈ K`.
pub fn approx_l_factor(basis: &HsgpBasis, hp: &KernelHyperparams, family: KernelFamily) -> Result<Array2<f64>> {
    let w = basis.sqrt_spectral_weights(family, hp)?;
    Ok(scale_columns(&basis.phi, &w))
}

pub(crate) fn scale_columns(phi: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let mut out = phi.clone();
    for (mut col, &s) in out.columns_mut().into_iter().zip(w) {
        col *= s;
    }
    out
}

/// Shape `(rows, inner, cols)` of one dense matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulShape {
    pub rows: usize,
    pub inner: usize,
    pub cols: usize,
}

impl MatmulShape {
    pub fn flops(&self) -> usize {
        2 * self.rows * self.inner * self.cols
    }
}

/// Reshapes `z` column-major into an `m1 × m2` matrix.
pub fn reshape_coefficients(z: &[f64], m1: usize, m2: usize) -> Result<ArrayView2<'_, f64>> {
    if z.len() != m1 * m2 {
        return Err(Error::Shape(format!(
            "coefficient vector has length {}, expected {m1}·{m2} = {}",
            z.len(),
            m1 * m2
        )));
    }
    ArrayView2::from_shape((m1, m2).f(), z).map_err(|e| Error::Shape(e.to_string()))
}

/// `(L2 ⊗ L1) z` returned as the `n1 × n2` matrix whose column-major
/// flattening is the field vector.
pub fn field_from_factors(l1: &Array2<f64>, l2: &Array2<f64>, z: &[f64]) -> Result<Array2<f64>> {
    field_from_factors_traced(l1, l2, z, &mut Vec::new())
}

/// Same as [`field_from_factors`] but records every dense product performed.
pub fn field_from_factors_traced(
    l1: &Array2<f64>,
    l2: &Array2<f64>,
    z: &[f64],
    trace: &mut Vec<MatmulShape>,
) -> Result<Array2<f64>> {
    let (m1, m2) = (l1.ncols(), l2.ncols());
    let zm = reshape_coefficients(z, m1, m2)?;
    let a = l1.dot(&zm);
    trace.push(MatmulShape { rows: l1.nrows(), inner: m1, cols: m2 });
    let f = a.dot(&l2.t());
    trace.push(MatmulShape { rows: l1.nrows(), inner: m2, cols: l2.nrows() });
    Ok(f)
}

/// Evaluates the HSGP field for the given bases and hyperparameters.
pub fn field_eval(
    basis1: &HsgpBasis,
    basis2: &HsgpBasis,
    hp1: &KernelHyperparams,
    hp2: &KernelHyperparams,
    family: KernelFamily,
    z: &[f64],
) -> Result<Array2<f64>> {
    let l1 = approx_l_factor(basis1, hp1, family)?;
    let l2 = approx_l_factor(basis2, hp2, family)?;
    field_from_factors(&l1, &l2, z)
}
