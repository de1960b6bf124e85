//! Mapping between the unconstrained parameter vector and named, constrained
//! model parameters.
//!
//! Layout: `β0 | τ | ρ_1..ρ_R | log ν | hyperparameter blocks | z blocks`.
//! Each hyperparameter block is `log σ1, log ℓ1, log σ2, log ℓ2`; blocks and
//! `z` blocks are ordered by wave, then by gender pair `MF, MM, FF`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GenderPair;
use crate::kernels::KernelHyperparams;

use super::prior;

/// Fixed effects on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub beta0: f64,
    /// Wave effects by wave position; the first is pinned to 0 unless all
    /// wave effects are free.
    pub tau: Vec<f64>,
    /// Fatigue effects by repeat count; `rho[0] == 0`.
    pub rho: Vec<f64>,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub fixed: FixedEffects,
    /// `[dim1, dim2]` hyperparameters per (wave, block).
    pub hyper: Vec<[KernelHyperparams; 2]>,
    /// HSGP coefficients per (wave, pair), each of length `m1 * m2`.
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub n_waves: usize,
    pub n_wave_effects: usize,
    pub free_wave_effects: bool,
    pub n_fatigue: usize,
    pub shared_hyperparameters: bool,
    pub m1: usize,
    pub m2: usize,
    tau_start: usize,
    rho_start: usize,
    nu_index: usize,
    hyper_start: usize,
    z_start: usize,
    dim: usize,
}

pub const HYPER_BLOCK: usize = 4;

impl ParameterLayout {
    pub fn new(
        n_waves: usize,
        wave_effects: bool,
        free_wave_effects: bool,
        n_fatigue: usize,
        shared_hyperparameters: bool,
        m1: usize,
        m2: usize,
    ) -> Self {
        let n_wave_effects = match (wave_effects, free_wave_effects) {
            (false, _) => 0,
            (true, true) => n_waves,
            (true, false) => n_waves.saturating_sub(1),
        };
        let tau_start = 1;
        let rho_start = tau_start + n_wave_effects;
        let nu_index = rho_start + n_fatigue;
        let hyper_start = nu_index + 1;
        let blocks = if shared_hyperparameters { 1 } else { 3 };
        let z_start = hyper_start + n_waves * blocks * HYPER_BLOCK;
        let dim = z_start + n_waves * 3 * m1 * m2;
        Self {
            n_waves,
            n_wave_effects,
            free_wave_effects: wave_effects && free_wave_effects,
            n_fatigue,
            shared_hyperparameters,
            m1,
            m2,
            tau_start,
            rho_start,
            nu_index,
            hyper_start,
            z_start,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks_per_wave(&self) -> usize {
        if self.shared_hyperparameters {
            1
        } else {
            3
        }
    }

    pub fn beta0_index(&self) -> usize {
        0
    }

    pub fn nu_index(&self) -> usize {
        self.nu_index
    }

    /// Position of the free wave effect for wave position `t`, if any.
    pub fn tau_index(&self, t: usize) -> Option<usize> {
        if self.n_wave_effects == 0 {
            return None;
        }
        if self.free_wave_effects {
            Some(self.tau_start + t)
        } else if t == 0 {
            None
        } else {
            Some(self.tau_start + t - 1)
        }
    }

    /// Position of `ρ_r` for `r >= 1`.
    pub fn rho_index(&self, r: usize) -> Option<usize> {
        if r == 0 || r > self.n_fatigue {
            None
        } else {
            Some(self.rho_start + r - 1)
        }
    }

    pub fn hyper_block(&self, t: usize, pair: GenderPair) -> usize {
        t * self.blocks_per_wave() + if self.shared_hyperparameters { 0 } else { pair.index() }
    }

    /// Start of the hyperparameter block `(log σ1, log ℓ1, log σ2, log ℓ2)`.
    pub fn hyper_index(&self, block: usize) -> usize {
        self.hyper_start + block * HYPER_BLOCK
    }

    pub fn n_hyper_blocks(&self) -> usize {
        self.n_waves * self.blocks_per_wave()
    }

    pub fn z_range(&self, t: usize, pair: GenderPair) -> std::ops::Range<usize> {
        let len = self.m1 * self.m2;
        let start = self.z_start + (t * 3 + pair.index()) * len;
        start..start + len
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("parameter vector has length {}, expected {}", x.len(), self.dim)));
        }
        Ok(())
    }

    pub fn constrain(&self, x: &[f64]) -> Result<ModelParameters> {
        self.check(x)?;
        let tau = (0..self.n_waves).map(|t| self.tau_index(t).map_or(0.0, |i| x[i])).collect();
        let rho = (0..=self.n_fatigue).map(|r| self.rho_index(r).map_or(0.0, |i| x[i])).collect();
        let fixed = FixedEffects { beta0: x[0], tau, rho, nu: x[self.nu_index].exp() };
        let hyper = (0..self.n_hyper_blocks())
            .map(|k| {
                let h = &x[self.hyper_index(k)..self.hyper_index(k) + HYPER_BLOCK];
                [
                    KernelHyperparams { magnitude: h[0].exp(), lengthscale: h[1].exp() },
                    KernelHyperparams { magnitude: h[2].exp(), lengthscale: h[3].exp() },
                ]
            })
            .collect();
        let z = (0..self.n_waves).flat_map(|t| GenderPair::ALL.map(|p| x[self.z_range(t, p)].to_vec())).collect();
        Ok(ModelParameters { fixed, hyper, z })
    }

    pub fn unconstrain(&self, p: &ModelParameters) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.dim];
        if p.fixed.tau.len() != self.n_waves
            || p.fixed.rho.len() != self.n_fatigue + 1
            || p.hyper.len() != self.n_hyper_blocks()
            || p.z.len() != self.n_waves * 3
        {
            return Err(Error::Shape("parameter blocks do not match the layout".into()));
        }
        if !(p.fixed.nu > 0.0) {
            return Err(Error::Domain(format!("nu must be > 0, got {}", p.fixed.nu)));
        }
        x[0] = p.fixed.beta0;
        for t in 0..self.n_waves {
            if let Some(i) = self.tau_index(t) {
                x[i] = p.fixed.tau[t];
            }
        }
        for r in 1..=self.n_fatigue {
            x[self.rho_index(r).unwrap()] = p.fixed.rho[r];
        }
        x[self.nu_index] = p.fixed.nu.ln();
        for (k, h) in p.hyper.iter().enumerate() {
            h[0].validate()?;
            h[1].validate()?;
            let i = self.hyper_index(k);
            x[i] = h[0].magnitude.ln();
            x[i + 1] = h[0].lengthscale.ln();
            x[i + 2] = h[1].magnitude.ln();
            x[i + 3] = h[1].lengthscale.ln();
        }
        for t in 0..self.n_waves {
            for pair in GenderPair::ALL {
                let src = &p.z[t * 3 + pair.index()];
                let range = self.z_range(t, pair);
                if src.len() != range.len() {
                    return Err(Error::Shape("coefficient block has wrong length".into()));
                }
                x[range].copy_from_slice(src);
            }
        }
        Ok(x)
    }

    /// Parameter names in vector order, on the constrained scale.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.dim];
        names[0] = "beta0".into();
        for t in 0..self.n_waves {
            if let Some(i) = self.tau_index(t) {
                names[i] = format!("tau[{}]", t + 1);
            }
        }
        for r in 1..=self.n_fatigue {
            names[self.rho_index(r).unwrap()] = format!("rho[{r}]");
        }
        names[self.nu_index] = "nu".into();
        for t in 0..self.n_waves {
            let pairs: Vec<Option<GenderPair>> = if self.shared_hyperparameters {
                vec![None]
            } else {
                GenderPair::ALL.iter().copied().map(Some).collect()
            };
            for p in pairs {
                let block = self.hyper_block(t, p.unwrap_or(GenderPair::MF));
                let tag = match p {
                    Some(p) => format!("{},{}", t + 1, p.label()),
                    None => format!("{}", t + 1),
                };
                let i = self.hyper_index(block);
                names[i] = format!("sigma1[{tag}]");
                names[i + 1] = format!("lengthscale1[{tag}]");
                names[i + 2] = format!("sigma2[{tag}]");
                names[i + 3] = format!("lengthscale2[{tag}]");
            }
            for p in GenderPair::ALL {
                for (k, i) in self.z_range(t, p).enumerate() {
                    names[i] = format!("z[{},{},{}]", t + 1, p.label(), k + 1);
                }
            }
        }
        names
    }

    /// Whether coordinate `i` is stored on the log scale.
    pub fn is_log_scale(&self, i: usize) -> bool {
        i == self.nu_index || (i >= self.hyper_start && i < self.z_start)
    }

    /// Unconstrained vector mapped elementwise to the constrained scale.
    pub fn constrained_values(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| if self.is_log_scale(i) { v.exp() } else { v }).collect()
    }

    /// Inverse of [`Self::constrained_values`].
    pub fn unconstrained_values(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.check(c)?;
        c.iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.is_log_scale(i) {
                    if v > 0.0 {
                        Ok(v.ln())
                    } else {
                        Err(Error::Domain(format!("positive parameter {i} has value {v}")))
                    }
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    /// Log prior density on the unconstrained scale, log-Jacobians included.
    /// Adds the gradient into `grad` when given.
    pub fn log_prior(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let mut lp = prior::normal_logpdf(x[0], 0.0, prior::BETA0_SD);
        if let Some(g) = grad.as_deref_mut() {
            g[0] -= x[0] / (prior::BETA0_SD * prior::BETA0_SD);
        }
        let n_effects = self.n_wave_effects + self.n_fatigue;
        for i in self.tau_start..self.tau_start + n_effects {
            lp += prior::normal_logpdf(x[i], 0.0, prior::EFFECT_SD);
            if let Some(g) = grad.as_deref_mut() {
                g[i] -= x[i] / (prior::EFFECT_SD * prior::EFFECT_SD);
            }
        }
        {
            let u = x[self.nu_index];
            let nu = u.exp();
            lp += prior::exponential_logpdf(nu, prior::NU_RATE) + u;
            if let Some(g) = grad.as_deref_mut() {
                g[self.nu_index] += 1.0 - prior::NU_RATE * nu;
            }
        }
        for k in 0..self.n_hyper_blocks() {
            let i = self.hyper_index(k);
            for (off, is_magnitude) in [(0, true), (1, false), (2, true), (3, false)] {
                let u = x[i + off];
                let v = u.exp();
                if is_magnitude {
                    let s = v / prior::MAGNITUDE_SCALE;
                    lp += prior::half_cauchy_logpdf(v, prior::MAGNITUDE_SCALE) + u;
                    if let Some(g) = grad.as_deref_mut() {
                        g[i + off] += 1.0 - 2.0 * s * s / (1.0 + s * s);
                    }
                } else {
                    let (a, b) = (prior::LENGTHSCALE_SHAPE, prior::LENGTHSCALE_SCALE);
                    lp += prior::inv_gamma_logpdf(v, a, b) + u;
                    if let Some(g) = grad.as_deref_mut() {
                        g[i + off] += -a + b / v;
                    }
                }
            }
        }
        let z = &x[self.z_start..];
        lp += z.iter().map(|&v| -0.5 * v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        if let Some(g) = grad {
            for (gi, &v) in g[self.z_start..].iter_mut().zip(z) {
                *gi -= v;
            }
        }
        lp
    }
}
