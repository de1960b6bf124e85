//! Posterior exploration: L-BFGS MAP estimation, NUTS with warmup
//! adaptation, and convergence and predictive diagnostics.

mod diagnostics;
mod map;
mod nuts;
mod predictive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RateConsistencyModel;

pub use diagnostics::{ess, ess_bulk, r_hat, Diagnostics, ParameterDiagnostics};
pub use map::{map_estimate, MapOptions, MapResult};
pub use nuts::{sample, ChainDraws, PosteriorDraws};
pub use predictive::{elpd_and_ppc, PredictiveCheck};

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density; writes the gradient into `grad`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; self.dim()];
        self.log_density_grad(x, &mut g)
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{}]", i + 1)).collect()
    }

    /// Maps an unconstrained point to reported parameter values.
    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

impl LogDensity for RateConsistencyModel {
    fn dim(&self) -> usize {
        RateConsistencyModel::dim(self)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.log_posterior_grad(x, grad)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.log_posterior(x)
    }

    fn param_names(&self) -> Vec<String> {
        self.layout().names()
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        self.layout().constrained_values(x)
    }
}

/// How chains pick their starting points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Uniform on `[-init_radius, init_radius]` per coordinate.
    Uniform,
    /// Start every chain from a MAP estimate jittered by `init_radius / 10`.
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub init: InitStrategy,
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl SamplerConfig {
    /// 8 chains, 500 warmup, 1000 sampling iterations, trees up to depth 12.
    pub fn paper() -> Self {
        Self {
            chains: 8,
            warmup_iters: 500,
            sampling_iters: 1000,
            target_accept: 0.8,
            max_tree_depth: 12,
            seed: 1,
            init: InitStrategy::Uniform,
            init_radius: 2.0,
        }
    }

    /// 2 chains, 200 warmup, 200 sampling iterations.
    pub fn desk() -> Self {
        Self { chains: 2, warmup_iters: 200, sampling_iters: 200, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(Error::Config("chains must be >= 1".into()));
        }
        if self.warmup_iters < 1 || self.sampling_iters < 1 {
            return Err(Error::Config("warmup_iters and sampling_iters must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!("target_accept must lie in (0, 1), got {}", self.target_accept)));
        }
        if self.max_tree_depth < 1 {
            return Err(Error::Config("max_tree_depth must be >= 1".into()));
        }
        if !(self.init_radius > 0.0) {
            return Err(Error::Config("init_radius must be > 0".into()));
        }
        Ok(())
    }
}
