//! The rate consistency model: symmetric intensity surfaces built from HSGP
//! random fields, a coarse-bracket negative-binomial likelihood with
//! fatigue and detail-proportion offsets, and the priors.

mod data;
mod likelihood;
mod params;
mod posterior;
pub mod prior;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use data::{detail_proportion, ObservationRow, ObservationTable, PopulationTable, Stratum};
pub use likelihood::nb_cell_loglik;
pub use params::{FixedEffects, ModelParameters, ParameterLayout};
pub use posterior::{intensity_surface, linear_predictor, CellInfo, FieldLayout, IntensityField, RateConsistencyModel};

use crate::error::{Error, Result};
use crate::kernels::{HsgpConfig, KernelFamily};

/// Nugget added to every fine-cell shape before aggregation.
pub const NUGGET: f64 = 1e-13;

/// Input space of the random fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parameterization {
    /// Fields over participant age × contact age.
    #[serde(rename = "age-age")]
    AgeAge,
    /// Fields over age difference × participant age.
    #[serde(rename = "diff-in-age")]
    DiffInAge,
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "age-age" | "ageage" => Ok(Parameterization::AgeAge),
            "diff-in-age" | "difference-in-age" | "diff" => Ok(Parameterization::DiffInAge),
            other => Err(Error::Config(format!("unknown parameterization {other:?}"))),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::AgeAge => "age-age",
            Parameterization::DiffInAge => "diff-in-age",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub parameterization: Parameterization,
    pub kernel: KernelFamily,
    /// Basis functions on the first field dimension.
    pub m1: usize,
    /// Basis functions on the second field dimension.
    pub m2: usize,
    pub boundary_factor: f64,
    /// Estimate fatigue effects `ρ_r` for repeat participants.
    pub fatigue: bool,
    /// Use `log S_ta^g` as an offset.
    pub detail_proportion: bool,
    /// Single wave, no wave, repeat or detail terms.
    pub cross_sectional: bool,
    /// Estimate `τ_1` as well instead of pinning it to zero.
    pub free_wave_effects: bool,
    /// One set of kernel hyperparameters per wave shared by all gender pairs.
    pub share_hyperparameters: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            parameterization: Parameterization::DiffInAge,
            kernel: HsgpConfig::default().kernel,
            m1: HsgpConfig::default().m1,
            m2: HsgpConfig::default().m2,
            boundary_factor: HsgpConfig::default().boundary_factor,
            fatigue: true,
            detail_proportion: true,
            cross_sectional: false,
            free_wave_effects: false,
            share_hyperparameters: false,
        }
    }
}

impl ModelConfig {
    /// Cross-sectional configuration used for the synthetic experiments.
    pub fn cross_sectional(parameterization: Parameterization, hsgp: HsgpConfig) -> Self {
        Self {
            parameterization,
            kernel: hsgp.kernel,
            m1: hsgp.m1,
            m2: hsgp.m2,
            boundary_factor: hsgp.boundary_factor,
            fatigue: false,
            detail_proportion: false,
            cross_sectional: true,
            free_wave_effects: false,
            share_hyperparameters: false,
        }
    }

    pub fn hsgp(&self) -> HsgpConfig {
        HsgpConfig { kernel: self.kernel, m1: self.m1, m2: self.m2, boundary_factor: self.boundary_factor }
    }

    pub fn validate(&self) -> Result<()> {
        self.hsgp().validate()
    }
}
