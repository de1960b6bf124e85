//! Bayesian estimation of age- and gender-specific social contact intensities
//! from longitudinal contact surveys with coarse contact-age brackets.

pub mod error;
pub mod grid;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod postprocess;
pub mod simulate;

pub use error::{Error, Result};
pub mod io;
