//! In-sample log pointwise predictive density and posterior predictive
//! interval coverage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::RateConsistencyModel;

/// Replicated counts are drawn from at most this many posterior draws.
const MAX_PPC_DRAWS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveCheck {
    /// `Σ_cells log mean_draws p(y_cell | θ)`.
    pub elpd: f64,
    /// Fraction of cells whose count lies in the central 95% predictive interval.
    pub ppc_coverage: f64,
    pub n_cells: usize,
    pub n_draws: usize,
    pub pointwise_elpd: Vec<f64>,
}

/// Gamma–Poisson draw from NB(shape `r`, overdispersion `nu`).
fn nb_draw(r: f64, nu: f64, rng: &mut impl Rng) -> u64 {
    let lambda = match Gamma::new(r, nu) {
        Ok(g) => g.sample(rng),
        Err(_) => 0.0,
    };
    if !(lambda > 0.0) {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => u64::MAX,
    }
}

/// Type-7 quantile of sorted integer samples.
fn quantile(sorted: &[u64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] as f64 + (h - lo as f64) * (sorted[hi] as f64 - sorted[lo] as f64)
}

pub fn elpd_and_ppc(model: &RateConsistencyModel, draws: &PosteriorDraws, seed: u64) -> Result<PredictiveCheck> {
    let all: Vec<&[f64]> = draws.iter_unconstrained().collect();
    if all.is_empty() {
        return Err(Error::Validation("no posterior draws".into()));
    }
    let n_cells = model.n_cells();
    let stride = all.len().div_ceil(MAX_PPC_DRAWS);
    let per_draw = all
        .par_iter()
        .enumerate()
        .map(|(k, x)| -> Result<(Vec<f64>, Option<Vec<u64>>)> {
            let ll = model.pointwise_loglik(x)?;
            let reps = if k % stride == 0 {
                let (shapes, nu) = model.cell_shapes(x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                Some(shapes.iter().map(|&r| nb_draw(r, nu, &mut rng)).collect())
            } else {
                None
            };
            Ok((ll, reps))
        })
        .collect::<Result<Vec<_>>>()?;

    let s = all.len() as f64;
    let pointwise_elpd: Vec<f64> = (0..n_cells)
        .map(|c| {
            let m = per_draw.iter().map(|d| d.0[c]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + (per_draw.iter().map(|d| (d.0[c] - m).exp()).sum::<f64>() / s).ln()
        })
        .collect();
    let cells = model.cells();
    let reps: Vec<&Vec<u64>> = per_draw.iter().filter_map(|d| d.1.as_ref()).collect();
    let inside = (0..n_cells)
        .filter(|&c| {
            let mut v: Vec<u64> = reps.iter().map(|r| r[c]).collect();
            v.sort_unstable();
            let y = cells[c].count as f64;
            quantile(&v, 0.025) <= y && y <= quantile(&v, 0.975)
        })
        .count();
    Ok(PredictiveCheck {
        elpd: pointwise_elpd.iter().sum(),
        ppc_coverage: if n_cells > 0 { inside as f64 / n_cells as f64 } else { 1.0 },
        n_cells,
        n_draws: all.len(),
        pointwise_elpd,
    })
}
