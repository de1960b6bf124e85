//! Rank-normalised split R-hat and autocorrelation-based effective sample
//! size.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::PosteriorDraws;

/// Splits every chain in half, dropping the middle draw of odd chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Normal scores of pooled average ranks, `Φ⁻¹((r - 3/8) / (S + 1/4))`.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    let s = all.len();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut k = 0;
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| {
                    let z = normal.inverse_cdf((ranks[k] - 0.375) / (s as f64 + 0.25));
                    k += 1;
                    z
                })
                .collect()
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic potential scale reduction on already split chains.
fn basic_r_hat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = if chains.len() > 1 { n * sample_var(&means) } else { 0.0 };
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

fn median(x: &mut [f64]) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// Rank-normalised split R-hat: the largest of the bulk, folded and raw
/// split values.
///
/// The raw value keeps widely separated chains from saturating near 1.8.
/// Constant input returns 1; chains that are each constant at different
/// values return infinity.
pub fn r_hat(chains: &[Vec<f64>]) -> f64 {
    let min_len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || min_len < 4 {
        return f64::NAN;
    }
    let chains: Vec<Vec<f64>> = chains.iter().map(|c| c[..min_len].to_vec()).collect();
    let split = split_chains(&chains);
    let bulk = basic_r_hat(&rank_normalize(&split));
    let mut pooled: Vec<f64> = split.iter().flatten().copied().collect();
    let med = median(&mut pooled);
    let folded: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = basic_r_hat(&rank_normalize(&folded));
    bulk.max(tail).max(basic_r_hat(&split))
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / n as f64
}

/// Effective sample size with Geyer's initial positive and monotone
/// sequence truncation, pooled over chains.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let m = chains.len();
    let total = (n * m) as f64;
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov_mean =
        |lag: usize| -> f64 { chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m as f64 };
    let nf = n as f64;
    let mean_var = acov_mean(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return total;
    }
    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov_mean(1)) / var_plus;
    rho[1] = rho_odd;
    let mut s = 1;
    while s + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov_mean(s + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov_mean(s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 {
        rho[max_s + 1] = rho_even;
    }
    let mut k = 1;
    while k + 3 <= max_s {
        if rho[k + 1] + rho[k + 2] > rho[k - 1] + rho[k] {
            rho[k + 1] = (rho[k - 1] + rho[k]) / 2.0;
            rho[k + 2] = rho[k + 1];
        }
        k += 2;
    }
    let tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1];
    total / tau.max(1.0 / total.log10())
}

/// ESS of the rank-normalised split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    let min_len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || min_len < 4 {
        return f64::NAN;
    }
    let chains: Vec<Vec<f64>> = chains.iter().map(|c| c[..min_len].to_vec()).collect();
    ess(&rank_normalize(&split_chains(&chains)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub r_hat: f64,
    pub ess_bulk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergences: usize,
    pub divergence_fraction: f64,
    pub mean_accept_stat: f64,
    pub max_tree_depth_hits: usize,
    pub step_sizes: Vec<f64>,
    pub parameters: Vec<ParameterDiagnostics>,
    pub max_r_hat: f64,
    pub min_ess_bulk: f64,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    /// Computes every diagnostic from the stored draws.
    pub fn from_draws(draws: &PosteriorDraws, max_tree_depth: usize) -> Self {
        use rayon::prelude::*;
        let parameters: Vec<ParameterDiagnostics> = (0..draws.dim())
            .into_par_iter()
            .map(|i| {
                let chains = draws.parameter(i);
                let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
                ParameterDiagnostics {
                    name: draws.names[i].clone(),
                    mean: mean(&pooled),
                    sd: if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { 0.0 },
                    r_hat: r_hat(&chains),
                    ess_bulk: ess_bulk(&chains),
                }
            })
            .collect();
        let total = draws.total_draws();
        let divergences = draws.n_divergent();
        let divergence_fraction = if total > 0 { divergences as f64 / total as f64 } else { 0.0 };
        let accept: Vec<f64> = draws.chains.iter().flat_map(|c| c.accept_stat.iter().copied()).collect();
        let max_tree_depth_hits =
            draws.chains.iter().flat_map(|c| c.tree_depth.iter()).filter(|d| **d >= max_tree_depth).count();
        let max_r_hat = parameters.iter().map(|p| p.r_hat).filter(|v| !v.is_nan()).fold(f64::NAN, f64::max);
        let min_ess_bulk = parameters.iter().map(|p| p.ess_bulk).filter(|v| !v.is_nan()).fold(f64::NAN, f64::min);
        let mut warnings = Vec::new();
        if divergence_fraction > 0.01 {
            warnings
                .push(format!("{divergences} of {total} transitions ({:.2}%) diverged", 100.0 * divergence_fraction));
        }
        if max_tree_depth_hits > 0 {
            warnings.push(format!("{max_tree_depth_hits} transitions hit the maximum tree depth"));
        }
        if max_r_hat > 1.01 {
            warnings.push(format!("max R-hat is {max_r_hat:.3}"));
        }
        Self {
            chains: draws.n_chains(),
            draws_per_chain: draws.n_draws(),
            divergences,
            divergence_fraction,
            mean_accept_stat: if accept.is_empty() { f64::NAN } else { mean(&accept) },
            max_tree_depth_hits,
            step_sizes: draws.chains.iter().map(|c| c.step_size).collect(),
            parameters,
            max_r_hat,
            min_ess_bulk,
            warnings,
        }
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterDiagnostics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}
