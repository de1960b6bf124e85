//! Limited-memory BFGS ascent with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::Serialize;

use super::LogDensity;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    /// Stop once `max |∇f| < grad_tol`.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Number of stored curvature pairs.
    pub history: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iters: 2000, history: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iteration.
    pub trace: Vec<f64>,
}

fn inf_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ascent direction `H ∇f` from the two-loop recursion.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; pairs.len()];
    for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
        alpha[k] = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha[k] * yi;
        }
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (k, (s, y, rho)) in pairs.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha[k] - beta) * si;
        }
    }
    q
}

/// Maximises `target` starting from `init`.
///
/// Works on `-f` internally, so curvature pairs use `y = ∇f_old - ∇f_new`.
/// Returns the best point found; `converged` reports whether the gradient
/// tolerance was met.
pub fn map_estimate<D: LogDensity + ?Sized>(target: &D, init: &[f64], opts: MapOptions) -> Result<MapResult> {
    let n = target.dim();
    if init.len() != n {
        return Err(Error::Shape(format!("init has length {}, expected {n}", init.len())));
    }
    let mut x = init.to_vec();
    let mut g = vec![0.0; n];
    let mut f = target.log_density_grad(&x, &mut g)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer(format!("objective not finite at the initial point ({f})")));
    }
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut g_new = vec![0.0; n];
    let mut stalled = false;
    while iterations < opts.max_iters && inf_norm(&g) >= opts.grad_tol {
        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&dir, &g);
        if !(slope > 0.0) {
            pairs.clear();
            dir = g.clone();
            slope = dot(&g, &g);
        }
        let mut step = if pairs.is_empty() { 1.0 / inf_norm(&dir).max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let x_try: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            // Non-finite or failing evaluations shrink the step.
            if let Ok(f_try) = target.log_density_grad(&x_try, &mut g_new) {
                if f_try.is_finite() && g_new.iter().all(|v| v.is_finite()) && f_try >= f + 1e-4 * step * slope {
                    accepted = Some((x_try, f_try));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if pairs.is_empty() {
                stalled = true;
                break;
            }
            pairs.clear();
            continue;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == opts.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        std::mem::swap(&mut g, &mut g_new);
        iterations += 1;
        trace.push(f);
    }
    let grad_norm = inf_norm(&g);
    if stalled && iterations == 0 && grad_norm >= opts.grad_tol {
        return Err(Error::Optimizer(format!(
            "line search made no progress from the initial point; objective {f}, gradient norm {grad_norm}"
        )));
    }
    Ok(MapResult { x, log_density: f, grad_norm, iterations, converged: grad_norm < opts.grad_tol, trace })
}
