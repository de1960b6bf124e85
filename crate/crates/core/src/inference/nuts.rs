//! Multinomial no-U-turn sampler with the generalised U-turn criterion,
//! dual-averaging step size adaptation and windowed diagonal metric
//! adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::map::{map_estimate, MapOptions};
use super::{InitStrategy, LogDensity, SamplerConfig};
use crate::error::{Error, Result};

const MAX_DELTA_H: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;
const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;

/// Draws and per-transition statistics from one chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDraws {
    /// Unconstrained positions, one row per retained iteration.
    pub unconstrained: Vec<Vec<f64>>,
    /// Reported (constrained) parameter values.
    pub constrained: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<usize>,
    pub n_leapfrog: Vec<usize>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    /// Divergences seen during warmup.
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Retained draws per chain.
    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, |c| c.unconstrained.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.unconstrained.len()).sum()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Constrained values of parameter `i`, one vector per chain.
    pub fn parameter(&self, i: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.constrained.iter().map(|d| d[i]).collect()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Unconstrained draws from every chain in chain order.
    pub fn iter_unconstrained(&self) -> impl Iterator<Item = &[f64]> {
        self.chains.iter().flat_map(|c| c.unconstrained.iter().map(|v| v.as_slice()))
    }

    pub fn n_divergent(&self) -> usize {
        self.chains.iter().map(|c| c.divergent.iter().filter(|d| **d).count()).sum()
    }
}

#[derive(Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Hamiltonian<'a, D: ?Sized> {
    target: &'a D,
    inv_metric: Vec<f64>,
}

impl<D: LogDensity + ?Sized> Hamiltonian<'_, D> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(pi, m)| pi * pi * m).sum::<f64>()
    }

    fn energy(&self, s: &State) -> f64 {
        let h = -s.logp + self.kinetic(&s.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(pi, m)| pi * m).collect()
    }

    fn sample_momentum(&self, s: &mut State, rng: &mut ChaCha8Rng) {
        for (p, m) in s.p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = rng.sample(StandardNormal);
            *p = z / m.sqrt();
        }
    }

    /// Leapfrog step; failed evaluations leave `logp = -inf`.
    fn leapfrog(&self, s: &mut State, eps: f64) {
        for (p, g) in s.p.iter_mut().zip(&s.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in s.q.iter_mut().zip(&s.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        match self.target.log_density_grad(&s.q, &mut s.grad) {
            Ok(lp) if lp.is_finite() && s.grad.iter().all(|g| g.is_finite()) => {
                s.logp = lp;
                for (p, g) in s.p.iter_mut().zip(&s.grad) {
                    *p += 0.5 * eps * g;
                }
            }
            _ => {
                s.logp = f64::NEG_INFINITY;
                s.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct Transition {
    accept_stat: f64,
    depth: usize,
    n_leapfrog: usize,
    divergent: bool,
}

struct TreeBuilder<'a, 'b, D: ?Sized> {
    ham: &'b Hamiltonian<'a, D>,
    rng: &'b mut ChaCha8Rng,
    eps: f64,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Subtree boundary momenta and their sharp versions.
struct Edge {
    p: Vec<f64>,
    p_sharp: Vec<f64>,
}

impl<D: LogDensity + ?Sized> TreeBuilder<'_, '_, D> {
    /// Extends `z` by `2^depth` leapfrog steps in direction `sign`.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        begin: &mut Edge,
        end: &mut Edge,
        rho: &mut [f64],
        log_sum_weight: &mut f64,
        sign: f64,
    ) -> bool {
        if depth == 0 {
            self.ham.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.ham.energy(z);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            let ps = self.ham.p_sharp(&z.p);
            begin.p.clone_from(&z.p);
            begin.p_sharp.clone_from(&ps);
            end.p.clone_from(&z.p);
            end.p_sharp = ps;
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            return !self.divergent;
        }
        let n = z.q.len();
        let mut init_end = Edge { p: vec![0.0; n], p_sharp: vec![0.0; n] };
        let mut rho_init = vec![0.0; n];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build(depth - 1, z, z_propose, begin, &mut init_end, &mut rho_init, &mut lsw_init, sign) {
            return false;
        }
        let mut z_propose_final = z.clone();
        let mut final_begin = Edge { p: vec![0.0; n], p_sharp: vec![0.0; n] };
        let mut rho_final = vec![0.0; n];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build(depth - 1, z, &mut z_propose_final, &mut final_begin, end, &mut rho_final, &mut lsw_final, sign)
        {
            return false;
        }
        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }
        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(&begin.p_sharp, &end.p_sharp, &rho_subtree);
        let rho_ext = add(&rho_init, &final_begin.p);
        persist &= criterion(&begin.p_sharp, &final_begin.p_sharp, &rho_ext);
        let rho_ext = add(&rho_final, &init_end.p);
        persist &= criterion(&init_end.p_sharp, &end.p_sharp, &rho_ext);
        persist
    }
}

fn transition<D: LogDensity + ?Sized>(
    ham: &Hamiltonian<'_, D>,
    z: &mut State,
    eps: f64,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    ham.sample_momentum(z, rng);
    let n = z.q.len();
    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut z_sample = z.clone();
    let mut z_propose = z.clone();
    let ps = ham.p_sharp(&z.p);
    let edge = || Edge { p: z.p.clone(), p_sharp: ps.clone() };
    let (mut fwd_bck, mut fwd_fwd, mut bck_fwd, mut bck_bck) = (edge(), edge(), edge(), edge());
    let mut rho = z.p.clone();
    let mut log_sum_weight = 0.0;
    let h0 = ham.energy(z);
    let mut tb = TreeBuilder { ham, rng, eps, h0, n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };
    let mut depth = 0;
    while depth < max_depth {
        let mut rho_fwd = vec![0.0; n];
        let mut rho_bck = vec![0.0; n];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if tb.rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            bck_fwd.p.clone_from(&fwd_bck.p);
            bck_fwd.p_sharp.clone_from(&fwd_bck.p_sharp);
            let v = tb.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut fwd_bck,
                &mut fwd_fwd,
                &mut rho_fwd,
                &mut lsw_subtree,
                1.0,
            );
            v
        } else {
            rho_fwd.clone_from(&rho);
            fwd_bck.p.clone_from(&bck_fwd.p);
            fwd_bck.p_sharp.clone_from(&bck_fwd.p_sharp);
            tb.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut bck_fwd,
                &mut bck_bck,
                &mut rho_bck,
                &mut lsw_subtree,
                -1.0,
            )
        };
        if !valid {
            break;
        }
        depth += 1;
        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (lsw_subtree - log_sum_weight).exp();
            if tb.rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
        rho = add(&rho_bck, &rho_fwd);
        let mut persist = criterion(&bck_bck.p_sharp, &fwd_fwd.p_sharp, &rho);
        let rho_ext = add(&rho_bck, &fwd_bck.p);
        persist &= criterion(&bck_bck.p_sharp, &fwd_bck.p_sharp, &rho_ext);
        let rho_ext = add(&rho_fwd, &bck_fwd.p);
        persist &= criterion(&bck_fwd.p_sharp, &fwd_fwd.p_sharp, &rho_ext);
        if !persist {
            break;
        }
    }
    *z = z_sample;
    Transition {
        accept_stat: if tb.n_leapfrog > 0 { tb.sum_metro_prob / tb.n_leapfrog as f64 } else { 0.0 },
        depth,
        n_leapfrog: tb.n_leapfrog,
        divergent: tb.divergent,
    }
}

/// Doubles or halves `eps` until one leapfrog step crosses acceptance 0.8.
fn init_step_size<D: LogDensity + ?Sized>(
    ham: &Hamiltonian<'_, D>,
    z: &State,
    mut eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let threshold = 0.8f64.ln();
    let mut direction = 0.0;
    loop {
        let mut s = z.clone();
        ham.sample_momentum(&mut s, rng);
        let h0 = ham.energy(&s);
        ham.leapfrog(&mut s, eps);
        let delta = h0 - ham.energy(&s);
        if direction == 0.0 {
            direction = if delta > threshold { 1.0 } else { -1.0 };
        } else if (direction > 0.0 && !(delta > threshold)) || (direction < 0.0 && !(delta < threshold)) {
            return Ok(eps);
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(Error::Sampler("step size diverged upwards; the posterior looks improper".into()));
        }
        if eps < 1e-300 {
            return Err(Error::Sampler("step size collapsed to zero".into()));
        }
    }
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        Self { mu: (10.0 * eps).ln(), s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Slow-adaptation windows `[start, end)` over warmup iterations.
fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    let (init, term, base) = if INIT_BUFFER + TERM_BUFFER + BASE_WINDOW > warmup {
        let init = (0.15 * warmup as f64) as usize;
        let term = (0.1 * warmup as f64) as usize;
        (init, term, warmup.saturating_sub(init + term))
    } else {
        (INIT_BUFFER, TERM_BUFFER, BASE_WINDOW)
    };
    let end_slow = warmup - term;
    let mut windows = Vec::new();
    if base == 0 || warmup < 20 {
        return windows;
    }
    let mut start = init;
    let mut size = base;
    while start < end_slow {
        let mut end = start + size;
        if end + 2 * size > end_slow {
            end = end_slow;
        }
        windows.push((start, end));
        start = end;
        size *= 2;
    }
    windows
}

/// Welford accumulator of per-coordinate variances.
struct VarianceEstimator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    fn new(dim: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk towards `1e-3`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn initial_state<D: LogDensity + ?Sized>(
    target: &D,
    config: &SamplerConfig,
    center: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<State> {
    let n = target.dim();
    let radius = match center {
        Some(_) => config.init_radius / 10.0,
        None => config.init_radius,
    };
    let mut last = String::new();
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..n).map(|i| center.map_or(0.0, |c| c[i]) + rng.random_range(-radius..=radius)).collect();
        let mut grad = vec![0.0; n];
        match target.log_density_grad(&q, &mut grad) {
            Ok(lp) if lp.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                return Ok(State { q, p: vec![0.0; n], grad, logp: lp });
            }
            Ok(lp) => last = format!("log density {lp}"),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Sampler(format!("no finite starting point after {INIT_ATTEMPTS} attempts; last failure: {last}")))
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn run_chain<D: LogDensity + ?Sized>(
    target: &D,
    config: &SamplerConfig,
    chain: usize,
    center: Option<&[f64]>,
) -> Result<ChainDraws> {
    let mut rng = chain_rng(config.seed, chain);
    let n = target.dim();
    let mut z = initial_state(target, config, center, &mut rng)?;
    let mut ham = Hamiltonian { target, inv_metric: vec![1.0; n] };
    let mut eps = init_step_size(&ham, &z, 1.0, &mut rng)?;
    let mut da = DualAveraging::new(eps, config.target_accept);
    let windows = adaptation_windows(config.warmup_iters);
    let mut window_idx = 0;
    let mut estimator = VarianceEstimator::new(n);
    let total = config.warmup_iters + config.sampling_iters;
    let mut out = ChainDraws {
        unconstrained: Vec::with_capacity(config.sampling_iters),
        constrained: Vec::with_capacity(config.sampling_iters),
        log_density: Vec::with_capacity(config.sampling_iters),
        accept_stat: Vec::with_capacity(config.sampling_iters),
        divergent: Vec::with_capacity(config.sampling_iters),
        tree_depth: Vec::with_capacity(config.sampling_iters),
        n_leapfrog: Vec::with_capacity(config.sampling_iters),
        step_size: eps,
        inv_metric: Vec::new(),
        warmup_divergences: 0,
    };
    for iter in 0..total {
        let t = transition(&ham, &mut z, eps, config.max_tree_depth, &mut rng);
        if iter < config.warmup_iters {
            out.warmup_divergences += t.divergent as usize;
            eps = da.update(t.accept_stat);
            if let Some(&(start, end)) = windows.get(window_idx) {
                if iter >= start && iter < end {
                    estimator.add(&z.q);
                }
                if iter + 1 == end {
                    ham.inv_metric = estimator.regularized();
                    estimator = VarianceEstimator::new(n);
                    window_idx += 1;
                    eps = init_step_size(&ham, &z, eps, &mut rng)?;
                    da = DualAveraging::new(eps, config.target_accept);
                }
            }
            if iter + 1 == config.warmup_iters {
                eps = da.final_step_size();
            }
            continue;
        }
        out.constrained.push(target.constrain(&z.q));
        out.unconstrained.push(z.q.clone());
        out.log_density.push(z.logp);
        out.accept_stat.push(t.accept_stat);
        out.divergent.push(t.divergent);
        out.tree_depth.push(t.depth);
        out.n_leapfrog.push(t.n_leapfrog);
    }
    if out.divergent.iter().all(|d| *d) {
        return Err(Error::Sampler(format!("chain {} diverged on every transition", chain + 1)));
    }
    out.step_size = eps;
    out.inv_metric = ham.inv_metric;
    Ok(out)
}

/// Runs `config.chains` chains in parallel.
pub fn sample<D: LogDensity + ?Sized>(target: &D, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let center = match config.init {
        InitStrategy::Uniform => None,
        InitStrategy::Map => {
            let mut rng = chain_rng(config.seed, 0);
            let start = initial_state(target, config, None, &mut rng)?;
            Some(map_estimate(target, &start.q, MapOptions { max_iters: 500, ..MapOptions::default() })?.x)
        }
    };
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, c, center.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws { names: target.param_names(), chains })
}
