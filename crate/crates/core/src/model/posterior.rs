//! Intensity surfaces and the joint log posterior with its exact gradient.
//!
//! The gradient is written out by hand in reverse order of the forward pass:
//! cell likelihood → `log m` → (`β0`, `τ_t`, field values) → HSGP
//! coefficients and the spectral weights that carry `σ` and `ℓ`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::{AgeGrid, Direction, Gender, GenderPair, ScaledAxis};
use crate::kernels::{build_basis, log_unit_spectral_density, reshape_coefficients, scale_columns, HsgpBasis};

use super::data::{ObservationTable, PopulationTable};
use super::likelihood::{ln_factorial, nb_loglik_grad, nb_loglik_unchecked};
use super::params::{FixedEffects, ModelParameters, ParameterLayout};
use super::{ModelConfig, Parameterization, NUGGET};

/// Where each `(direction, a, b)` intensity reads its field value.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLayout {
    parameterization: Parameterization,
    grid: AgeGrid,
    n1: usize,
    n2: usize,
    /// Row-major offset into the `n1 × n2` field, laid out `[dir][a][b]`.
    index: Vec<usize>,
}

impl FieldLayout {
    pub fn new(parameterization: Parameterization, grid: AgeGrid) -> Self {
        let nb = grid.len();
        let (n1, n2) = match parameterization {
            Parameterization::AgeAge => (nb, nb),
            Parameterization::DiffInAge => (2 * nb - 1, nb),
        };
        // Field coordinate of the ordered age pair (p, q).
        let coord = |p: usize, q: usize| -> (usize, usize) {
            match parameterization {
                Parameterization::AgeAge => (p, q),
                Parameterization::DiffInAge => (q + nb - 1 - p, p),
            }
        };
        let mut index = vec![0; 4 * nb * nb];
        for dir in Direction::ALL {
            for a in 0..nb {
                for b in 0..nb {
                    let (i, j) = match dir {
                        Direction::MF => coord(a, b),
                        Direction::FM => coord(b, a),
                        Direction::MM | Direction::FF => {
                            if a <= b {
                                coord(a, b)
                            } else {
                                coord(b, a)
                            }
                        }
                    };
                    index[(dir.index() * nb + a) * nb + b] = i * n2 + j;
                }
            }
        }
        Self { parameterization, grid, n1, n2, index }
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn grid(&self) -> AgeGrid {
        self.grid
    }

    /// Field grid shape `(n1, n2)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    /// Field coordinate `(i, j)` read by `m[dir][a][b]` (grid indices).
    pub fn coordinate(&self, dir: Direction, a: usize, b: usize) -> (usize, usize) {
        let nb = self.grid.len();
        let flat = self.index[(dir.index() * nb + a) * nb + b];
        (flat / self.n2, flat % self.n2)
    }

    fn flat(&self, dir: usize, a: usize, b: usize) -> usize {
        let nb = self.grid.len();
        self.index[(dir * nb + a) * nb + b]
    }

    /// Number of distinct field values the directions of `pair` read.
    pub fn distinct_coordinates(&self, pair: GenderPair) -> usize {
        let nb = self.grid.len();
        let mut seen = std::collections::HashSet::new();
        for dir in Direction::ALL.into_iter().filter(|d| d.pair() == pair) {
            for a in 0..nb {
                for b in 0..nb {
                    seen.insert(self.flat(dir.index(), a, b));
                }
            }
        }
        seen.len()
    }

    /// Integer inputs along both field dimensions.
    pub fn raw_axes(&self) -> (Vec<i64>, Vec<i64>) {
        let lo = self.grid.min_age() as i64;
        let hi = self.grid.max_age() as i64;
        let ages: Vec<i64> = (lo..=hi).collect();
        match self.parameterization {
            Parameterization::AgeAge => (ages.clone(), ages),
            Parameterization::DiffInAge => {
                let m = hi - lo;
                ((-m..=m).collect(), ages)
            }
        }
    }

    /// Input axes for both field dimensions, centred on their midpoints.
    pub fn scaled_axes(&self) -> (ScaledAxis, ScaledAxis) {
        let (r1, r2) = self.raw_axes();
        (ScaledAxis::centered(r1[0], *r1.last().unwrap()), ScaledAxis::centered(r2[0], *r2.last().unwrap()))
    }
}

/// Contact intensities `m_tab^gh` laid out `[wave][direction][a][b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityField {
    grid: AgeGrid,
    n_waves: usize,
    values: Vec<f64>,
}

impl IntensityField {
    pub fn new(grid: AgeGrid, n_waves: usize, values: Vec<f64>) -> Result<Self> {
        let nb = grid.len();
        if values.len() != n_waves * 4 * nb * nb {
            return Err(Error::Shape(format!(
                "intensity field needs {} values, got {}",
                n_waves * 4 * nb * nb,
                values.len()
            )));
        }
        Ok(Self { grid, n_waves, values })
    }

    /// The same age × age matrix for every wave and direction.
    pub fn from_matrix(grid: AgeGrid, n_waves: usize, matrix: &Array2<f64>) -> Result<Self> {
        let nb = grid.len();
        if matrix.dim() != (nb, nb) {
            return Err(Error::Shape(format!("matrix is {:?}, grid has {nb} ages", matrix.dim())));
        }
        let one: Vec<f64> = matrix.iter().copied().collect();
        let values = std::iter::repeat_n(one, n_waves * 4).flatten().collect();
        Self::new(grid, n_waves, values)
    }

    pub fn grid(&self) -> AgeGrid {
        self.grid
    }

    pub fn n_waves(&self) -> usize {
        self.n_waves
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offset(&self, t: usize, dir: Direction, a: usize, b: usize) -> usize {
        let nb = self.grid.len();
        ((t * 4 + dir.index()) * nb + a) * nb + b
    }

    /// Intensity at wave position `t`, grid indices `a`, `b`.
    pub fn get(&self, t: usize, dir: Direction, a: usize, b: usize) -> f64 {
        self.values[self.offset(t, dir, a, b)]
    }

    pub fn set(&mut self, t: usize, dir: Direction, a: usize, b: usize, v: f64) {
        let o = self.offset(t, dir, a, b);
        self.values[o] = v;
    }

    /// Contact rate `c_ab^gh = m_ab^gh / P_b^h`.
    pub fn rate(&self, t: usize, dir: Direction, a: usize, b: usize, pop: &PopulationTable) -> f64 {
        self.get(t, dir, a, b) / pop.get(b, dir.contact())
    }

    /// Largest rate asymmetry `max |c^gh_ab - c^hg_ba|` over all cells.
    pub fn max_rate_asymmetry(&self, pop: &PopulationTable) -> f64 {
        let nb = self.grid.len();
        let mut worst = 0f64;
        for t in 0..self.n_waves {
            for dir in Direction::ALL {
                for a in 0..nb {
                    for b in 0..nb {
                        let lhs = self.rate(t, dir, a, b, pop);
                        let rhs = self.rate(t, dir.reverse(), b, a, pop);
                        worst = worst.max((lhs - rhs).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Basis functions used to carry a field's level in sampler coordinates.
const LEVEL_MODES: usize = 3;

/// Least-squares coefficients of the constant function on the first
/// `k` basis columns; later coefficients are omitted.
fn constant_fit(phi: &Array2<f64>, k: usize) -> Vec<f64> {
    let k = k.min(phi.ncols());
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, row) in a.iter_mut().enumerate() {
        for c in 0..k {
            row[c] = phi.column(r).dot(&phi.column(c));
        }
        row[k] = phi.column(r).sum();
    }
    for p in 0..k {
        let piv = (p..k).max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs())).expect("pivot");
        a.swap(p, piv);
        for r in 0..k {
            if r != p {
                let f = a[r][p] / a[p][p];
                for c in p..=k {
                    a[r][c] -= f * a[p][c];
                }
            }
        }
    }
    (0..k).map(|r| a[r][k] / a[r][r]).collect()
}

/// Expected reported contacts `μ = m · exp(ρ_r) · N · S`.
pub fn linear_predictor(intensity: f64, rho: f64, participants: f64, detail: f64) -> Result<f64> {
    if !(detail > 0.0) {
        return Err(Error::Domain(format!("detail proportion must be > 0, got {detail}")));
    }
    if !(participants > 0.0) {
        return Err(Error::Domain(format!("participant count must be > 0, got {participants}")));
    }
    Ok(intensity * rho.exp() * participants * detail)
}

/// Builds the four directional intensity surfaces of one wave from the
/// three fields `[MF, MM, FF]` evaluated on `layout`'s grid.
pub fn intensity_surface(
    layout: &FieldLayout,
    t: usize,
    fields: [&Array2<f64>; 3],
    fixed: &FixedEffects,
    pop: &PopulationTable,
) -> Result<IntensityField> {
    let nb = layout.grid.len();
    for f in fields {
        if f.dim() != layout.shape() {
            return Err(Error::Shape(format!("field is {:?}, layout expects {:?}", f.dim(), layout.shape())));
        }
    }
    let base = fixed.beta0 + fixed.tau.get(t).copied().unwrap_or(0.0);
    let mut values = vec![0.0; 4 * nb * nb];
    for dir in Direction::ALL {
        let f = fields[dir.pair().index()];
        for a in 0..nb {
            for b in 0..nb {
                let (i, j) = layout.coordinate(dir, a, b);
                values[(dir.index() * nb + a) * nb + b] = (base + f[[i, j]] + pop.get(b, dir.contact()).ln()).exp();
            }
        }
    }
    IntensityField::new(layout.grid, 1, values)
}

/// Description of one likelihood cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellInfo {
    pub wave: u32,
    pub repeat: u32,
    pub age: u32,
    pub gender: Gender,
    pub bracket: usize,
    pub contact_gender: Gender,
    pub count: u64,
}

#[derive(Debug, Clone)]
struct Cell {
    t: usize,
    repeat: usize,
    dir: usize,
    a: usize,
    b_lo: usize,
    b_hi: usize,
    count: u64,
    log_offset: f64,
    ln_y_fact: f64,
    info: CellInfo,
}

struct FieldCache {
    w1: Vec<f64>,
    w2: Vec<f64>,
    dlog1: Vec<f64>,
    dlog2: Vec<f64>,
    a: Array2<f64>,
    f: Array2<f64>,
}

/// Full joint posterior of the rate consistency model for one dataset.
#[derive(Debug, Clone)]
pub struct RateConsistencyModel {
    config: ModelConfig,
    layout: ParameterLayout,
    fields: FieldLayout,
    basis1: HsgpBasis,
    basis2: HsgpBasis,
    level1: Vec<f64>,
    level2: Vec<f64>,
    pop: PopulationTable,
    log_pop: Vec<[f64; 2]>,
    waves: Vec<u32>,
    cells: Vec<Cell>,
}

impl RateConsistencyModel {
    pub fn new(config: ModelConfig, table: &ObservationTable, pop: &PopulationTable) -> Result<Self> {
        config.validate()?;
        let grid = table.grid();
        if pop.grid() != grid {
            return Err(Error::Config("population and observation grids differ".into()));
        }
        if grid.len() < 2 {
            return Err(Error::Config("the age grid needs at least two ages".into()));
        }
        let mut waves = table.waves();
        if waves.is_empty() {
            waves.push(1);
        }
        if config.cross_sectional && waves.len() > 1 {
            return Err(Error::Config(format!("cross-sectional model given {} waves", waves.len())));
        }
        let n_fatigue = if config.fatigue && !config.cross_sectional { table.max_repeat() as usize } else { 0 };
        let layout = ParameterLayout::new(
            waves.len(),
            !config.cross_sectional,
            config.free_wave_effects,
            n_fatigue,
            config.share_hyperparameters,
            config.m1,
            config.m2,
        );
        let fields = FieldLayout::new(config.parameterization, grid);
        let (ax1, ax2) = fields.scaled_axes();
        let (r1, r2) = fields.raw_axes();
        let p1: Vec<f64> = r1.iter().map(|&x| ax1.scaled_input(x as f64)).collect();
        let p2: Vec<f64> = r2.iter().map(|&x| ax2.scaled_input(x as f64)).collect();
        let basis1 = build_basis(&p1, ax1.boundary(config.boundary_factor), config.m1)?;
        let basis2 = build_basis(&p2, ax2.boundary(config.boundary_factor), config.m2)?;
        let level1 = constant_fit(&basis1.phi, LEVEL_MODES);
        let level2 = constant_fit(&basis2.phi, LEVEL_MODES);

        let nb = grid.len();
        let use_detail = config.detail_proportion && !config.cross_sectional;
        let mut cells = Vec::with_capacity(table.rows().len());
        for row in table.rows() {
            let s = row.stratum;
            let t = waves.iter().position(|&w| w == s.wave).expect("wave listed");
            let a = grid.index_of(s.age as i64)?;
            let range = table.bracketing().member_indices(row.bracket);
            let n = table.n_participants(&s) as f64;
            let mut log_offset = n.ln();
            if use_detail {
                log_offset += table.detail(s.wave, s.age, s.gender).ln();
            }
            debug_assert!(range.end <= nb);
            cells.push(Cell {
                t,
                repeat: s.repeat as usize,
                dir: Direction::new(s.gender, row.contact_gender).index(),
                a,
                b_lo: range.start,
                b_hi: range.end,
                count: row.count,
                log_offset,
                ln_y_fact: ln_factorial(row.count),
                info: CellInfo {
                    wave: s.wave,
                    repeat: s.repeat,
                    age: s.age,
                    gender: s.gender,
                    bracket: row.bracket,
                    contact_gender: row.contact_gender,
                    count: row.count,
                },
            });
        }
        let log_pop = pop.values().iter().map(|v| [v[0].ln(), v[1].ln()]).collect();
        Ok(Self { config, layout, fields, basis1, basis2, level1, level2, pop: pop.clone(), log_pop, waves, cells })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn field_layout(&self) -> &FieldLayout {
        &self.fields
    }

    pub fn bases(&self) -> (&HsgpBasis, &HsgpBasis) {
        (&self.basis1, &self.basis2)
    }

    pub fn population(&self) -> &PopulationTable {
        &self.pop
    }

    pub fn grid(&self) -> AgeGrid {
        self.fields.grid
    }

    /// Wave labels in parameter order.
    pub fn waves(&self) -> &[u32] {
        &self.waves
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> Vec<CellInfo> {
        self.cells.iter().map(|c| c.info).collect()
    }

    fn rho(&self, x: &[f64], r: usize) -> (f64, Option<usize>) {
        match self.layout.rho_index(r) {
            Some(i) => (x[i], Some(i)),
            None => (0.0, None),
        }
    }

    /// Spectral weights `w1, w2` of one field and `∂ log w / ∂ log ℓ`.
    fn weights(&self, x: &[f64], t: usize, pair: GenderPair) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = self.layout.hyper_index(self.layout.hyper_block(t, pair));
        let h = &x[k..k + 4];
        let kernel = self.config.kernel;
        let weights = |log_sigma: f64, log_ell: f64, basis: &HsgpBasis| {
            let ell = log_ell.exp();
            let mut w = Vec::with_capacity(basis.n_basis());
            let mut d = Vec::with_capacity(basis.n_basis());
            for &omega in &basis.sqrt_lambda {
                let (log_s, dlog_s) = log_unit_spectral_density(kernel, ell, omega);
                w.push((log_sigma + 0.5 * log_s).exp());
                d.push(0.5 * dlog_s);
            }
            (w, d)
        };
        let (w1, d1) = weights(h[0], h[1], &self.basis1);
        let (w2, d2) = weights(h[2], h[3], &self.basis2);
        (w1, w2, d1, d2)
    }

    /// Maps sampler coordinates to model coordinates.
    ///
    /// The sampler sees every coefficient block as `z + β0·V(θ)` with
    /// `V = diag(1/w1)·a1·a2ᵀ·diag(1/w2)`, where `a1 a2ᵀ` is a low-order
    /// fit of the constant surface. Each field then carries its own level,
    /// which decouples the intercept from the field levels. The map is a
    /// shear with unit Jacobian, so the posterior is unchanged.
    pub fn to_model(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut out = x.to_vec();
        let beta0 = x[0];
        let m1 = self.config.m1;
        for t in 0..self.layout.n_waves {
            for pair in GenderPair::ALL {
                let (w1, w2, _, _) = self.weights(x, t, pair);
                let z = &mut out[self.layout.z_range(t, pair)];
                for (j, &a2) in self.level2.iter().enumerate() {
                    for (i, &a1) in self.level1.iter().enumerate() {
                        z[i + m1 * j] -= beta0 * a1 * a2 / (w1[i] * w2[j]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Self::to_model`].
    pub fn from_model(&self, xm: &[f64]) -> Result<Vec<f64>> {
        let shifted = self.to_model(xm)?;
        Ok(xm.iter().zip(&shifted).map(|(&v, &s)| 2.0 * v - s).collect())
    }

    /// Pulls a model-coordinate gradient back to sampler coordinates.
    fn pull_back(&self, x: &[f64], grad: &mut [f64]) {
        let beta0 = x[0];
        let m1 = self.config.m1;
        for t in 0..self.layout.n_waves {
            for pair in GenderPair::ALL {
                let (w1, w2, d1, d2) = self.weights(x, t, pair);
                let k = self.layout.hyper_index(self.layout.hyper_block(t, pair));
                let zr = self.layout.z_range(t, pair);
                let mut g_beta = 0.0;
                let mut g_h = [0.0; 4];
                for (j, &a2) in self.level2.iter().enumerate() {
                    for (i, &a1) in self.level1.iter().enumerate() {
                        let gv = grad[zr.start + i + m1 * j] * a1 * a2 / (w1[i] * w2[j]);
                        g_beta -= gv;
                        let s = beta0 * gv;
                        g_h[0] += s;
                        g_h[1] += s * d1[i];
                        g_h[2] += s;
                        g_h[3] += s * d2[j];
                    }
                }
                grad[0] += g_beta;
                for (q, v) in g_h.into_iter().enumerate() {
                    grad[k + q] += v;
                }
            }
        }
    }

    fn forward_field(&self, x: &[f64], t: usize, pair: GenderPair) -> Result<FieldCache> {
        let (w1, w2, dlog1, dlog2) = self.weights(x, t, pair);
        let l1 = scale_columns(&self.basis1.phi, &w1);
        let l2 = scale_columns(&self.basis2.phi, &w2);
        let z = reshape_coefficients(&x[self.layout.z_range(t, pair)], self.config.m1, self.config.m2)?;
        let a = l1.dot(&z);
        let f = a.dot(&l2.t());
        let f = if f.is_standard_layout() { f } else { f.as_standard_layout().into_owned() };
        Ok(FieldCache { w1, w2, dlog1, dlog2, a, f })
    }

    fn backward_field(
        &self,
        x: &[f64],
        t: usize,
        pair: GenderPair,
        cache: &FieldCache,
        g_field: Vec<f64>,
        grad: &mut [f64],
    ) {
        let (n1, n2) = self.fields.shape();
        let (m1, m2) = (self.config.m1, self.config.m2);
        let g = Array2::from_shape_vec((n1, n2), g_field).expect("field gradient shape");
        let g_phi = g.dot(&self.basis2.phi);
        let b1 = scale_columns(&g_phi, &cache.w2);
        let p = self.basis1.phi.t().dot(&b1);
        let zr = self.layout.z_range(t, pair);
        let z: ArrayView2<f64> = reshape_coefficients(&x[zr.clone()], m1, m2).expect("z shape");
        let mut g_w1 = vec![0.0; m1];
        {
            let gz = &mut grad[zr];
            for j in 0..m2 {
                for i in 0..m1 {
                    let pij = p[[i, j]];
                    gz[i + m1 * j] += cache.w1[i] * pij;
                    g_w1[i] += z[[i, j]] * pij;
                }
            }
        }
        let mut g_w2 = vec![0.0; m2];
        for k in 0..n1 {
            for j in 0..m2 {
                g_w2[j] += cache.a[[k, j]] * g_phi[[k, j]];
            }
        }
        let k = self.layout.hyper_index(self.layout.hyper_block(t, pair));
        for i in 0..m1 {
            let s = g_w1[i] * cache.w1[i];
            grad[k] += s;
            grad[k + 1] += s * cache.dlog1[i];
        }
        for j in 0..m2 {
            let s = g_w2[j] * cache.w2[j];
            grad[k + 2] += s;
            grad[k + 3] += s * cache.dlog2[j];
        }
    }

    fn base_effect(&self, x: &[f64], t: usize) -> f64 {
        x[0] + self.layout.tau_index(t).map_or(0.0, |i| x[i])
    }

    /// `m` for every wave, laid out `[t][dir][a][b]`, plus the field caches.
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<FieldCache>)> {
        let nb = self.grid().len();
        let n_waves = self.layout.n_waves;
        let mut caches = Vec::with_capacity(n_waves * 3);
        for t in 0..n_waves {
            for pair in GenderPair::ALL {
                caches.push(self.forward_field(x, t, pair)?);
            }
        }
        let mut m = vec![0.0; n_waves * 4 * nb * nb];
        for t in 0..n_waves {
            let base = self.base_effect(x, t);
            for dir in Direction::ALL {
                let f = caches[t * 3 + dir.pair().index()].f.as_slice().expect("standard layout");
                let h = dir.contact().index();
                let d = dir.index();
                let out = &mut m[(t * 4 + d) * nb * nb..(t * 4 + d + 1) * nb * nb];
                for a in 0..nb {
                    for b in 0..nb {
                        let idx = self.fields.flat(d, a, b);
                        out[a * nb + b] = (base + f[idx] + self.log_pop[b][h]).exp();
                    }
                }
            }
        }
        Ok((m, caches))
    }

    fn cell_scale(&self, x: &[f64], cell: &Cell, inv_nu: f64) -> (f64, Option<usize>) {
        let (rho, rho_idx) = self.rho(x, cell.repeat);
        ((cell.log_offset + rho).exp() * inv_nu, rho_idx)
    }

    fn cell_base(&self, cell: &Cell) -> usize {
        let nb = self.grid().len();
        ((cell.t * 4 + cell.dir) * nb + cell.a) * nb
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("parameter vector has length {}, expected {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// Log posterior density on the unconstrained scale.
    pub fn log_posterior(&self, x: &[f64]) -> Result<f64> {
        let xm = self.to_model(x)?;
        self.evaluate(&xm, None)
    }

    /// Log posterior density and its gradient (written into `grad`).
    pub fn log_posterior_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.dim() {
            return Err(Error::Shape("gradient buffer has the wrong length".into()));
        }
        let xm = self.to_model(x)?;
        let lp = self.evaluate(&xm, Some(&mut *grad))?;
        self.pull_back(x, grad);
        Ok(lp)
    }

    fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        self.check_x(x)?;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let lp = self.layout.log_prior(x, grad.as_deref_mut());
        if !lp.is_finite() {
            return Err(Error::NonFinite { term: "prior".into(), value: lp });
        }
        let (m, caches) = self.forward(x)?;
        let nu_idx = self.layout.nu_index();
        let nu = x[nu_idx].exp();
        let inv_nu = 1.0 / nu;
        let mut ll_total = 0.0;

        let want_grad = grad.is_some();
        let mut g_logm = if want_grad { vec![0.0; m.len()] } else { Vec::new() };
        let mut g_lognu = 0.0;
        for cell in &self.cells {
            let (scale, rho_idx) = self.cell_scale(x, cell, inv_nu);
            let base = self.cell_base(cell);
            let row = &m[base + cell.b_lo..base + cell.b_hi];
            let s: f64 = row.iter().sum::<f64>() * scale;
            let r = s + NUGGET * row.len() as f64;
            let (ll, d_r, d_nu) = nb_loglik_grad(cell.count, r, nu, cell.ln_y_fact);
            if !ll.is_finite() {
                return Err(self.non_finite(cell, ll));
            }
            ll_total += ll;
            if let Some(g) = grad.as_deref_mut() {
                let k = d_r * scale;
                for (gm, &mv) in g_logm[base + cell.b_lo..base + cell.b_hi].iter_mut().zip(row) {
                    *gm += k * mv;
                }
                if let Some(i) = rho_idx {
                    g[i] += d_r * s;
                }
                g_lognu += nu * d_nu - d_r * s;
            }
        }
        let total = lp + ll_total;
        if !total.is_finite() {
            return Err(Error::NonFinite { term: "likelihood".into(), value: total });
        }
        let Some(grad) = grad else {
            return Ok(total);
        };

        grad[nu_idx] += g_lognu;
        let nb = self.grid().len();
        let (n1, n2) = self.fields.shape();
        for t in 0..self.layout.n_waves {
            let mut g_fields = vec![vec![0.0; n1 * n2]; 3];
            let mut g_base = 0.0;
            for d in 0..4 {
                let pair = Direction::from_index(d).pair().index();
                let block = &g_logm[(t * 4 + d) * nb * nb..(t * 4 + d + 1) * nb * nb];
                for a in 0..nb {
                    for b in 0..nb {
                        let g = block[a * nb + b];
                        if g != 0.0 {
                            g_base += g;
                            g_fields[pair][self.fields.flat(d, a, b)] += g;
                        }
                    }
                }
            }
            grad[0] += g_base;
            if let Some(i) = self.layout.tau_index(t) {
                grad[i] += g_base;
            }
            for (p, gf) in g_fields.into_iter().enumerate() {
                let pair = GenderPair::ALL[p];
                self.backward_field(x, t, pair, &caches[t * 3 + p], gf, grad);
            }
        }
        Ok(total)
    }

    fn non_finite(&self, cell: &Cell, value: f64) -> Error {
        let i = cell.info;
        Error::NonFinite {
            term: format!(
                "cell wave={} repeat={} age={} gender={} bracket={} contact={}",
                i.wave, i.repeat, i.age, i.gender, i.bracket, i.contact_gender
            ),
            value,
        }
    }

    /// Aggregated NB shapes `Σ_{b∈c} α_trab` per cell, and `ν`.
    pub fn cell_shapes(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let x = &self.to_model(x)?;
        let (m, _) = self.forward(x)?;
        let nu = x[self.layout.nu_index()].exp();
        let shapes = self
            .cells
            .iter()
            .map(|cell| {
                let (scale, _) = self.cell_scale(x, cell, 1.0 / nu);
                let base = self.cell_base(cell);
                let row = &m[base + cell.b_lo..base + cell.b_hi];
                row.iter().sum::<f64>() * scale + NUGGET * row.len() as f64
            })
            .collect();
        Ok((shapes, nu))
    }

    /// Per-cell log-likelihood.
    pub fn pointwise_loglik(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (shapes, nu) = self.cell_shapes(x)?;
        Ok(self.cells.iter().zip(shapes).map(|(c, r)| nb_loglik_unchecked(c.count, r, nu, c.ln_y_fact)).collect())
    }

    /// Random fields `[wave][MF, MM, FF]` on the field grid.
    pub fn fields(&self, x: &[f64]) -> Result<Vec<Array2<f64>>> {
        let x = &self.to_model(x)?;
        let mut out = Vec::new();
        for t in 0..self.layout.n_waves {
            for pair in GenderPair::ALL {
                out.push(self.forward_field(x, t, pair)?.f);
            }
        }
        Ok(out)
    }

    /// Contact intensities for every wave.
    pub fn intensity(&self, x: &[f64]) -> Result<IntensityField> {
        let (m, _) = self.forward(&self.to_model(x)?)?;
        IntensityField::new(self.grid(), self.layout.n_waves, m)
    }

    pub fn constrain(&self, x: &[f64]) -> Result<ModelParameters> {
        self.layout.constrain(&self.to_model(x)?)
    }
}
