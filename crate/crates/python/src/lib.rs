//! Python bindings: datasets, the model's log density, the sampler and
//! the main summaries. Arrays cross the boundary as flat lists.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use contact_intensity::grid::AgeGrid;
use contact_intensity::inference::{self, Diagnostics, InitStrategy, PosteriorDraws, SamplerConfig};
use contact_intensity::io;
use contact_intensity::kernels::KernelFamily;
use contact_intensity::model::{
    nb_cell_loglik, IntensityField, ModelConfig, ObservationTable, Parameterization, PopulationTable,
    RateConsistencyModel,
};
use contact_intensity::postprocess::{intensity_draws, intensity_summary, median_mae};
use contact_intensity::simulate::{Scenario, SimulatedDataset};

fn err(e: contact_intensity::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A survey table with its population and, for synthetic data, the truth.
#[pyclass(module = "contact_intensity_py")]
struct Dataset {
    table: ObservationTable,
    population: PopulationTable,
    truth: Option<IntensityField>,
    simulated: Option<SimulatedDataset>,
}

#[pymethods]
impl Dataset {
    /// Simulates one replicate of `scenario` ("pre" or "in") with `n` participants.
    #[staticmethod]
    #[pyo3(signature = (scenario, n, seed))]
    fn simulate(scenario: &str, n: u64, seed: u64) -> PyResult<Self> {
        let scenario: Scenario = scenario.parse().map_err(err)?;
        let pop = PopulationTable::uniform(AgeGrid::simulation(), 1.0).map_err(err)?;
        let ds = SimulatedDataset::generate(scenario, n, &pop, seed).map_err(err)?;
        Ok(Self {
            table: ds.observation_table().map_err(err)?,
            population: pop,
            truth: Some(ds.truth.clone()),
            simulated: Some(ds),
        })
    }

    /// Reads a dataset directory (counts.csv, participants.csv, ...).
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let d = io::read_dataset(&dir).map_err(err)?;
        Ok(Self { table: d.table, population: d.population, truth: d.truth, simulated: None })
    }

    /// Writes a simulated dataset in the survey schema.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        let ds =
            self.simulated.as_ref().ok_or_else(|| PyValueError::new_err("only simulated datasets can be written"))?;
        io::write_dataset(&dir, ds).map_err(err)
    }

    #[getter]
    fn ages(&self) -> Vec<u32> {
        self.table.grid().ages().collect()
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.table.rows().len()
    }

    /// True intensities laid out `[wave][direction][a][b]`, if known.
    fn truth(&self) -> Option<Vec<f64>> {
        self.truth.as_ref().map(|t| t.values().to_vec())
    }
}

/// The rate consistency posterior for one dataset.
#[pyclass(module = "contact_intensity_py")]
struct Model {
    inner: RateConsistencyModel,
    truth: Option<IntensityField>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (dataset, parameterization="diff-in-age", kernel="matern52", m1=40, m2=20, cross_sectional=true))]
    fn new(
        dataset: &Dataset,
        parameterization: &str,
        kernel: &str,
        m1: usize,
        m2: usize,
        cross_sectional: bool,
    ) -> PyResult<Self> {
        let p: Parameterization = parameterization.parse().map_err(err)?;
        let k: KernelFamily = kernel.parse().map_err(err)?;
        let mut cfg = ModelConfig { parameterization: p, kernel: k, m1, m2, ..ModelConfig::default() };
        if cross_sectional {
            cfg = ModelConfig::cross_sectional(p, cfg.hsgp());
        }
        let inner = RateConsistencyModel::new(cfg, &dataset.table, &dataset.population).map_err(err)?;
        Ok(Self { inner, truth: dataset.truth.clone() })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.n_cells()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.layout().names()
    }

    fn log_posterior(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_posterior(&x).map_err(err)
    }

    /// `(value, gradient)` at `x`.
    fn log_posterior_grad(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let mut g = vec![0.0; x.len()];
        let lp = self.inner.log_posterior_grad(&x, &mut g).map_err(err)?;
        Ok((lp, g))
    }

    /// Intensities at `x`, laid out `[wave][direction][a][b]`.
    fn intensity(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.intensity(&x).map_err(err)?.values().to_vec())
    }

    /// Runs NUTS and returns the draws.
    #[pyo3(signature = (chains=2, warmup=200, samples=200, seed=1, max_tree_depth=12, init="uniform"))]
    fn sample(
        &self,
        py: Python<'_>,
        chains: usize,
        warmup: usize,
        samples: usize,
        seed: u64,
        max_tree_depth: usize,
        init: &str,
    ) -> PyResult<Fit> {
        let init = match init {
            "uniform" => InitStrategy::Uniform,
            "map" => InitStrategy::Map,
            other => return Err(PyValueError::new_err(format!("unknown init {other:?}"))),
        };
        let cfg = SamplerConfig {
            chains,
            warmup_iters: warmup,
            sampling_iters: samples,
            seed,
            max_tree_depth,
            init,
            ..SamplerConfig::default()
        };
        let model = &self.inner;
        let draws = py.detach(|| inference::sample(model, &cfg)).map_err(err)?;
        Ok(Fit { draws, max_tree_depth, model: self.inner.clone(), truth: self.truth.clone() })
    }
}

/// Posterior draws of one fit.
#[pyclass(module = "contact_intensity_py")]
struct Fit {
    draws: PosteriorDraws,
    max_tree_depth: usize,
    model: RateConsistencyModel,
    truth: Option<IntensityField>,
}

#[pymethods]
impl Fit {
    /// Constrained draws of one parameter, one list per chain.
    fn parameter(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let i =
            self.draws.index_of(name).ok_or_else(|| PyValueError::new_err(format!("unknown parameter {name:?}")))?;
        Ok(self.draws.parameter(i))
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.draws.names.clone()
    }

    /// Diagnostics as a JSON string.
    fn diagnostics_json(&self) -> PyResult<String> {
        let d = Diagnostics::from_draws(&self.draws, self.max_tree_depth);
        serde_json::to_string(&d).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `(elpd, ppc_coverage)`.
    #[pyo3(signature = (seed=1))]
    fn predictive_check(&self, seed: u64) -> PyResult<(f64, f64)> {
        let c = inference::elpd_and_ppc(&self.model, &self.draws, seed).map_err(err)?;
        Ok((c.elpd, c.ppc_coverage))
    }

    /// Posterior median intensities, laid out like `Model.intensity`.
    fn median_intensity(&self) -> PyResult<Vec<f64>> {
        let fields = intensity_draws(&self.model, &self.draws).map_err(err)?;
        Ok(intensity_summary(&fields).map_err(err)?.iter().map(|s| s.median).collect())
    }

    /// Mean absolute error of the posterior median against the truth.
    fn mae(&self) -> PyResult<f64> {
        let truth = self.truth.as_ref().ok_or_else(|| PyValueError::new_err("dataset has no truth"))?;
        let fields = intensity_draws(&self.model, &self.draws).map_err(err)?;
        median_mae(&intensity_summary(&fields).map_err(err)?, truth).map_err(err)
    }
}

/// Negative-binomial log pmf with shape `r` and overdispersion `nu`.
#[pyfunction]
fn nb_log_pmf(y: i64, r: f64, nu: f64) -> PyResult<f64> {
    nb_cell_loglik(y, r, nu).map_err(err)
}

/// Split R-hat of a list of chains.
#[pyfunction]
fn r_hat(chains: Vec<Vec<f64>>) -> f64 {
    inference::r_hat(&chains)
}

/// Bulk effective sample size of a list of chains.
#[pyfunction]
fn ess_bulk(chains: Vec<Vec<f64>>) -> f64 {
    inference::ess_bulk(&chains)
}

#[pymodule]
fn contact_intensity_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(nb_log_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(r_hat, m)?)?;
    m.add_function(wrap_pyfunction!(ess_bulk, m)?)?;
    Ok(())
}
