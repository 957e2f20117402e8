use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffsmc::autodiff::ParamStore;
use diffsmc::harness::bundle::Bundle;
use diffsmc::harness::config::{parse_resampler, ExperimentConfig, Method};
use diffsmc::harness::eval::evaluate;
use diffsmc::harness::run::{posterior, RunContext};
use diffsmc::harness::train::train_method;
use diffsmc::mixture::MixtureDensity;
use diffsmc::simulator::{self, Counts, Dataset, SimConfig, Split};
use diffsmc::{Bandwidth, ParticleSet, RngStream, State3};

create_exception!(diffsmc, DiffsmcError, PyValueError);

fn err(e: diffsmc::Error) -> PyErr {
    DiffsmcError::new_err(format!("{}: {e}", e.kind()))
}

fn experiment(config: Option<&str>) -> PyResult<ExperimentConfig> {
    match config {
        Some(text) => ExperimentConfig::from_toml(text, std::path::Path::new("<python>")).map_err(err),
        None => Ok(ExperimentConfig::default()),
    }
}

fn split(name: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| DiffsmcError::new_err(format!("unknown split {name:?}")))
}

fn states_of(rows: &[[f64; 3]]) -> PyResult<Vec<State3>> {
    rows.iter().map(|r| State3::from_array(*r).map_err(err)).collect()
}

/// Resampled indices for normalized `weights`.
#[pyfunction]
#[pyo3(signature = (weights, n, scheme = "stratified", seed = 0))]
fn resample(weights: Vec<f64>, n: usize, scheme: &str, seed: u64) -> PyResult<Vec<usize>> {
    let r = parse_resampler(scheme).map_err(err)?;
    r.resample(&weights, n, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
}

/// Kernel mixture over `(x, y, θ)` with Gaussian position and von Mises heading kernels.
#[pyclass(module = "diffsmc")]
struct Mixture {
    inner: MixtureDensity,
}

#[pymethods]
impl Mixture {
    #[new]
    fn new(states: Vec<[f64; 3]>, log_weights: Vec<f64>, sigma_x: f64, sigma_y: f64, kappa: f64) -> PyResult<Self> {
        let set = ParticleSet::new(states_of(&states)?, log_weights, 0).map_err(err)?;
        let bw = Bandwidth::new(sigma_x, sigma_y, kappa).map_err(err)?;
        Ok(Mixture {
            inner: MixtureDensity::new(set, bw).map_err(err)?,
        })
    }

    fn logpdf(&self, points: Vec<[f64; 3]>) -> Vec<f64> {
        self.inner.logpdf_points(&points)
    }

    #[pyo3(signature = (m, seed = 0, stratified = true))]
    fn sample(&self, m: usize, seed: u64, stratified: bool) -> PyResult<Vec<[f64; 3]>> {
        let draws = self.inner.sample(m, &mut ChaCha8Rng::seed_from_u64(seed), stratified).map_err(err)?;
        Ok(draws.into_iter().map(|d| d.point.to_array()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// One simulated bearings-only trajectory: `{"states": [[x, y, θ]], "observations": [ψ]}`.
#[pyfunction]
#[pyo3(signature = (seed, length = None))]
fn simulate<'py>(py: Python<'py>, seed: u64, length: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let mut config = SimConfig::default();
    if let Some(t) = length {
        config.t = t;
    }
    let traj = simulator::generate_trajectory(&config, &RngStream::new(seed), (0..config.t).collect()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("states", traj.states.iter().map(|s| s.to_array()).collect::<Vec<_>>())?;
    d.set_item("observations", traj.observation_values())?;
    Ok(d)
}

/// Writes train/val/eval splits and a manifest; returns the content hash.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, train = 500, val = 100, eval = 200, length = None))]
fn make_dataset(out: PathBuf, seed: u64, train: usize, val: usize, eval: usize, length: Option<usize>) -> PyResult<String> {
    let mut config = SimConfig::default();
    if let Some(t) = length {
        config.t = t;
    }
    simulator::make_dataset(&config, Counts { train, val, eval }, seed, &out).map_err(err)?;
    Ok(simulator::read_manifest(&out).map_err(err)?.content_hash)
}

/// Trained (or freshly initialized) parameters for one method.
#[pyclass(module = "diffsmc")]
struct Model {
    bundle: Bundle,
    config: ExperimentConfig,
}

impl Model {
    fn ctx<'a>(&'a self, data: &'a Dataset, particles: Option<usize>) -> RunContext<'a> {
        RunContext {
            train: &self.config.train,
            sim: &data.config,
            particles: particles.unwrap_or(self.config.eval.particles),
            inference: true,
        }
    }
}

#[pymethods]
impl Model {
    /// Trains `method` on the dataset in `data_dir`; `config` is experiment TOML.
    #[staticmethod]
    #[pyo3(signature = (data_dir, method, seed = 0, config = None, out = None))]
    fn train(py: Python<'_>, data_dir: PathBuf, method: &str, seed: u64, config: Option<&str>, out: Option<PathBuf>) -> PyResult<Self> {
        let m = Method::parse(method).map_err(err)?;
        let config = experiment(config)?;
        let data = simulator::load_dataset(&data_dir).map_err(err)?;
        let r = py.detach(|| train_method(&data, &config.train, m, seed, out.as_deref())).map_err(err)?;
        Ok(Model { bundle: r.bundle, config })
    }

    #[staticmethod]
    #[pyo3(signature = (method, checkpoint, config = None))]
    fn load(method: &str, checkpoint: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let m = Method::parse(method).map_err(err)?;
        let config = experiment(config)?;
        let store = ParamStore::load(&checkpoint).map_err(err)?;
        let bundle = Bundle::from_checkpoint(m, &config.train, &config.data.sim, &store).map_err(err)?;
        Ok(Model { bundle, config })
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.bundle.method.name()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.bundle.store.save(&path).map_err(err)
    }

    /// Per-sequence NLL and summary statistics on a split.
    #[pyo3(signature = (data_dir, split_name = "eval", seed = 0, particles = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data_dir: PathBuf,
        split_name: &str,
        seed: u64,
        particles: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = simulator::load_dataset(&data_dir).map_err(err)?;
        let sp = split(split_name)?;
        let ctx = self.ctx(&data, particles);
        let (report, _) = py.detach(|| evaluate(&self.bundle, &ctx, data.split(sp), &self.config.eval, seed)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("median_nll", report.nll.median)?;
        d.set_item("mean_nll", report.nll.mean)?;
        d.set_item("nll", report.sequences.iter().map(|s| s.nll).collect::<Vec<_>>())?;
        d.set_item("top1_error", report.sequences.iter().map(|s| s.top1_error).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Posterior mean pose per step for one sequence of a split.
    #[pyo3(signature = (data_dir, index, split_name = "eval", seed = 0, particles = None))]
    fn posterior_means(&self, data_dir: PathBuf, index: usize, split_name: &str, seed: u64, particles: Option<usize>) -> PyResult<Vec<[f64; 3]>> {
        let data = simulator::load_dataset(&data_dir).map_err(err)?;
        let seqs = data.split(split(split_name)?);
        let traj = seqs
            .get(index)
            .ok_or_else(|| DiffsmcError::new_err(format!("sequence {index} out of range ({} available)", seqs.len())))?;
        let post = posterior(&self.bundle, &self.ctx(&data, particles), traj, &RngStream::new(seed)).map_err(err)?;
        Ok(post.sets.iter().map(|s| s.mean().to_array()).collect())
    }
}

#[pymodule(name = "diffsmc")]
fn diffsmc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DiffsmcError", m.py().get_type::<DiffsmcError>())?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_class::<Mixture>()?;
    m.add_class::<Model>()?;
    Ok(())
}
