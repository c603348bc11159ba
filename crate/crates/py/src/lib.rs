use std::path::PathBuf;

use dvxs_core::behavior::lambda_returns as core_lambda_returns;
use dvxs_core::config::{Preset, TrainConfig};
use dvxs_core::eval::{self, EvalReport};
use dvxs_core::sim::{Action, EnvironmentSpec, Perturbation, Simulator as CoreSim};
use dvxs_core::trainer::{checkpoint_path, Trainer};
use dvxs_core::world_model::{kl_diag_gaussians, DiagonalGaussian};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: dvxs_core::Error) -> PyErr {
    match e {
        dvxs_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("environment", &r.environment)?;
    d.set_item("perturbation", &r.perturbation)?;
    d.set_item("episodes", r.episodes)?;
    d.set_item("mean_return", r.mean_return)?;
    d.set_item("eqs", r.eqs)?;
    d.set_item("ees", r.ees)?;
    d.set_item("collision_rate", r.collision_rate)?;
    d.set_item("mean_path_length", r.mean_path_length)?;
    d.set_item("mean_steps", r.mean_steps)?;
    Ok(d)
}

/// Discounted λ-returns for one trajectory. `values` carries one extra
/// bootstrap entry at the end.
#[pyfunction]
#[pyo3(signature = (rewards, values, continues, gamma=0.99, lam=0.95))]
fn lambda_returns(rewards: Vec<f64>, values: Vec<f64>, continues: Vec<f64>, gamma: f64, lam: f64) -> PyResult<Vec<f64>> {
    if values.len() != rewards.len() + 1 || continues.len() != rewards.len() {
        return Err(PyValueError::new_err("need len(values) == len(rewards) + 1 == len(continues) + 1"));
    }
    Ok(core_lambda_returns(&rewards, &values, &continues, gamma, lam))
}

/// KL(q || p) between diagonal Gaussians given by means and standard deviations.
#[pyfunction]
fn kl_divergence(q_mean: Vec<f32>, q_std: Vec<f32>, p_mean: Vec<f32>, p_std: Vec<f32>) -> PyResult<f64> {
    let n = q_mean.len();
    if [q_std.len(), p_mean.len(), p_std.len()].iter().any(|&l| l != n) {
        return Err(PyValueError::new_err("all four vectors must have equal length"));
    }
    if q_std.iter().chain(&p_std).any(|&s| s <= 0.0) {
        return Err(PyValueError::new_err("standard deviations must be positive"));
    }
    let q = DiagonalGaussian { mean: q_mean, stddev: q_std };
    let p = DiagonalGaussian { mean: p_mean, stddev: p_std };
    Ok(kl_diag_gaussians(&q, &p))
}

/// Config file text for a preset.
#[pyfunction]
#[pyo3(signature = (preset="desk"))]
fn preset_config(preset: &str) -> PyResult<String> {
    let p = Preset::parse(preset).map_err(err)?;
    Ok(TrainConfig::preset(p).to_text())
}

#[pyfunction]
#[pyo3(signature = (env="simple", episodes=10, seed=0, perturbation="none"))]
fn evaluate_random<'py>(
    py: Python<'py>,
    env: &str,
    episodes: usize,
    seed: u64,
    perturbation: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = EnvironmentSpec::load(env).map_err(err)?;
    let p = Perturbation::parse(perturbation).map_err(err)?;
    let r = py.allow_threads(|| eval::evaluate_random(&spec, episodes, p, seed)).map_err(err)?;
    report_dict(py, &r)
}

/// Evaluates the agent stored in a checkpoint file or run directory.
#[pyfunction]
#[pyo3(signature = (checkpoint, env=None, episodes=10, seed=0, perturbation="none"))]
fn evaluate_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    env: Option<&str>,
    episodes: usize,
    seed: u64,
    perturbation: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = Perturbation::parse(perturbation).map_err(err)?;
    let r = py
        .allow_threads(|| {
            let t = Trainer::load_checkpoint(&checkpoint_path(&checkpoint))?;
            let spec = EnvironmentSpec::load(env.unwrap_or(&t.cfg.env))?;
            eval::evaluate(&t.agent, &spec, episodes, p, seed)
        })
        .map_err(err)?;
    report_dict(py, &r)
}

/// Trains a desk-preset agent into `out_dir`; returns per-episode returns.
#[pyfunction]
#[pyo3(signature = (out_dir, env="simple", steps=None, seed=0, overrides=None))]
fn train(
    py: Python<'_>,
    out_dir: PathBuf,
    env: &str,
    steps: Option<u64>,
    seed: u64,
    overrides: Option<Vec<(String, String)>>,
) -> PyResult<Vec<f64>> {
    let mut cfg = TrainConfig::preset(Preset::Desk);
    cfg.set("env", env).map_err(err)?;
    cfg.set("seed", &seed.to_string()).map_err(err)?;
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(err)?;
    }
    let episodes = py
        .allow_threads(|| Trainer::new(cfg).and_then(|mut t| t.run(&out_dir)))
        .map_err(err)?;
    Ok(episodes.iter().map(|m| m.ret).collect())
}

/// One environment. Actions are linear and angular velocity.
#[pyclass]
struct Simulator {
    inner: CoreSim,
}

#[pymethods]
impl Simulator {
    #[new]
    #[pyo3(signature = (env="simple", seed=0, perturbation="none"))]
    fn new(env: &str, seed: u64, perturbation: &str) -> PyResult<Self> {
        let spec = EnvironmentSpec::load(env).map_err(err)?;
        let p = Perturbation::parse(perturbation).map_err(err)?;
        Ok(Self {
            inner: CoreSim::new(spec, seed).with_perturbation(p),
        })
    }

    /// Starts an episode and returns the first 360 ranges.
    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset().ranges
    }

    /// Returns `(ranges, reward, done, collided)`.
    fn step(&mut self, v: f64, omega: f64) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        let r = self.inner.step(Action::new(v, omega)).map_err(err)?;
        Ok((r.observation.ranges, r.reward, r.done, r.collided))
    }

    #[getter]
    fn pose(&self) -> (f64, f64, f64) {
        let r = &self.inner.robot;
        (r.position.x, r.position.y, r.heading)
    }

    #[getter]
    fn explored_area(&self) -> f64 {
        self.inner.explored_area()
    }

    #[getter]
    fn free_area(&self) -> f64 {
        self.inner.free_area()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }
}

#[pymodule]
fn dvxs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Simulator>()?;
    m.add_function(wrap_pyfunction!(lambda_returns, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_random, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("NUM_BEAMS", dvxs_core::sim::NUM_BEAMS)?;
    Ok(())
}
