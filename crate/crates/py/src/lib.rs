//! Python bindings. Matrices cross the boundary as lists of rows.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sensorsched::delay_fusion::fuse_posteriors;
use sensorsched::env::{EnvConfig, SensorEnv, StepOutcome};
use sensorsched::harness::{ExperimentConfig, Variation};
use sensorsched::kalman::{self, BeliefKind, BeliefState, CovarianceForm};
use sensorsched::linalg::{Mat, Vector};
use sensorsched::linmodel::{generate_system, SensorModel};
use sensorsched::link_energy::LinkBudget;
use sensorsched::scheduling::{self, ActorCritic, EvalSummary, PolicySpec};
use sensorsched::{stability, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Training(_) | Error::Filter(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: &[Vec<f64>]) -> PyResult<Mat> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix must be a non-empty list of equal-length rows"));
    }
    Ok(Mat::from_fn(n, m, |i, j| rows[i][j]))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_variation(name: &str) -> PyResult<Variation> {
    name.parse::<Variation>().map_err(py_err)
}

fn posterior(mean: Vec<f64>, cov: &[Vec<f64>]) -> PyResult<BeliefState> {
    let cov = to_mat(cov)?;
    if mean.len() != cov.nrows() || !cov.is_square() {
        return Err(PyValueError::new_err("mean and covariance dimensions disagree"));
    }
    Ok(BeliefState::new(Vector::from_vec(mean), cov, 0, BeliefKind::Posterior))
}

/// Experiment configuration parsed from TOML plus `section.key=value` overrides.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None, overrides = Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(toml.unwrap_or(""), &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: std::path::PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let inner = ExperimentConfig::load(Some(&path), &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.experiment.seed
    }

    #[getter]
    fn n_runs(&self) -> usize {
        self.inner.experiment.n_runs
    }

    #[getter]
    fn train_seed(&self) -> u64 {
        self.inner.train_seed()
    }

    #[getter]
    fn eval_seed(&self) -> u64 {
        self.inner.eval_seed()
    }
}

/// Generated process and sensor fleet for a seed under `config`'s ranges.
#[pyfunction]
#[pyo3(signature = (seed, config = None, variation = "standard"))]
fn system<'py>(py: Python<'py>, seed: u64, config: Option<PyConfig>, variation: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let gen = parse_variation(variation)?.apply(&cfg.system);
    let (model, sensors) = generate_system(seed, &gen).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("A", from_mat(model.a()))?;
    out.set_item("Q", from_mat(model.q()))?;
    out.set_item("spectral_radius", sensorsched::linmodel::spectral_radius(model.a()))?;
    let list = sensors
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("id", s.id())?;
            d.set_item("C", from_mat(s.c()))?;
            d.set_item("R", from_mat(s.r()))?;
            d.set_item("sample_prob", s.sample_prob())?;
            d.set_item("distance", s.distance())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("sensors", list)?;
    Ok(out)
}

/// Kalman measurement update; returns `(mean, cov)`.
#[pyfunction]
#[pyo3(signature = (mean, cov, c, r, y, joseph = false))]
fn kalman_update(
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    y: Vec<f64>,
    joseph: bool,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let belief = posterior(mean, &cov)?;
    let form = if joseph { CovarianceForm::Joseph } else { CovarianceForm::Standard };
    let post = kalman::update_with(&belief, &to_mat(&c)?, &to_mat(&r)?, &Vector::from_vec(y), form).map_err(py_err)?;
    Ok((post.mean.iter().copied().collect(), from_mat(&post.cov)))
}

/// Fuses a propagated delayed posterior with the system posterior.
#[pyfunction]
fn fuse(
    propagated_mean: Vec<f64>,
    propagated_cov: Vec<Vec<f64>>,
    system_mean: Vec<f64>,
    system_cov: Vec<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let a = posterior(propagated_mean, &propagated_cov)?;
    let b = posterior(system_mean, &system_cov)?;
    let f = fuse_posteriors(&a, &b).map_err(py_err)?;
    Ok((f.mean.iter().copied().collect(), from_mat(&f.cov)))
}

/// Per-packet transmission energy in joules of a sensor at `distance` meters.
#[pyfunction]
fn link_energy(distance: f64) -> PyResult<f64> {
    LinkBudget::default().sensor_energy(distance).map_err(py_err)
}

/// Free-space channel gain at `distance` meters.
#[pyfunction]
fn channel_gain(distance: f64) -> PyResult<f64> {
    LinkBudget::default().channel_gain(distance).map_err(py_err)
}

/// Stability feasibility of `a` under sensors with output matrices `cs`.
#[pyfunction]
fn analyze_stability<'py>(py: Python<'py>, a: Vec<Vec<f64>>, cs: Vec<Vec<Vec<f64>>>) -> PyResult<Bound<'py, PyDict>> {
    let a = to_mat(&a)?;
    let sensors = cs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let c = to_mat(c)?;
            let r = Mat::identity(c.nrows(), c.nrows());
            SensorModel::new(i + 1, c, r, 1.0, 1.0).map_err(py_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let rep = stability::analyze(&a, &sensors).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("feasible", rep.feasible)?;
    out.set_item("rank_o", rep.rank_o)?;
    out.set_item("unstable_dim", rep.r)?;
    out.set_item("spectral_radius", rep.rho)?;
    out.set_item("condition1", rep.condition1_holds)?;
    out.set_item("condition2", rep.condition2_holds)?;
    out.set_item("witness_schedule", rep.witness_schedule)?;
    out.set_item("boundary_warning", rep.boundary_warning)?;
    Ok(out)
}

fn outcome_tuple<'py>(py: Python<'py>, o: StepOutcome) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
    let info = PyDict::new(py);
    info.set_item("time", o.info.time)?;
    info.set_item("action", o.info.action)?;
    info.set_item("trace_p", o.info.trace_p)?;
    info.set_item("uncertainty", o.info.uncertainty)?;
    info.set_item("energy", o.info.energy)?;
    info.set_item("energy_norm", o.info.energy_norm)?;
    info.set_item("delay", o.info.delay)?;
    info.set_item("gain", o.info.gain)?;
    info.set_item("stale_drop", o.info.stale_drop)?;
    Ok((o.next_state.encode(), o.reward, o.done, info))
}

/// Scheduling environment. Action 0 is idle, action `i` polls sensor `i`.
#[pyclass(name = "Env")]
struct PyEnv {
    inner: SensorEnv,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (config = None, seed = 0, variation = "standard"))]
    fn new(config: Option<PyConfig>, seed: u64, variation: &str) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let env_cfg = cfg.env_config(parse_variation(variation)?).map_err(py_err)?;
        Ok(Self {
            inner: SensorEnv::new(env_cfg, seed).map_err(py_err)?,
        })
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed).encode()
    }

    fn observation(&self) -> Vec<f64> {
        self.inner.state().encode()
    }

    fn step<'py>(&mut self, py: Python<'py>, action: usize) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let o = self.inner.step(action).map_err(py_err)?;
        outcome_tuple(py, o)
    }

    #[getter]
    fn time(&self) -> usize {
        self.inner.time()
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.config().n_actions()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.config().obs_dim()
    }

    #[getter]
    fn trace_p(&self) -> f64 {
        self.inner.belief().trace()
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        from_mat(&self.inner.belief().cov)
    }
}

fn load_policy(checkpoint: &str) -> PyResult<ActorCritic> {
    let file = File::open(checkpoint).map_err(|e| PyIOError::new_err(format!("cannot open {checkpoint}: {e}")))?;
    let (net, _seed) = ActorCritic::load(BufReader::new(file)).map_err(py_err)?;
    Ok(net)
}

fn policy_spec(name: &str, checkpoint: Option<&str>) -> PyResult<PolicySpec> {
    Ok(match name {
        "idle" => PolicySpec::Idle,
        "random" => PolicySpec::Random,
        "greedy" => PolicySpec::Greedy,
        "ppo" => {
            let path = checkpoint.ok_or_else(|| PyValueError::new_err("the ppo policy needs a checkpoint"))?;
            PolicySpec::Ppo(Arc::new(load_policy(path)?))
        }
        other => return Err(PyValueError::new_err(format!("unknown policy `{other}`"))),
    })
}

fn summary_dict<'py>(py: Python<'py>, s: &EvalSummary) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("policy", &s.policy)?;
    out.set_item("n_runs", s.n_runs)?;
    out.set_item("seed", s.seed)?;
    out.set_item("mean_objective", s.mean_objective)?;
    out.set_item("std_objective", s.std_objective)?;
    out.set_item("mean_trace_final", s.mean_trace_final)?;
    out.set_item("mean_energy_total", s.mean_energy_total)?;
    out.set_item("objectives", &s.objectives)?;
    out.set_item("step_trace", &s.step_trace)?;
    out.set_item("step_energy", &s.step_energy)?;
    Ok(out)
}

/// Paired-seed evaluation of one policy.
#[pyfunction]
#[pyo3(signature = (policy, config = None, runs = None, checkpoint = None, variation = "standard"))]
fn evaluate<'py>(
    py: Python<'py>,
    policy: &str,
    config: Option<PyConfig>,
    runs: Option<usize>,
    checkpoint: Option<&str>,
    variation: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let spec = policy_spec(policy, checkpoint)?;
    let env_cfg: Arc<EnvConfig> = cfg.env_config(parse_variation(variation)?).map_err(py_err)?;
    let n = runs.unwrap_or(cfg.experiment.n_runs);
    let seed = cfg.eval_seed();
    let summary = py
        .detach(|| scheduling::evaluate(&env_cfg, &spec, n, seed))
        .map_err(py_err)?;
    summary_dict(py, &summary)
}

/// Trains PPO on the standard system and writes the checkpoint; returns the
/// learning curve as `(step, mean_episode_return)` pairs.
#[pyfunction]
#[pyo3(signature = (checkpoint, config = None))]
fn train(py: Python<'_>, checkpoint: &str, config: Option<PyConfig>) -> PyResult<Vec<(usize, Option<f64>)>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let env_cfg = cfg.env_config(Variation::Standard).map_err(py_err)?;
    let seed = cfg.train_seed();
    let out = py
        .detach(|| scheduling::train(env_cfg, &cfg.ppo, seed))
        .map_err(py_err)?;
    let file = File::create(checkpoint).map_err(|e| PyIOError::new_err(format!("cannot create {checkpoint}: {e}")))?;
    out.policy.save(BufWriter::new(file), seed).map_err(py_err)?;
    Ok(out.curve.iter().map(|r| (r.env_steps, r.mean_episode_reward)).collect())
}

#[pymodule]
fn pysensorsched(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(system, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_update, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(link_energy, m)?)?;
    m.add_function(wrap_pyfunction!(channel_gain, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_stability, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
