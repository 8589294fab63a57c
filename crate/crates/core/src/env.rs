//! The scheduling MDP.
//!
//! Each step: the true state advances and every sensor may draw a fresh
//! sample; the estimator predicts; the chosen sensor (action `i > 0`) sends
//! the sample it holds, which is fused with the delay-aware pipeline; the
//! reward is `−trace(P_k)/trace(P_0) − β E_i / max E`.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::delay_fusion::{info_gain, BeliefBuffer, DelayedMeasurement, DEFAULT_BUFFER_LEN};
use crate::error::{Error, Result};
use crate::kalman::{BeliefKind, BeliefState};
use crate::linalg::{Mat, Vector};
use crate::link_energy::{assign_energies, EnergyTable, LinkBudget};
use crate::linmodel::{standard_normal_vector, GroundTruth, ProcessModel, SensorModel};
use crate::seeds::{rng_for, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    /// Episode length `T`.
    pub horizon: usize,
    /// Energy weight `β`.
    pub beta: f64,
    /// Number of (sensor, delay) pairs kept in the observation.
    pub history_len: usize,
    /// `ε` inside `log(diag(P) + ε)`.
    pub log_eps: f64,
    pub buffer_len: usize,
    /// `P_0 = p0_scale · I`.
    pub p0_scale: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            horizon: 100,
            beta: 0.1,
            history_len: 10,
            log_eps: 1e-8,
            buffer_len: DEFAULT_BUFFER_LEN,
            p0_scale: 1.0,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.history_len == 0 {
            return Err(Error::Config("history_len must be at least 1".into()));
        }
        if !(self.log_eps > 0.0) || !(self.p0_scale > 0.0) {
            return Err(Error::Config("log_eps and p0_scale must be positive".into()));
        }
        if self.buffer_len == 0 {
            return Err(Error::Config("buffer_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything an environment instance needs besides its episode seed.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub model: ProcessModel,
    pub sensors: Vec<SensorModel>,
    pub energies: EnergyTable,
    pub params: EnvParams,
}

impl EnvConfig {
    /// Assigns link energies to `sensors` and validates the parameters.
    pub fn new(model: ProcessModel, mut sensors: Vec<SensorModel>, budget: &LinkBudget, params: EnvParams) -> Result<Self> {
        params.validate()?;
        if sensors.is_empty() {
            return Err(Error::Config("at least one sensor is required".into()));
        }
        for (i, s) in sensors.iter().enumerate() {
            if s.id() != i + 1 || s.state_dim() != model.dim() {
                return Err(Error::Config(format!(
                    "sensor {} must have id {} and state dimension {}",
                    s.id(),
                    i + 1,
                    model.dim()
                )));
            }
        }
        let energies = assign_energies(budget, &mut sensors)?;
        Ok(Self {
            model,
            sensors,
            energies,
            params,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn n_actions(&self) -> usize {
        self.sensors.len() + 1
    }

    pub fn obs_dim(&self) -> usize {
        self.model.dim() + 2 * self.params.history_len
    }

    pub fn p0(&self) -> Mat {
        let n = self.model.dim();
        Mat::identity(n, n) * self.params.p0_scale
    }
}

/// Observation: log-variances of the current belief and the most recent
/// (sensor, delay) pairs, most recent first; `(0, 0)` pads and marks idle.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    pub log_diag: Vec<f64>,
    pub history: Vec<(usize, f64)>,
}

impl MdpState {
    /// Flat vector `[log_diag…, id_1, δ_1, id_2, δ_2, …]` of length `N + 2ν`.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = self.log_diag.clone();
        for &(id, delay) in &self.history {
            v.push(id as f64);
            v.push(delay);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub time: usize,
    pub action: usize,
    pub trace_p: f64,
    /// `trace(P_k) / trace(P_0)`.
    pub uncertainty: f64,
    /// Joules spent this step.
    pub energy: f64,
    /// `E_i / max E`, zero when idle.
    pub energy_norm: f64,
    /// Age of the fused sample; `None` when nothing was sent.
    pub delay: Option<usize>,
    pub gain: f64,
    pub stale_drop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: MdpState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub struct SensorEnv {
    cfg: Arc<EnvConfig>,
    truth: GroundTruth,
    buffer: BeliefBuffer,
    history: VecDeque<(usize, f64)>,
    rng_process: SimRng,
    rng_sensors: SimRng,
    trace_p0: f64,
    seed: u64,
}

impl SensorEnv {
    pub fn new(cfg: Arc<EnvConfig>, seed: u64) -> Result<Self> {
        cfg.params.validate()?;
        let n = cfg.model.dim();
        let placeholder = BeliefState::new(Vector::zeros(n), cfg.p0(), 0, BeliefKind::Posterior);
        let mut env = Self {
            truth: GroundTruth::new(Vector::zeros(n), cfg.n_sensors()),
            buffer: BeliefBuffer::new(placeholder, cfg.params.buffer_len)?,
            history: VecDeque::new(),
            rng_process: rng_for(seed, "episode/process"),
            rng_sensors: rng_for(seed, "episode/sensors"),
            trace_p0: cfg.p0().trace(),
            seed,
            cfg,
        };
        env.reset(seed);
        Ok(env)
    }

    /// Starts a new episode: `x_0 ~ N(0, P_0)`, belief `(0, P_0)`, empty history.
    pub fn reset(&mut self, seed: u64) -> MdpState {
        let cfg = &self.cfg;
        let n = cfg.model.dim();
        let mut rng_x0 = rng_for(seed, "episode/x0");
        let x0 = standard_normal_vector(n, &mut rng_x0) * cfg.params.p0_scale.sqrt();
        self.truth = GroundTruth::new(x0, cfg.n_sensors());
        let initial = BeliefState::new(Vector::zeros(n), cfg.p0(), 0, BeliefKind::Posterior);
        self.buffer = BeliefBuffer::new(initial, cfg.params.buffer_len).expect("validated buffer length");
        self.history = std::iter::repeat_n((0, 0.0), cfg.params.history_len).collect();
        self.rng_process = rng_for(seed, "episode/process");
        self.rng_sensors = rng_for(seed, "episode/sensors");
        self.seed = seed;
        self.state()
    }

    pub fn config(&self) -> &Arc<EnvConfig> {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn time(&self) -> usize {
        self.buffer.time()
    }

    pub fn is_done(&self) -> bool {
        self.time() >= self.cfg.params.horizon
    }

    pub fn belief(&self) -> &BeliefState {
        self.buffer.current()
    }

    pub fn buffer(&self) -> &BeliefBuffer {
        &self.buffer
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn trace_p0(&self) -> f64 {
        self.trace_p0
    }

    pub fn state(&self) -> MdpState {
        let eps = self.cfg.params.log_eps;
        let cov = &self.buffer.current().cov;
        MdpState {
            log_diag: (0..cov.nrows()).map(|i| (cov[(i, i)] + eps).ln()).collect(),
            history: self.history.iter().copied().collect(),
        }
    }

    fn push_history(&mut self, entry: (usize, f64)) {
        self.history.push_front(entry);
        self.history.truncate(self.cfg.params.history_len);
    }

    /// Age of the sample sensor `id` would send now, if it holds one.
    pub fn sample_age(&self, id: usize) -> Option<usize> {
        self.truth.latest(id).map(|s| self.time() - s.time)
    }

    /// The measurement sensor `id` would deliver at the current step.
    pub fn pending_measurement(&self, id: usize) -> Option<DelayedMeasurement> {
        let s = self.truth.latest(id)?;
        DelayedMeasurement::new(id, s.time, s.value.clone(), self.time()).ok()
    }

    /// Advances the truth and the sensors and runs the estimator prediction.
    /// Split out so schedulers can be queried between the sampling and the
    /// decision; [`SensorEnv::step`] calls it automatically.
    fn begin_step(&mut self) {
        let cfg = Arc::clone(&self.cfg);
        self.truth.advance(&cfg.model, &mut self.rng_process);
        self.truth.sample_sensors(&cfg.sensors, &mut self.rng_sensors);
        self.buffer.advance(&cfg.model);
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::Usage(format!(
                "episode exhausted after {} steps; call reset",
                self.cfg.params.horizon
            )));
        }
        if action > self.cfg.n_sensors() {
            return Err(Error::Usage(format!(
                "action {action} out of range 0..={}",
                self.cfg.n_sensors()
            )));
        }
        self.begin_step();
        self.finish_step(action)
    }

    fn finish_step(&mut self, action: usize) -> Result<StepOutcome> {
        let cfg = Arc::clone(&self.cfg);
        let k = self.time();
        let prior_trace = self.buffer.current_prior().trace();
        let mut info = StepInfo {
            time: k,
            action,
            trace_p: prior_trace,
            uncertainty: 0.0,
            energy: 0.0,
            energy_norm: 0.0,
            delay: None,
            gain: 0.0,
            stale_drop: false,
        };
        if action == 0 {
            self.push_history((0, 0.0));
        } else {
            info.energy = cfg.energies.per_sensor[action - 1];
            info.energy_norm = cfg.energies.normalized(action);
            match self.pending_measurement(action) {
                Some(meas) => {
                    let sensor = &cfg.sensors[action - 1];
                    info.delay = Some(meas.delay);
                    match self.buffer.apply_delayed(&meas, sensor, &cfg.model) {
                        Ok(fused) => info.gain = info_gain(prior_trace, &fused),
                        Err(Error::StaleMeasurement { .. }) => info.stale_drop = true,
                        Err(e) => return Err(e),
                    }
                    self.push_history((action, meas.delay as f64));
                }
                None => self.push_history((action, cfg.params.horizon as f64)),
            }
        }
        info.trace_p = self.buffer.current().trace();
        info.uncertainty = info.trace_p / self.trace_p0;
        let reward = -info.uncertainty - cfg.params.beta * info.energy_norm;
        Ok(StepOutcome {
            next_state: self.state(),
            reward,
            done: self.is_done(),
            info,
        })
    }

    /// Starts the next step and returns a view in which the sensors already
    /// hold this step's samples, so a scheduler can look before choosing.
    pub fn observe_step(&mut self) -> Result<PendingStep<'_>> {
        if self.is_done() {
            return Err(Error::Usage("episode exhausted; call reset".into()));
        }
        self.begin_step();
        Ok(PendingStep { env: self })
    }
}

/// A step whose sampling and prediction are done but whose action is not
/// yet chosen.
pub struct PendingStep<'a> {
    env: &'a mut SensorEnv,
}

impl PendingStep<'_> {
    pub fn env(&self) -> &SensorEnv {
        self.env
    }

    pub fn act(self, action: usize) -> Result<StepOutcome> {
        if action > self.env.cfg.n_sensors() {
            return Err(Error::Usage(format!("action {action} out of range")));
        }
        self.env.finish_step(action)
    }
}

/// One row of an episode transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub k: usize,
    pub action: usize,
    pub delay: Option<usize>,
    pub trace_p: f64,
    pub energy: f64,
    pub reward: f64,
}

impl From<&StepOutcome> for TranscriptRow {
    fn from(o: &StepOutcome) -> Self {
        Self {
            k: o.info.time,
            action: o.info.action,
            delay: o.info.delay,
            trace_p: o.info.trace_p,
            energy: o.info.energy,
            reward: o.reward,
        }
    }
}

/// Writes `k,action,delay,trace_P,energy,reward` rows; an empty delay field
/// means nothing was fused.
pub fn write_transcript<W: Write>(rows: &[TranscriptRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "action", "delay", "trace_P", "energy", "reward"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.action.to_string(),
            r.delay.map(|d| d.to_string()).unwrap_or_default(),
            r.trace_p.to_string(),
            r.energy.to_string(),
            r.reward.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
