//! Fusion of stale measurements.
//!
//! A measurement generated at step `τ` and received at step `k = τ + δ` is
//! folded in without re-filtering:
//!
//! 1. the stored prior at `τ` is updated with the measurement;
//! 2. the resulting branch is predicted forward one step at a time, and at
//!    every step where the system fused something it is merged with the
//!    stored system posterior through [`fuse_posteriors`];
//! 3. the branch at `k` becomes the new system belief at `k`.
//!
//! [`replay_oracle`] is the exact alternative (re-running the filter over the
//! complete, correctly ordered measurement log) and exists for testing.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kalman::{self, BeliefKind, BeliefState};
use crate::linalg::{symmetrize, Mat, Vector};
use crate::linmodel::{ProcessModel, SensorModel};

/// Default number of steps kept in a [`BeliefBuffer`].
pub const DEFAULT_BUFFER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DelayedMeasurement {
    pub sensor_id: usize,
    pub gen_time: usize,
    pub value: Vector,
    pub delay: usize,
}

impl DelayedMeasurement {
    /// Measurement generated at `gen_time` and received at `now`.
    pub fn new(sensor_id: usize, gen_time: usize, value: Vector, now: usize) -> Result<Self> {
        let delay = now.checked_sub(gen_time).ok_or_else(|| {
            Error::Usage(format!("measurement generated at {gen_time} is from the future (now {now})"))
        })?;
        Ok(Self {
            sensor_id,
            gen_time,
            value,
            delay,
        })
    }

    pub fn arrival_time(&self) -> usize {
        self.gen_time + self.delay
    }
}

/// Stored prior/posterior pair for one step, plus the sensor fused there.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub prior: BeliefState,
    pub posterior: BeliefState,
    pub fused_sensor: Option<usize>,
}

/// Ring of the last `capacity` steps of the estimator.
#[derive(Debug, Clone)]
pub struct BeliefBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: usize,
    dropped: usize,
}

impl BeliefBuffer {
    /// Starts from a belief at its own time step; it serves as both prior
    /// and posterior of that step.
    pub fn new(initial: BeliefState, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be at least 1".into()));
        }
        let mut entries = VecDeque::with_capacity(capacity);
        entries.push_back(BufferEntry {
            prior: initial.clone(),
            posterior: BeliefState {
                kind: BeliefKind::Posterior,
                ..initial
            },
            fused_sensor: None,
        });
        Ok(Self {
            entries,
            capacity,
            dropped: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of measurements discarded for being older than the buffer.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn time(&self) -> usize {
        self.last().posterior.time
    }

    pub fn oldest_time(&self) -> usize {
        self.entries.front().expect("buffer is never empty").posterior.time
    }

    fn last(&self) -> &BufferEntry {
        self.entries.back().expect("buffer is never empty")
    }

    /// Current system belief (posterior at the latest step).
    pub fn current(&self) -> &BeliefState {
        &self.last().posterior
    }

    pub fn current_prior(&self) -> &BeliefState {
        &self.last().prior
    }

    pub fn entry(&self, time: usize) -> Option<&BufferEntry> {
        let idx = time.checked_sub(self.oldest_time())?;
        self.entries.get(idx)
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// Predicts the current posterior one step ahead and opens a new slot
    /// whose posterior equals the prior until something is fused.
    pub fn advance(&mut self, model: &ProcessModel) -> &BeliefState {
        let prior = kalman::predict(self.current(), model);
        let posterior = BeliefState {
            kind: BeliefKind::Posterior,
            ..prior.clone()
        };
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BufferEntry {
            prior,
            posterior,
            fused_sensor: None,
        });
        &self.last().prior
    }

    /// Runs the update/propagate/fuse pipeline without touching the buffer.
    pub fn delayed_estimate(
        &self,
        meas: &DelayedMeasurement,
        sensor: &SensorModel,
        model: &ProcessModel,
    ) -> Result<BeliefState> {
        let now = self.time();
        let tau = meas.gen_time;
        if tau > now {
            return Err(Error::Usage(format!(
                "measurement generated at {tau} is ahead of the estimator (step {now})"
            )));
        }
        if meas.arrival_time() != now {
            return Err(Error::Usage(format!(
                "measurement arrives at {}, estimator is at step {now}",
                meas.arrival_time()
            )));
        }
        let start = self.entry(tau).ok_or(Error::StaleMeasurement {
            gen_time: tau,
            oldest: self.oldest_time(),
        })?;

        let mut branch = kalman::update(&start.prior, sensor, &meas.value)?;
        if start.fused_sensor.is_some() {
            branch = fuse_posteriors(&branch, &start.posterior)?;
        }
        for j in tau + 1..=now {
            branch = kalman::predict(&branch, model);
            let stored = self.entry(j).expect("steps between τ and now are buffered");
            if stored.fused_sensor.is_some() {
                branch = fuse_posteriors(&branch, &stored.posterior)?;
            }
        }
        branch.kind = BeliefKind::Posterior;
        Ok(branch)
    }

    /// Fuses a (possibly stale) measurement and adopts the corrected belief as
    /// the system posterior at the current step. Stale measurements are
    /// counted and rejected without changing the belief.
    pub fn apply_delayed(
        &mut self,
        meas: &DelayedMeasurement,
        sensor: &SensorModel,
        model: &ProcessModel,
    ) -> Result<BeliefState> {
        match self.delayed_estimate(meas, sensor, model) {
            Ok(corrected) => {
                let last = self.entries.back_mut().expect("buffer is never empty");
                last.posterior = corrected.clone();
                last.fused_sensor = Some(meas.sensor_id);
                Ok(corrected)
            }
            Err(e @ Error::StaleMeasurement { .. }) => {
                self.dropped += 1;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }
}

/// Merges a propagated branch with the stored system posterior, treating the
/// latter as a Gaussian observation of the state:
/// `K = Pᵖ (Pᵖ + P)⁻¹`, `x̂ = x̂ᵖ + K (x̂ˢ − x̂ᵖ)`, `P = (I − K) Pᵖ`.
pub fn fuse_posteriors(propagated: &BeliefState, system: &BeliefState) -> Result<BeliefState> {
    if propagated.time != system.time {
        return Err(Error::Usage(format!(
            "cannot fuse beliefs at steps {} and {}",
            propagated.time, system.time
        )));
    }
    let n = propagated.dim();
    let pp = &propagated.cov;
    let sum = symmetrize(&(pp + &system.cov));
    // (Pᵖ + P) Kᵀ = Pᵖ
    let gain_t = match sum.clone().cholesky() {
        Some(chol) => chol.solve(pp),
        None => {
            log::warn!("fusion covariance sum is singular at step {}, regularizing", system.time);
            let reg = sum + Mat::identity(n, n) * 1e-9;
            reg.lu()
                .solve(pp)
                .ok_or_else(|| Error::Filter("fusion covariance sum is singular".into()))?
        }
    };
    let gain = gain_t.transpose();
    let mean = &propagated.mean + &gain * (&system.mean - &propagated.mean);
    let cov = (Mat::identity(n, n) - &gain) * pp;
    Ok(BeliefState {
        mean,
        cov: symmetrize(&cov),
        time: system.time,
        kind: BeliefKind::Posterior,
    })
}

/// Trace reduction `trace(P_prior) − trace(P_fused)` achieved by a fusion.
pub fn info_gain(prior_trace: f64, fused: &BeliefState) -> f64 {
    prior_trace - fused.trace()
}

/// One entry of a complete measurement log, stamped with its generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedMeasurement {
    pub time: usize,
    pub sensor_id: usize,
    pub value: Vector,
}

/// Exact re-filtering: starting from the prior at `start.time`, apply every
/// logged measurement at its generation time (log order within a step) and
/// predict up to `end_time`.
pub fn replay_oracle(
    start: &BeliefState,
    log: &[LoggedMeasurement],
    model: &ProcessModel,
    sensors: &[SensorModel],
    end_time: usize,
) -> Result<BeliefState> {
    if end_time < start.time {
        return Err(Error::Usage("replay must end at or after its start".into()));
    }
    if let Some(bad) = log.iter().find(|m| m.time < start.time || m.time > end_time) {
        return Err(Error::Usage(format!(
            "logged measurement at step {} outside replay window {}..={end_time}",
            bad.time, start.time
        )));
    }
    let mut belief = start.clone();
    for t in start.time..=end_time {
        if t > start.time {
            belief = kalman::predict(&belief, model);
        }
        for m in log.iter().filter(|m| m.time == t) {
            let sensor = sensor_by_id(sensors, m.sensor_id)?;
            belief = kalman::update(&belief, sensor, &m.value)?;
        }
    }
    Ok(belief)
}

pub fn sensor_by_id(sensors: &[SensorModel], id: usize) -> Result<&SensorModel> {
    id.checked_sub(1)
        .and_then(|i| sensors.get(i))
        .filter(|s| s.id() == id)
        .ok_or_else(|| Error::Usage(format!("unknown sensor id {id}")))
}
