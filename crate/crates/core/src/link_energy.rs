//! Free-space link budget and per-packet transmission energy.
//!
//! `G = λ² G_t G_r / (4π d)²`, `ρ = η P_t G / (N₀ B)` and
//! `E = (P_t + P_c) N_b / (B log₂(1 + ρ))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::SensorModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkBudget {
    /// Bits per packet.
    pub bits: f64,
    pub bandwidth_hz: f64,
    pub wavelength_m: f64,
    pub gain_tx: f64,
    pub gain_rx: f64,
    pub noise_density_dbm_per_hz: f64,
    pub pa_efficiency: f64,
    pub circuit_power_w: f64,
    pub tx_power_w: f64,
    pub min_snr_db: f64,
    /// Raise each sensor's transmit power until it meets `min_snr_db`.
    pub calibrate_tx_power: bool,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            bits: 280.0,
            bandwidth_hz: 2e6,
            wavelength_m: 0.125,
            gain_tx: 1.0,
            gain_rx: 1.0,
            noise_density_dbm_per_hz: -174.0,
            pa_efficiency: 0.8,
            circuit_power_w: 0.01,
            tx_power_w: 0.01,
            min_snr_db: 10.0,
            calibrate_tx_power: false,
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bits", self.bits),
            ("bandwidth_hz", self.bandwidth_hz),
            ("wavelength_m", self.wavelength_m),
            ("gain_tx", self.gain_tx),
            ("gain_rx", self.gain_rx),
            ("pa_efficiency", self.pa_efficiency),
            ("circuit_power_w", self.circuit_power_w),
            ("tx_power_w", self.tx_power_w),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.pa_efficiency > 1.0 {
            return Err(Error::Config("pa_efficiency must not exceed 1".into()));
        }
        if !self.noise_density_dbm_per_hz.is_finite() || !self.min_snr_db.is_finite() {
            return Err(Error::Config("noise density and minimum SNR must be finite".into()));
        }
        Ok(())
    }

    /// N₀ in W/Hz.
    pub fn noise_density_w_per_hz(&self) -> f64 {
        dbm_to_watts(self.noise_density_dbm_per_hz)
    }

    pub fn min_snr_linear(&self) -> f64 {
        db_to_linear(self.min_snr_db)
    }

    /// Friis free-space gain at distance `d` meters.
    pub fn channel_gain(&self, d: f64) -> Result<f64> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("distance must be positive, got {d}")));
        }
        let spread = 4.0 * PI * d;
        Ok(self.wavelength_m.powi(2) * self.gain_tx * self.gain_rx / (spread * spread))
    }

    /// SNR at the configured transmit power.
    pub fn snr(&self, gain: f64) -> f64 {
        self.snr_at_power(gain, self.tx_power_w)
    }

    pub fn snr_at_power(&self, gain: f64, tx_power_w: f64) -> f64 {
        self.pa_efficiency * tx_power_w * gain / (self.noise_density_w_per_hz() * self.bandwidth_hz)
    }

    /// Energy in joules to send one packet at SNR `rho`, configured power.
    pub fn tx_energy(&self, rho: f64) -> f64 {
        self.tx_energy_at_power(rho, self.tx_power_w)
    }

    pub fn tx_energy_at_power(&self, rho: f64, tx_power_w: f64) -> f64 {
        (tx_power_w + self.circuit_power_w) * self.bits / (self.bandwidth_hz * (1.0 + rho).log2())
    }

    /// Transmit power used by a sensor at distance `d`: the configured power,
    /// or in calibration mode the larger of that and the power reaching the
    /// minimum SNR.
    pub fn tx_power_for(&self, d: f64) -> Result<f64> {
        let gain = self.channel_gain(d)?;
        if !self.calibrate_tx_power {
            return Ok(self.tx_power_w);
        }
        let needed = self.min_snr_linear() * self.noise_density_w_per_hz() * self.bandwidth_hz
            / (self.pa_efficiency * gain);
        Ok(self.tx_power_w.max(needed))
    }

    /// Per-packet energy of a sensor at distance `d`.
    pub fn sensor_energy(&self, d: f64) -> Result<f64> {
        let gain = self.channel_gain(d)?;
        let power = self.tx_power_for(d)?;
        Ok(self.tx_energy_at_power(self.snr_at_power(gain, power), power))
    }
}

/// Energies of a fleet plus their maximum, used to normalize energy costs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub per_sensor: Vec<f64>,
    pub max: f64,
}

impl EnergyTable {
    /// Normalized cost `E_i / max E` of sensor `id` (1-based).
    pub fn normalized(&self, id: usize) -> f64 {
        self.per_sensor[id - 1] / self.max
    }
}

/// Computes and stores each sensor's energy; returns the cached table.
pub fn assign_energies(budget: &LinkBudget, sensors: &mut [SensorModel]) -> Result<EnergyTable> {
    budget.validate()?;
    let mut per_sensor = Vec::with_capacity(sensors.len());
    for s in sensors.iter_mut() {
        let e = budget.sensor_energy(s.distance())?;
        s.set_energy(e);
        per_sensor.push(e);
    }
    let max = per_sensor.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Config("fleet has no positive transmission energy".into()));
    }
    Ok(EnergyTable { per_sensor, max })
}
