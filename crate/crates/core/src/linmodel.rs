//! Process and sensor models, random system generation and ground-truth
//! simulation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, min_sym_eigenvalue, psd_sqrt, Mat, Vector};
use crate::seeds::{rng_for, SimRng};

/// Linear time-invariant process `x[k+1] = A x[k] + w[k]`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessModel {
    a: Mat,
    q: Mat,
    noise_factor: Mat,
}

impl ProcessModel {
    pub fn new(a: Mat, q: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Config(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if q.shape() != (n, n) {
            return Err(Error::Config(format!("Q must be {n}x{n}")));
        }
        if a.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("A and Q must be finite".into()));
        }
        let scale = q.amax().max(1.0);
        if max_asymmetry(&q) > 1e-9 * scale {
            return Err(Error::Config("Q must be symmetric".into()));
        }
        if min_sym_eigenvalue(&q) < -1e-10 * scale {
            return Err(Error::Config("Q must be positive semi-definite".into()));
        }
        let noise_factor = psd_sqrt(&q);
        Ok(Self { a, q, noise_factor })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    /// Draws `w ~ N(0, Q)` through the eigenvalue-clipped square root of `Q`.
    pub fn sample_noise(&self, rng: &mut impl Rng) -> Vector {
        let z = standard_normal_vector(self.dim(), rng);
        &self.noise_factor * z
    }

    /// One step of the true dynamics: `A x + w`.
    pub fn step_truth(&self, x: &Vector, rng: &mut impl Rng) -> Vector {
        &self.a * x + self.sample_noise(rng)
    }
}

/// A measurement held by a sensor: generation time and value.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: usize,
    pub value: Vector,
}

/// Sensor `y = C x + v`, `v ~ N(0, R)`, which produces a fresh sample with
/// probability `sample_prob` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    id: usize,
    c: Mat,
    r: Mat,
    sample_prob: f64,
    distance: f64,
    energy: f64,
    noise_factor: Mat,
}

impl SensorModel {
    /// `id` is 1-based; 0 is reserved for the idle action.
    pub fn new(id: usize, c: Mat, r: Mat, sample_prob: f64, distance: f64) -> Result<Self> {
        let (m, n) = c.shape();
        if id == 0 {
            return Err(Error::Config("sensor ids start at 1".into()));
        }
        if m == 0 || m > n {
            return Err(Error::Config(format!(
                "sensor {id}: measurement dimension {m} must be in 1..={n}"
            )));
        }
        if r.shape() != (m, m) {
            return Err(Error::Config(format!("sensor {id}: R must be {m}x{m}")));
        }
        if c.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("sensor {id}: C and R must be finite")));
        }
        if !(0.0..=1.0).contains(&sample_prob) {
            return Err(Error::Config(format!(
                "sensor {id}: sample probability {sample_prob} outside [0, 1]"
            )));
        }
        if !(distance > 0.0) {
            return Err(Error::Config(format!("sensor {id}: distance must be positive")));
        }
        if max_asymmetry(&r) > 1e-9 * r.amax().max(1.0) {
            return Err(Error::Config(format!("sensor {id}: R must be symmetric")));
        }
        let chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config(format!("sensor {id}: R must be positive definite")))?;
        Ok(Self {
            id,
            c,
            r,
            sample_prob,
            distance,
            energy: 0.0,
            noise_factor: chol.l(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    pub fn r(&self) -> &Mat {
        &self.r
    }

    pub fn meas_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn sample_prob(&self) -> f64 {
        self.sample_prob
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Per-transmission energy in joules (zero until assigned by the link model).
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn set_energy(&mut self, joules: f64) {
        self.energy = joules;
    }

    pub fn with_sample_prob(mut self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("sample probability {p} outside [0, 1]")));
        }
        self.sample_prob = p;
        Ok(self)
    }

    pub fn measure(&self, x: &Vector, rng: &mut impl Rng) -> Vector {
        let z = standard_normal_vector(self.meas_dim(), rng);
        &self.c * x + &self.noise_factor * z
    }

    /// Bernoulli(`sample_prob`) draw of a fresh measurement at time `k`.
    ///
    /// The Bernoulli variate and the noise vector are always drawn so the
    /// stream consumption does not depend on the outcome.
    pub fn maybe_sample(&self, x: &Vector, k: usize, rng: &mut impl Rng) -> Option<Sample> {
        let u: f64 = rng.random();
        let y = self.measure(x, rng);
        (u < self.sample_prob).then_some(Sample { time: k, value: y })
    }
}

pub fn standard_normal_vector(n: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// True trajectory and the latest sample held by each sensor.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    trajectory: Vec<Vector>,
    latest: Vec<Option<Sample>>,
}

impl GroundTruth {
    pub fn new(x0: Vector, n_sensors: usize) -> Self {
        Self {
            trajectory: vec![x0],
            latest: vec![None; n_sensors],
        }
    }

    pub fn time(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn state(&self) -> &Vector {
        self.trajectory.last().expect("trajectory holds x0")
    }

    pub fn trajectory(&self) -> &[Vector] {
        &self.trajectory
    }

    pub fn advance(&mut self, model: &ProcessModel, rng: &mut impl Rng) -> &Vector {
        let next = model.step_truth(self.state(), rng);
        self.trajectory.push(next);
        self.state()
    }

    /// Lets every sensor try to sample the current state; a new sample
    /// replaces the held one.
    pub fn sample_sensors(&mut self, sensors: &[SensorModel], rng: &mut impl Rng) {
        let k = self.time();
        let x = self.trajectory[k].clone();
        for (slot, sensor) in self.latest.iter_mut().zip(sensors) {
            if let Some(s) = sensor.maybe_sample(&x, k, rng) {
                *slot = Some(s);
            }
        }
    }

    /// Latest sample of sensor `id` (1-based).
    pub fn latest(&self, id: usize) -> Option<&Sample> {
        self.latest.get(id.checked_sub(1)?)?.as_ref()
    }

    pub fn latest_all(&self) -> &[Option<Sample>] {
        &self.latest
    }
}

/// Ranges for random system generation. Defaults are the reference setup:
/// five states, twenty sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub state_dim: usize,
    pub n_sensors: usize,
    /// Entries of `A` ~ U[lo, hi).
    pub a_range: [f64; 2],
    /// Entries of `C_i` ~ U[lo, hi).
    pub c_range: [f64; 2],
    /// Entries of the factor `q` in `Q = q qᵀ + εI`.
    pub q_range: [f64; 2],
    /// Entries of the factor `r` in `R_i = r rᵀ + εI`.
    pub r_range: [f64; 2],
    /// Upper bound of the measurement dimension; `None` means `state_dim`.
    pub max_meas_dim: Option<usize>,
    pub sample_prob_range: [f64; 2],
    /// Sensor distances in meters.
    pub distance_range: [f64; 2],
    pub eps: f64,
    /// When set, `A` is rescaled to this spectral radius after drawing.
    pub rescale_spectral_radius: Option<f64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            state_dim: 5,
            n_sensors: 20,
            a_range: [0.0, 1.0],
            c_range: [-1.0, 1.0],
            q_range: [0.0, 1.0],
            r_range: [0.0, 1.0],
            max_meas_dim: None,
            sample_prob_range: [0.4, 0.6],
            distance_range: [100.0, 300.0],
            eps: 0.01,
            rescale_spectral_radius: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.state_dim == 0 {
            return bad("state_dim must be at least 1".into());
        }
        if self.n_sensors == 0 {
            return bad("n_sensors must be at least 1".into());
        }
        for (name, r) in [
            ("a_range", self.a_range),
            ("c_range", self.c_range),
            ("q_range", self.q_range),
            ("r_range", self.r_range),
            ("sample_prob_range", self.sample_prob_range),
            ("distance_range", self.distance_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} must be a finite [lo, hi] with lo <= hi"));
            }
        }
        if self.sample_prob_range[0] < 0.0 || self.sample_prob_range[1] > 1.0 {
            return bad("sample_prob_range must lie in [0, 1]".into());
        }
        if self.distance_range[0] <= 0.0 {
            return bad("distances must be positive".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if let Some(m) = self.max_meas_dim {
            if m == 0 || m > self.state_dim {
                return bad(format!("max_meas_dim must be in 1..={}", self.state_dim));
            }
        }
        if let Some(rho) = self.rescale_spectral_radius {
            if !(rho > 0.0 && rho.is_finite()) {
                return bad("rescale_spectral_radius must be positive".into());
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut SimRng, range: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    range[0] + u * (range[1] - range[0])
}

fn uniform_matrix(rng: &mut SimRng, rows: usize, cols: usize, range: [f64; 2]) -> Mat {
    // Row-major fill so the draw order reads naturally.
    let vals: Vec<f64> = (0..rows * cols).map(|_| uniform(rng, range)).collect();
    Mat::from_row_slice(rows, cols, &vals)
}

fn gram_plus_eps(f: &Mat, eps: f64) -> Mat {
    let n = f.nrows();
    let g = f * f.transpose() + Mat::identity(n, n) * eps;
    crate::linalg::symmetrize(&g)
}

pub fn spectral_radius(a: &Mat) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Draws a random process and sensor fleet.
///
/// Each quantity comes from its own labelled stream, so changing one range
/// (say the sampling probabilities) leaves every other draw untouched.
/// Sensor energies are left at zero; see [`crate::link_energy`].
pub fn generate_system(seed: u64, cfg: &GenerationConfig) -> Result<(ProcessModel, Vec<SensorModel>)> {
    cfg.validate()?;
    let n = cfg.state_dim;
    let max_m = cfg.max_meas_dim.unwrap_or(n);

    let mut rng_a = rng_for(seed, "system/A");
    let mut a = uniform_matrix(&mut rng_a, n, n, cfg.a_range);
    if let Some(target) = cfg.rescale_spectral_radius {
        let rho = spectral_radius(&a);
        if rho > 0.0 {
            a *= target / rho;
        }
    }
    let mut rng_q = rng_for(seed, "system/Q");
    let q = gram_plus_eps(&uniform_matrix(&mut rng_q, n, n, cfg.q_range), cfg.eps);
    let model = ProcessModel::new(a, q)?;

    let mut rng_m = rng_for(seed, "system/meas_dim");
    let mut rng_c = rng_for(seed, "system/C");
    let mut rng_r = rng_for(seed, "system/R");
    let mut rng_p = rng_for(seed, "system/sample_prob");
    let mut rng_d = rng_for(seed, "system/distance");
    let mut sensors = Vec::with_capacity(cfg.n_sensors);
    for id in 1..=cfg.n_sensors {
        let m = rng_m.random_range(1..=max_m);
        let c = uniform_matrix(&mut rng_c, m, n, cfg.c_range);
        let r = gram_plus_eps(&uniform_matrix(&mut rng_r, m, m, cfg.r_range), cfg.eps);
        let p = uniform(&mut rng_p, cfg.sample_prob_range);
        let d = uniform(&mut rng_d, cfg.distance_range);
        sensors.push(SensorModel::new(id, c, r, p, d)?);
    }
    Ok((model, sensors))
}
