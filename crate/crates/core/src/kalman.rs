//! Kalman prediction and timely measurement update.

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Mat, Vector};
use crate::linmodel::{ProcessModel, SensorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefKind {
    Prior,
    Posterior,
}

/// Gaussian belief `(x̂, P)` about the state at step `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub mean: Vector,
    pub cov: Mat,
    pub time: usize,
    pub kind: BeliefKind,
}

impl BeliefState {
    pub fn new(mean: Vector, cov: Mat, time: usize, kind: BeliefKind) -> Self {
        Self { mean, cov, time, kind }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

/// Covariance update form used after computing the gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceForm {
    /// `(I - K C) P`, symmetrized.
    #[default]
    Standard,
    /// `(I - K C) P (I - K C)ᵀ + K R Kᵀ`.
    Joseph,
}

/// `x̂' = A x̂`, `P' = A P Aᵀ + Q`.
pub fn predict(belief: &BeliefState, model: &ProcessModel) -> BeliefState {
    let a = model.a();
    let cov = a * &belief.cov * a.transpose() + model.q();
    BeliefState {
        mean: a * &belief.mean,
        cov: symmetrize(&cov),
        time: belief.time + 1,
        kind: BeliefKind::Prior,
    }
}

pub fn update(belief: &BeliefState, sensor: &SensorModel, y: &Vector) -> Result<BeliefState> {
    update_with(belief, sensor.c(), sensor.r(), y, CovarianceForm::Standard)
}

/// Measurement update with explicit `C`, `R`.
///
/// The gain is obtained from a Cholesky solve against the innovation
/// covariance `S = C P Cᵀ + R` rather than an explicit inverse.
pub fn update_with(
    belief: &BeliefState,
    c: &Mat,
    r: &Mat,
    y: &Vector,
    form: CovarianceForm,
) -> Result<BeliefState> {
    if y.len() != c.nrows() {
        return Err(Error::Usage(format!(
            "measurement has length {}, sensor produces {}",
            y.len(),
            c.nrows()
        )));
    }
    let p = &belief.cov;
    let cp = c * p;
    let s = symmetrize(&(&cp * c.transpose() + r));
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Filter("innovation covariance is not positive definite".into()))?;
    // S Kᵀ = C P  (P and S symmetric)
    let gain = chol.solve(&cp).transpose();
    let innovation = y - c * &belief.mean;
    let mean = &belief.mean + &gain * innovation;
    let n = belief.dim();
    let i_kc = Mat::identity(n, n) - &gain * c;
    let cov = match form {
        CovarianceForm::Standard => &i_kc * p,
        CovarianceForm::Joseph => &i_kc * p * i_kc.transpose() + &gain * r * gain.transpose(),
    };
    Ok(BeliefState {
        mean,
        cov: symmetrize(&cov),
        time: belief.time,
        kind: BeliefKind::Posterior,
    })
}
