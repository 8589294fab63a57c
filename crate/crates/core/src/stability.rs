//! Feasibility of bounded estimation error under scheduling.
//!
//! `A` is split into its unstable (|λ| ≥ 1) and stable invariant subspaces.
//! Estimation error can be kept bounded only if the unstable block `A_u` is
//! observable through some schedule: picking sensor `γ_i` at step `i` for
//! `i = 0..r`, the stack `[C_γ0ᵘ; C_γ1ᵘ A_u; …; C_γ(r-1)ᵘ A_u^(r-1)]` has rank
//! `r = dim A_u`.

use std::fmt;

use nalgebra::Complex;
use rand::seq::IndexedRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, vstack, Mat};
use crate::linmodel::SensorModel;
use crate::seeds::SimRng;

/// Half-width of the band around |λ| = 1 that is classified unstable.
pub const DEFAULT_EIG_TOL: f64 = 1e-9;
/// Singular values above `RANK_TOL * σ_max` count towards the rank.
pub const RANK_TOL: f64 = 1e-9;
/// Above this many candidate schedules the search switches to randomized greedy.
pub const EXHAUSTIVE_LIMIT: f64 = 1e4;
pub const RANDOM_RESTARTS: usize = 1000;

#[derive(Debug, Clone)]
pub struct SpectralSplit {
    /// Dimension of the unstable invariant subspace.
    pub r: usize,
    /// `A` restricted to the unstable subspace (r×r).
    pub a_u: Mat,
    /// `[U_u | U_s]`: first `r` columns span the unstable subspace, the rest
    /// the stable one. In these coordinates `A` is block diagonal.
    pub basis: Mat,
    pub rho: f64,
    pub eigenvalues: Vec<Complex<f64>>,
    /// True when some eigenvalue fell inside the boundary band.
    pub boundary: bool,
}

impl SpectralSplit {
    pub fn unstable_basis(&self) -> Mat {
        self.basis.columns(0, self.r).into_owned()
    }

    /// `C_i` expressed on the unstable coordinates.
    pub fn unstable_columns(&self, c: &Mat) -> Mat {
        c * self.unstable_basis()
    }
}

fn is_real(z: &Complex<f64>) -> bool {
    z.im.abs() <= 1e-12 * z.norm().max(1.0)
}

/// Product of the (real) factors belonging to `eigs`; complex eigenvalues are
/// taken once per conjugate pair as `A² − 2 Re(λ) A + |λ|² I`. Each factor is
/// normalized so the product cannot overflow; only its range matters.
fn annihilating_product(a: &Mat, eigs: &[Complex<f64>]) -> Mat {
    let n = a.nrows();
    let id = Mat::identity(n, n);
    let mut acc = id.clone();
    for z in eigs {
        let factor = if is_real(z) {
            a - &id * z.re
        } else if z.im > 0.0 {
            a * a - a * (2.0 * z.re) + &id * z.norm_sqr()
        } else {
            continue;
        };
        let norm = factor.norm();
        acc = if norm > 0.0 { factor * acc / norm } else { factor * acc };
    }
    acc
}

/// Orthonormal basis of the `k` dominant left singular directions of `m`.
fn dominant_range(m: &Mat, k: usize) -> Mat {
    let n = m.nrows();
    if k == 0 {
        return Mat::zeros(n, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = Mat::zeros(n, k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        out.set_column(dst, &u.column(src));
    }
    out
}

/// Splits `A` into unstable and stable invariant subspaces.
///
/// Eigenvalues with |λ| ≥ 1 − tol are unstable; conjugate pairs stay together
/// so all arithmetic is real. The unstable subspace is the range of the
/// product of the stable factors `(A − λI)` (and vice versa), which by the
/// primary decomposition theorem is exactly the generalized eigenspace.
pub fn spectral_split(a: &Mat, tol: f64) -> Result<SpectralSplit> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Config("A must be square and non-empty".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("A must be finite".into()));
    }
    let eigenvalues: Vec<Complex<f64>> = a.complex_eigenvalues().iter().copied().collect();
    let rho = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);

    let mut boundary = false;
    let (mut unstable, mut stable) = (Vec::new(), Vec::new());
    for z in &eigenvalues {
        let m = z.norm();
        if m >= 1.0 - tol {
            if m < 1.0 + tol {
                boundary = true;
            }
            unstable.push(*z);
        } else {
            stable.push(*z);
        }
    }
    if boundary {
        log::warn!("eigenvalue on the unit-circle band (tol {tol}); classified unstable");
    }
    let r = unstable.len();
    let u_unstable = dominant_range(&annihilating_product(a, &stable), r);
    let u_stable = dominant_range(&annihilating_product(a, &unstable), n - r);
    let mut basis = Mat::zeros(n, n);
    basis.columns_mut(0, r).copy_from(&u_unstable);
    basis.columns_mut(r, n - r).copy_from(&u_stable);
    let a_u = u_unstable.transpose() * a * &u_unstable;
    Ok(SpectralSplit {
        r,
        a_u,
        basis,
        rho,
        eigenvalues,
        boundary,
    })
}

/// `B_j = [C_1ᵘ; …; C_Mᵘ] A_u^j`, for `j = 0..r`.
pub fn observability_blocks(sensors: &[SensorModel], split: &SpectralSplit) -> Vec<Mat> {
    let r = split.r;
    let stacked: Vec<Mat> = sensors.iter().map(|s| split.unstable_columns(s.c())).collect();
    let c_u = vstack(&stacked, r);
    let mut blocks = Vec::with_capacity(r);
    let mut power = Mat::identity(r, r);
    for _ in 0..r {
        blocks.push(&c_u * &power);
        power = &split.a_u * power;
    }
    blocks
}

/// Stacked observability matrix `O = [B_0; B_1; …; B_(r-1)]`.
pub fn build_observability(sensors: &[SensorModel], split: &SpectralSplit) -> Result<Mat> {
    if split.r == 0 {
        return Err(Error::Usage("no unstable modes: observability matrix is empty".into()));
    }
    Ok(vstack(&observability_blocks(sensors, split), split.r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub feasible: bool,
    pub rank_o: usize,
    pub r: usize,
    pub rho: f64,
    pub condition1_holds: bool,
    pub condition2_holds: bool,
    /// Sensor ids `γ_0..γ_(r-1)` whose stacked rows reach rank `r`.
    pub witness_schedule: Option<Vec<usize>>,
    pub boundary_warning: bool,
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "feasible: {}", self.feasible)?;
        writeln!(f, "spectral_radius: {}", self.rho)?;
        writeln!(f, "unstable_dim: {}", self.r)?;
        writeln!(f, "rank_O: {}", self.rank_o)?;
        writeln!(f, "condition1_rank: {}", self.condition1_holds)?;
        writeln!(f, "condition2_transversal: {}", self.condition2_holds)?;
        match &self.witness_schedule {
            Some(w) => {
                let ids: Vec<String> = w.iter().map(|i| i.to_string()).collect();
                writeln!(f, "witness_schedule: [{}]", ids.join(", "))?;
            }
            None => writeln!(f, "witness_schedule: none")?,
        }
        write!(f, "boundary_warning: {}", self.boundary_warning)
    }
}

/// Per-step candidate row blocks: `cands[i][s] = C_sᵘ A_u^i`.
fn candidate_blocks(sensors: &[SensorModel], split: &SpectralSplit) -> Vec<Vec<Mat>> {
    let r = split.r;
    let base: Vec<Mat> = sensors.iter().map(|s| split.unstable_columns(s.c())).collect();
    let mut power = Mat::identity(r, r);
    let mut out = Vec::with_capacity(r);
    for _ in 0..r {
        out.push(base.iter().map(|c| c * &power).collect());
        power = &split.a_u * power;
    }
    out
}

struct ScheduleSearch<'a> {
    cands: &'a [Vec<Mat>],
    r: usize,
    max_rows: usize,
    scale: f64,
}

impl<'a> ScheduleSearch<'a> {
    fn rank(&self, rows: &[&Mat]) -> usize {
        let owned: Vec<Mat> = rows.iter().map(|m| (*m).clone()).collect();
        numerical_rank(&vstack(&owned, self.r), RANK_TOL, self.scale)
    }

    fn greedy(&self) -> Option<Vec<usize>> {
        let mut chosen: Vec<&Mat> = Vec::new();
        let mut schedule = Vec::new();
        for step in self.cands {
            let (best, _) = step
                .iter()
                .enumerate()
                .map(|(s, block)| {
                    let mut trial = chosen.clone();
                    trial.push(block);
                    (s, self.rank(&trial))
                })
                .fold((0, 0), |acc, (s, rank)| if rank > acc.1 { (s, rank) } else { acc });
            chosen.push(&step[best]);
            schedule.push(best);
        }
        (self.rank(&chosen) == self.r).then_some(schedule)
    }

    fn exhaustive(&self, step: usize, chosen: &mut Vec<&'a Mat>, schedule: &mut Vec<usize>) -> bool {
        let rank = self.rank(chosen);
        if rank == self.r {
            // Remaining steps can take any sensor.
            schedule.resize(self.r, 0);
            return true;
        }
        if step == self.r || rank + (self.r - step) * self.max_rows < self.r {
            return false;
        }
        for (s, block) in self.cands[step].iter().enumerate() {
            chosen.push(block);
            schedule.push(s);
            if self.exhaustive(step + 1, chosen, schedule) {
                return true;
            }
            chosen.pop();
            schedule.pop();
        }
        false
    }

    fn randomized(&self, restarts: usize, rng: &mut SimRng) -> Option<Vec<usize>> {
        let m = self.cands.first().map_or(0, Vec::len);
        let all: Vec<usize> = (0..m).collect();
        for _ in 0..restarts {
            let mut chosen: Vec<&Mat> = Vec::new();
            let mut schedule = Vec::new();
            for step in self.cands {
                let current = self.rank(&chosen);
                let improving: Vec<usize> = (0..m)
                    .filter(|&s| {
                        let mut trial = chosen.clone();
                        trial.push(&step[s]);
                        self.rank(&trial) > current
                    })
                    .collect();
                let pool = if improving.is_empty() { &all } else { &improving };
                let pick = *pool.choose(rng).expect("at least one sensor");
                chosen.push(&step[pick]);
                schedule.push(pick);
            }
            if self.rank(&chosen) == self.r {
                return Some(schedule);
            }
        }
        None
    }
}

/// Size the observability rows would have without cancellation:
/// `max_i ‖C_i‖ · max(1, ‖A_u‖)^(r−1)`. Rows orthogonal to the unstable
/// subspace come out at rounding level relative to this.
fn rank_scale(sensors: &[SensorModel], split: &SpectralSplit) -> f64 {
    let c_max = sensors.iter().map(|s| s.c().norm()).fold(0.0, f64::max);
    c_max * split.a_u.norm().max(1.0).powi(split.r.saturating_sub(1) as i32)
}

/// Decides feasibility:
///
/// 1. `rank(O) = r`;
/// 2. there is a schedule choosing one sensor per step whose stacked rows
///    (`i`-th block drawn from `row(B_i)`) are independent with rank `r`.
///
/// Condition 2 is searched greedily first, then exhaustively when there are
/// at most [`EXHAUSTIVE_LIMIT`] schedules, otherwise by randomized greedy
/// restarts with a fixed seed.
pub fn check_feasibility(sensors: &[SensorModel], split: &SpectralSplit) -> StabilityReport {
    let r = split.r;
    if r == 0 {
        return StabilityReport {
            feasible: true,
            rank_o: 0,
            r: 0,
            rho: split.rho,
            condition1_holds: true,
            condition2_holds: true,
            witness_schedule: Some(Vec::new()),
            boundary_warning: split.boundary,
        };
    }
    let scale = rank_scale(sensors, split);
    let rank_o = if sensors.is_empty() {
        0
    } else {
        numerical_rank(&vstack(&observability_blocks(sensors, split), r), RANK_TOL, scale)
    };
    let condition1 = rank_o == r;

    let witness = if condition1 {
        let cands = candidate_blocks(sensors, split);
        let search = ScheduleSearch {
            cands: &cands,
            r,
            max_rows: sensors.iter().map(|s| s.meas_dim()).max().unwrap_or(0),
            scale,
        };
        search.greedy().or_else(|| {
            if (sensors.len() as f64).powi(r as i32) <= EXHAUSTIVE_LIMIT {
                let mut schedule = Vec::new();
                search
                    .exhaustive(0, &mut Vec::new(), &mut schedule)
                    .then_some(schedule)
            } else {
                let mut rng = SimRng::seed_from_u64(0x5eed);
                search.randomized(RANDOM_RESTARTS, &mut rng)
            }
        })
    } else {
        None
    };
    let witness = witness.map(|w| w.into_iter().map(|i| sensors[i].id()).collect::<Vec<_>>());
    let condition2 = witness.is_some();
    StabilityReport {
        feasible: condition1 && condition2,
        rank_o,
        r,
        rho: split.rho,
        condition1_holds: condition1,
        condition2_holds: condition2,
        witness_schedule: witness,
        boundary_warning: split.boundary,
    }
}

/// Convenience: split `A` with the default tolerance and check feasibility.
pub fn analyze(a: &Mat, sensors: &[SensorModel]) -> Result<StabilityReport> {
    let split = spectral_split(a, DEFAULT_EIG_TOL)?;
    Ok(check_feasibility(sensors, &split))
}
