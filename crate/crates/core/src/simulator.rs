//! Euler–Maruyama simulation of the jump-diffusion SDE
//!
//! ```text
//! dX_t = B X_t dt + (sqrt(2 c_i X_i) dW_i)_i + sum_i int z Ñ_i(dt, dz, X_i)
//! ```
//!
//! One step of length `h` from state `x`:
//!
//! - drift `B x h`;
//! - diffusion `sqrt(2 c_i x_i h) N_i` with independent standard normals;
//! - for each type `i`, `Poisson(x_i Λ_i h)` jumps drawn from the jump law
//!   truncated at `eps_jump` (`Λ_i` is the retained intensity), minus the
//!   compensator `x_i h int_{retained} z mu_i(dz)`;
//! - jumps below `eps_jump` are dropped together with their compensator, so
//!   the mean is unaffected and only the variance `int_{dropped} z∘z mu_i`
//!   is lost;
//! - negative coordinates are clamped to zero and counted.
//!
//! Jump intensities are frozen at the start of the step, which biases the
//! law by `O(h)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{BranchingMechanism, TruncatedJumps};
use crate::spectral::SpectralData;

/// A single step may not draw more jumps than this.
pub const MAX_JUMPS_PER_STEP: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub eps_jump: f64,
    pub seed: u64,
    pub extinction_threshold: f64,
    pub grid_stride: usize,
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1.0,
            eps_jump: 1e-3,
            seed: 42,
            extinction_threshold: 1e-12,
            grid_stride: 100,
            record_events: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be finite and at least dt, got {}",
                self.horizon
            )));
        }
        if !(self.extinction_threshold >= 0.0) {
            return Err(Error::InvalidArgument("extinction threshold must be >= 0".into()));
        }
        if self.grid_stride == 0 {
            return Err(Error::InvalidArgument("grid stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of steps and the actual step length, chosen so that the last
    /// step ends exactly at the horizon.
    pub fn steps(&self) -> (usize, f64) {
        let n = (self.horizon / self.dt - 1e-9).ceil().max(1.0) as usize;
        (n, self.horizon / n as f64)
    }

    /// Step index at which time `t` is reached; errors if `t` is not on the
    /// step grid.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let (n, h) = self.steps();
        let k = (t / h).round();
        if !(k >= 0.0) || k as usize > n || (k * h - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not on the simulation grid (step {h}, horizon {})",
                self.horizon
            )));
        }
        Ok(k as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub type_index: usize,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub t_grid: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub w: Vec<f64>,
    pub events: Vec<JumpEvent>,
    pub extinction_time: Option<f64>,
    pub clamps: usize,
}

/// Precomputed per-mechanism step data; shared read-only by all paths.
#[derive(Clone, Debug)]
pub struct Stepper {
    d: usize,
    h: f64,
    /// `I + h (B - R)` where column `i` of `R` is the retained jump mean of
    /// type `i`.
    a: DMatrix<f64>,
    /// `2 c_i h`.
    diffusion: DVector<f64>,
    jumps: Vec<TruncatedJumps>,
}

impl Stepper {
    pub fn new(mech: &BranchingMechanism, h: f64, eps_jump: f64) -> Result<Self> {
        let d = mech.dim();
        let jumps = mech
            .measures()
            .iter()
            .map(|m| {
                if m.is_zero() {
                    TruncatedJumps::new(m, d, 1.0)
                } else {
                    TruncatedJumps::new(m, d, eps_jump)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut a = DMatrix::identity(d, d) + mech.b() * h;
        for (i, law) in jumps.iter().enumerate() {
            for k in 0..d {
                a[(k, i)] -= h * law.retained_mean[k];
            }
        }
        for i in 0..d {
            if a[(i, i)] < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "step {h} too large: compensated drift of type {i} exceeds the mass in one step"
                )));
            }
        }
        Ok(Self {
            d,
            h,
            a,
            diffusion: mech.c() * (2.0 * h),
            jumps,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn jump_laws(&self) -> &[TruncatedJumps] {
        &self.jumps
    }

    /// Advances `x` by one step; `scratch` must have length `d`. Returns the
    /// number of clamped coordinates. `t` is the time at the start of the
    /// step and is used only to label events.
    pub fn step<R: Rng + ?Sized>(
        &self,
        x: &mut DVector<f64>,
        scratch: &mut DVector<f64>,
        rng: &mut R,
        t: f64,
        mut events: Option<&mut Vec<JumpEvent>>,
    ) -> Result<usize> {
        if x.iter().all(|&v| v == 0.0) {
            return Ok(0);
        }
        scratch.gemv(1.0, &self.a, x, 0.0);
        for i in 0..self.d {
            let xi = x[i];
            if xi <= 0.0 {
                continue;
            }
            let s2 = self.diffusion[i] * xi;
            if s2 > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                scratch[i] += s2.sqrt() * n;
            }
            let law = &self.jumps[i];
            if law.is_empty() {
                continue;
            }
            let mean = xi * law.intensity * self.h;
            let count = Poisson::new(mean)
                .map_err(|e| Error::Numerical(format!("jump count with mean {mean}: {e}")))?
                .sample(rng) as u64;
            if count > MAX_JUMPS_PER_STEP {
                return Err(Error::Numerical(format!(
                    "{count} jumps of type {i} in one step at t = {t} (mass {xi})"
                )));
            }
            for _ in 0..count {
                let z = law.sample(rng);
                *scratch += &z;
                if let Some(log) = events.as_deref_mut() {
                    log.push(JumpEvent { t, type_index: i, z });
                }
            }
        }
        let mut clamps = 0;
        for k in 0..self.d {
            let v = scratch[k];
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "state became non-finite at t = {t}: {:?} -> {:?}",
                    x.as_slice(),
                    scratch.as_slice()
                )));
            }
            if v < 0.0 {
                scratch[k] = 0.0;
                clamps += 1;
            }
        }
        std::mem::swap(x, scratch);
        Ok(clamps)
    }
}

/// Zeroes `x` and returns true when its total mass is below `threshold`.
pub fn absorb(x: &mut DVector<f64>, threshold: f64) -> bool {
    if x.sum() < threshold {
        x.fill(0.0);
        true
    } else {
        false
    }
}

fn check_x0(x0: &DVector<f64>, d: usize) -> Result<()> {
    if x0.len() != d || x0.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial state must be a finite nonnegative vector of length {d}"
        )));
    }
    Ok(())
}

impl Stepper {
    /// Simulates one path on `[0, config.horizon]`, recording every
    /// `grid_stride`-th step and the final one.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        spectral: &SpectralData,
        x0: &DVector<f64>,
        config: &SimConfig,
        rng: &mut R,
    ) -> Result<PathResult> {
        config.validate()?;
        check_x0(x0, self.d)?;
        let (n, h) = config.steps();
        if (h - self.h).abs() > 1e-15 * h {
            return Err(Error::InvalidArgument(format!(
                "stepper built for step {} but config gives {h}",
                self.h
            )));
        }
        let mut x = x0.clone();
        let mut scratch = DVector::zeros(self.d);
        let mut path = PathResult {
            t_grid: Vec::new(),
            x: Vec::new(),
            w: Vec::new(),
            events: Vec::new(),
            extinction_time: None,
            clamps: 0,
        };
        let record = |path: &mut PathResult, t: f64, x: &DVector<f64>| {
            path.t_grid.push(t);
            path.w.push(spectral.martingale(t, x));
            path.x.push(x.clone());
        };
        if absorb(&mut x, config.extinction_threshold) {
            path.extinction_time = Some(0.0);
        }
        record(&mut path, 0.0, &x);
        for k in 0..n {
            let t = k as f64 * h;
            if path.extinction_time.is_none() {
                let log = config.record_events.then_some(&mut path.events);
                path.clamps += self.step(&mut x, &mut scratch, rng, t, log)?;
                if absorb(&mut x, config.extinction_threshold) {
                    path.extinction_time = Some(if k + 1 == n { config.horizon } else { (k + 1) as f64 * h });
                }
            }
            if (k + 1) % config.grid_stride == 0 || k + 1 == n {
                let t1 = if k + 1 == n { config.horizon } else { (k + 1) as f64 * h };
                record(&mut path, t1, &x);
            }
        }
        Ok(path)
    }
}

/// Simulates one path of the MCSBP started at `x0`.
pub fn simulate_path<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    rng: &mut R,
) -> Result<PathResult> {
    config.validate()?;
    let (_, h) = config.steps();
    Stepper::new(mech, h, config.eps_jump)?.simulate(spectral, x0, config, rng)
}

/// `W_t = e^{-lambda1 t} <phi, X_t>` on the path's grid, and its last value.
pub fn track_martingale(path: &PathResult, spectral: &SpectralData) -> (Vec<f64>, f64) {
    let w: Vec<f64> = path
        .t_grid
        .iter()
        .zip(&path.x)
        .map(|(&t, x)| spectral.martingale(t, x))
        .collect();
    let last = *w.last().unwrap_or(&0.0);
    (w, last)
}

/// First grid time with `<1, X_t> < threshold`; the state (and `W`) is
/// zeroed from then on.
pub fn detect_extinction(path: &mut PathResult, threshold: f64) -> Option<f64> {
    let first = path.x.iter().position(|x| x.sum() < threshold)?;
    for k in first..path.x.len() {
        path.x[k].fill(0.0);
        path.w[k] = 0.0;
    }
    let t = path.t_grid[first];
    path.extinction_time = Some(path.extinction_time.map_or(t, |e| e.min(t)));
    Some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::LevyMeasure;
    use crate::rng::path_rng;
    use crate::spectral::{mean_matrix, perron};

    fn linear(b: &[f64]) -> BranchingMechanism {
        BranchingMechanism::from_b(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, b),
            vec![LevyMeasure::zero(), LevyMeasure::zero()],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_path_follows_matrix_exponential() {
        let mech = linear(&[0.05, 0.05, 0.02, -0.05]);
        let spectral = perron(mech.b()).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let config = SimConfig {
            horizon: 5.0,
            ..SimConfig::default()
        };
        let path = simulate_path(&mech, &spectral, &x0, &config, &mut path_rng(1, 0)).unwrap();
        for (t, x) in path.t_grid.iter().zip(&path.x) {
            let exact = mean_matrix(mech.b(), *t).m.transpose() * &x0;
            assert!((x - &exact).amax() < 1e-4, "t = {t}");
        }
        assert_eq!(path.extinction_time, None);
        assert_eq!(path.clamps, 0);
        let w0 = path.w[0];
        assert!(path.w.iter().all(|w| (w - w0).abs() < 1e-4 * w0));
    }

    #[test]
    fn deterministic_error_is_first_order() {
        let mech = linear(&[0.2, 0.5, 0.3, -0.1]);
        let spectral = perron(mech.b()).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let exact = mean_matrix(mech.b(), 5.0).m.transpose() * &x0;
        let err = |dt: f64| {
            let config = SimConfig {
                dt,
                horizon: 5.0,
                ..SimConfig::default()
            };
            let path = simulate_path(&mech, &spectral, &x0, &config, &mut path_rng(1, 0)).unwrap();
            (path.x.last().unwrap() - &exact).amax()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        let order = (e1 / e2).log2();
        assert!((order - 1.0).abs() < 0.05, "order {order}");
    }

    #[test]
    fn zero_start_is_absorbing() {
        let mech = linear(&[0.2, 0.5, 0.3, -0.1]);
        let spectral = perron(mech.b()).unwrap();
        let path = simulate_path(
            &mech,
            &spectral,
            &DVector::zeros(2),
            &SimConfig::default(),
            &mut path_rng(1, 0),
        )
        .unwrap();
        assert_eq!(path.extinction_time, Some(0.0));
        assert!(path.x.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn step_index_checks_grid() {
        let config = SimConfig {
            horizon: 2.0,
            ..SimConfig::default()
        };
        assert_eq!(config.step_index(0.5).unwrap(), 500);
        assert_eq!(config.step_index(2.0).unwrap(), 2000);
        assert!(config.step_index(0.0005).is_err());
        assert!(config.step_index(3.0).is_err());
    }

    #[test]
    fn too_large_step_is_rejected() {
        let mech = BranchingMechanism::from_b(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -3.0),
            vec![LevyMeasure::zero()],
        )
        .unwrap();
        assert!(Stepper::new(&mech, 0.5, 1e-3).is_err());
        assert!(Stepper::new(&mech, 0.25, 1e-3).is_ok());
    }
}
