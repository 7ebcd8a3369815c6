//! Spine decomposition under the martingale change of measure
//! `dP~/dP |_{F_t} = W_t / <phi, x>`.
//!
//! Under `P~` the process is a copy of the original process plus mass
//! immigrating along a Markov chain `eta` (the spine) with generator
//! `L_ij = phi_i^{-1} (B^T_ij - 1_{i=j} lambda1) phi_j`:
//!
//! - continuously, at rate `2 c(eta_s)` times the excursion measure;
//! - by size-biased jumps, at rate `z(eta_s) mu_{eta_s}(dz)`;
//! - at each spine transition `i -> j`, with law `nu_{i,j}`.
//!
//! Every immigrant evolves as an independent copy of the process. By the
//! branching property the sum of independent copies started from masses
//! `x` and `y` is a copy started from `x + y`, so all immigrants are carried
//! by a single simulated path into which their initial masses are injected
//! at the next grid time.
//!
//! The excursion measure `N_i` is replaced by `delta^{-1} P_{delta e_i}`:
//! continuous immigration becomes a Poisson stream at rate `2 c_i / delta`
//! of copies started from `delta e_i`. This is exact in the first moment and
//! converges as `delta -> 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{map_paths, Estimate};
use crate::mechanism::{BranchingMechanism, SizeBiasedJumps};
use crate::simulator::{SimConfig, Stepper};
use crate::spectral::SpectralData;

/// Tolerance on the atom-at-zero weight of `nu_{i,j}`.
const NU_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpineChain {
    pub l: DMatrix<f64>,
    pub initial_law: DVector<f64>,
}

impl SpineChain {
    /// The chain started from `(phi∘x) / <phi, x>`.
    pub fn with_initial(mut self, spectral: &SpectralData, x: &DVector<f64>) -> Result<Self> {
        let w = spectral.phi.component_mul(x);
        let s = w.sum();
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(
                "the spine needs a nonzero initial state".into(),
            ));
        }
        self.initial_law = w / s;
        Ok(self)
    }

    /// Invariant law, solving `pi L = 0`, `<pi, 1> = 1`.
    pub fn stationary_law(&self) -> Result<DVector<f64>> {
        let d = self.l.nrows();
        let mut a = self.l.transpose();
        let mut rhs = DVector::zeros(d);
        // replace the last balance equation by the normalization
        for j in 0..d {
            a[(d - 1, j)] = 1.0;
        }
        rhs[d - 1] = 1.0;
        a.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular spine generator".into()))
    }
}

/// Generator of the spine with initial law `phi` (the law for `x = 1`).
pub fn spine_generator(b: &DMatrix<f64>, spectral: &SpectralData) -> SpineChain {
    let d = b.nrows();
    let phi = &spectral.phi;
    let l = DMatrix::from_fn(d, d, |i, j| {
        let diag = if i == j { spectral.lambda1 } else { 0.0 };
        (b[(j, i)] - diag) * phi[j] / phi[i]
    });
    SpineChain {
        l,
        initial_law: phi.clone(),
    }
}

/// `nu_{i,j}(dz) = (1 / B^T_ij) z(j) mu_i(dz) + (1 - weight) delta_0(dz)`.
#[derive(Clone, Debug)]
pub struct NuLaw {
    /// `(1 / B^T_ij) int z(j) mu_i(dz)`.
    pub weight: f64,
    /// Probability that a draw is nonzero; below `weight` when small jumps
    /// are truncated.
    retained: f64,
    sizes: Option<SizeBiasedJumps>,
}

impl NuLaw {
    pub fn zero_weight(&self) -> f64 {
        1.0 - self.weight
    }

    /// The law `delta_0`.
    pub fn dirac_zero() -> Self {
        Self {
            weight: 0.0,
            retained: 0.0,
            sizes: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<DVector<f64>> {
        let sizes = self.sizes.as_ref()?;
        if rng.random::<f64>() < self.retained {
            Some(sizes.sample(rng))
        } else {
            None
        }
    }
}

/// `nu_{i,j}` with jumps below `eps` (radial measures only) sent to zero.
pub fn nu_measure_truncated(mech: &BranchingMechanism, i: usize, j: usize, eps: f64) -> Result<NuLaw> {
    let d = mech.dim();
    if i >= d || j >= d {
        return Err(Error::InvalidArgument(format!("type index out of range for d = {d}")));
    }
    let moment = mech.measure(i).first_moment(j)?;
    if i == j || moment == 0.0 {
        return Ok(NuLaw::dirac_zero());
    }
    let bt = mech.b()[(j, i)];
    if !(bt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "the spine never jumps from {i} to {j} (B^T_ij = {bt})"
        )));
    }
    let weight = moment / bt;
    if !(weight <= 1.0 + NU_TOL) {
        return Err(Error::InvalidMechanism(format!(
            "nu_({i},{j}) has atom weight {} at zero",
            1.0 - weight
        )));
    }
    let weight = weight.min(1.0);
    let sizes = SizeBiasedJumps::new(mech.measure(i), j, eps)?;
    Ok(NuLaw {
        weight,
        retained: (sizes.rate / bt).min(1.0),
        sizes: Some(sizes),
    })
}

/// `nu_{i,j}` for an atomic (or zero) `mu_i`.
pub fn nu_measure(mech: &BranchingMechanism, i: usize, j: usize) -> Result<NuLaw> {
    nu_measure_truncated(mech, i, j, f64::MIN_POSITIVE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImmigrationKind {
    Continuous,
    Discontinuous,
    Jump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Immigration {
    pub t: f64,
    pub kind: ImmigrationKind,
    /// Spine position at the immigration time.
    pub type_index: usize,
    pub mass: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpineJump {
    pub t: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaResult {
    pub spine_start: usize,
    pub spine_jumps: Vec<SpineJump>,
    pub immigration: Vec<Immigration>,
    pub t_grid: Vec<f64>,
    pub gamma: Vec<DVector<f64>>,
    pub z: Vec<f64>,
    pub clamps: usize,
}

impl GammaResult {
    /// Spine position at time `t`.
    pub fn spine_at(&self, t: f64) -> usize {
        self.spine_jumps
            .iter()
            .take_while(|j| j.t <= t)
            .last()
            .map_or(self.spine_start, |j| j.to)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpineConfig {
    /// Mass of one continuous immigrant.
    pub delta: f64,
    /// Maximal number of immigration events per path.
    pub max_immigrants: usize,
}

impl Default for SpineConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            max_immigrants: 100_000,
        }
    }
}

/// Precomputed spine and immigration laws for one mechanism.
#[derive(Clone, Debug)]
pub struct GammaSampler {
    d: usize,
    lambda1: f64,
    phi: DVector<f64>,
    l: DMatrix<f64>,
    c: DVector<f64>,
    size_biased: Vec<SizeBiasedJumps>,
    nu: Vec<Vec<NuLaw>>,
    stepper: Stepper,
    spine: SpineConfig,
}

impl GammaSampler {
    pub fn new(
        mech: &BranchingMechanism,
        spectral: &SpectralData,
        config: &SimConfig,
        spine: &SpineConfig,
    ) -> Result<Self> {
        spectral.require_supercritical()?;
        config.validate()?;
        if !(spine.delta > 0.0) || !spine.delta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "excursion mass must be positive, got {}",
                spine.delta
            )));
        }
        let d = mech.dim();
        let (_, h) = config.steps();
        let chain = spine_generator(mech.b(), spectral);
        let eps = config.eps_jump;
        let size_biased = (0..d)
            .map(|i| SizeBiasedJumps::new(mech.measure(i), i, eps))
            .collect::<Result<Vec<_>>>()?;
        let mut nu = Vec::with_capacity(d);
        for i in 0..d {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                row.push(if i != j && chain.l[(i, j)] > 0.0 {
                    nu_measure_truncated(mech, i, j, eps)?
                } else {
                    NuLaw::dirac_zero()
                });
            }
            nu.push(row);
        }
        Ok(Self {
            d,
            lambda1: spectral.lambda1,
            phi: spectral.phi.clone(),
            l: chain.l,
            c: mech.c().clone(),
            size_biased,
            nu,
            stepper: Stepper::new(mech, h, eps)?,
            spine: spine.clone(),
        })
    }

    fn pick<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
        let total: f64 = weights.clone().sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = 0;
        for (k, w) in weights.enumerate() {
            if w > 0.0 {
                last = k;
                if u < w {
                    return k;
                }
                u -= w;
            }
        }
        last
    }

    /// Spine path and immigration events on `[0, horizon]`.
    fn immigration<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        horizon: f64,
        rng: &mut R,
    ) -> Result<(usize, Vec<SpineJump>, Vec<Immigration>)> {
        let d = self.d;
        let start_w = self.phi.component_mul(x0);
        let start = Self::pick(start_w.iter().copied(), rng);
        let mut jumps = Vec::new();
        let mut events = Vec::new();
        let cap = self.spine.max_immigrants;
        let push = |events: &mut Vec<Immigration>, ev: Immigration| -> Result<()> {
            if events.len() >= cap {
                return Err(Error::ImmigrationCap { cap });
            }
            events.push(ev);
            Ok(())
        };
        let mut state = start;
        let mut t = 0.0;
        while t < horizon {
            let out_rate = -self.l[(state, state)];
            let hold = if out_rate > 0.0 {
                Exp::new(out_rate)
                    .map_err(|e| Error::Numerical(e.to_string()))?
                    .sample(rng)
            } else {
                f64::INFINITY
            };
            let end = (t + hold).min(horizon);
            let len = end - t;
            // continuous immigration: copies from delta e_i at rate 2 c_i / delta
            let rate_c = 2.0 * self.c[state] / self.spine.delta;
            // discontinuous immigration: size-biased jumps
            let rate_d = self.size_biased[state].rate;
            for (kind, rate) in [
                (ImmigrationKind::Continuous, rate_c),
                (ImmigrationKind::Discontinuous, rate_d),
            ] {
                if !(rate * len > 0.0) {
                    continue;
                }
                let n = Poisson::new(rate * len)
                    .map_err(|e| Error::Numerical(e.to_string()))?
                    .sample(rng) as usize;
                if events.len() + n > cap {
                    return Err(Error::ImmigrationCap { cap });
                }
                for _ in 0..n {
                    let s = t + len * rng.random::<f64>();
                    let mass = match kind {
                        ImmigrationKind::Continuous => {
                            let mut m = DVector::zeros(d);
                            m[state] = self.spine.delta;
                            m
                        }
                        _ => self.size_biased[state].sample(rng),
                    };
                    push(&mut events, Immigration {
                        t: s,
                        kind,
                        type_index: state,
                        mass,
                    })?;
                }
            }
            if end >= horizon {
                break;
            }
            t = end;
            let next = Self::pick(
                (0..d).map(|j| if j == state { 0.0 } else { self.l[(state, j)].max(0.0) }),
                rng,
            );
            jumps.push(SpineJump {
                t,
                from: state,
                to: next,
            });
            if let Some(mass) = self.nu[state][next].sample(rng) {
                push(&mut events, Immigration {
                    t,
                    kind: ImmigrationKind::Jump,
                    type_index: next,
                    mass,
                })?;
            }
            state = next;
        }
        Ok((start, jumps, events))
    }

    /// Simulates `Gamma` on `[0, config.horizon]`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        config: &SimConfig,
        rng: &mut R,
    ) -> Result<GammaResult> {
        config.validate()?;
        if x0.len() != self.d || x0.iter().any(|&v| !(v >= 0.0)) || !(self.phi.dot(x0) > 0.0) {
            return Err(Error::InvalidArgument(
                "initial state must be nonnegative and nonzero".into(),
            ));
        }
        let (n, h) = config.steps();
        if (h - self.stepper.step_size()).abs() > 1e-15 * h {
            return Err(Error::InvalidArgument("sampler built for a different step".into()));
        }
        let (spine_start, spine_jumps, mut immigration) =
            self.immigration(x0, config.horizon, rng)?;
        immigration.sort_by(|a, b| a.t.total_cmp(&b.t));

        let mut x = x0.clone();
        let mut scratch = DVector::zeros(self.d);
        let mut next_event = 0;
        let mut res = GammaResult {
            spine_start,
            spine_jumps,
            immigration: Vec::new(),
            t_grid: Vec::new(),
            gamma: Vec::new(),
            z: Vec::new(),
            clamps: 0,
        };
        let record = |res: &mut GammaResult, t: f64, x: &DVector<f64>| {
            res.t_grid.push(t);
            res.z.push((-self.lambda1 * t).exp() * self.phi.dot(x));
            res.gamma.push(x.clone());
        };
        let inject = |x: &mut DVector<f64>, next: &mut usize, upto: f64| {
            while *next < immigration.len() && immigration[*next].t <= upto {
                *x += &immigration[*next].mass;
                *next += 1;
            }
        };
        inject(&mut x, &mut next_event, 0.0);
        record(&mut res, 0.0, &x);
        for k in 0..n {
            let t = k as f64 * h;
            res.clamps += self.stepper.step(&mut x, &mut scratch, rng, t, None)?;
            let t1 = if k + 1 == n { config.horizon } else { (k + 1) as f64 * h };
            inject(&mut x, &mut next_event, t1);
            if (k + 1) % config.grid_stride == 0 || k + 1 == n {
                record(&mut res, t1, &x);
            }
        }
        res.immigration = immigration;
        Ok(res)
    }
}

/// Simulates the spine decomposition `Gamma` started from `x0`.
pub fn simulate_gamma<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    spine: &SpineConfig,
    rng: &mut R,
) -> Result<GammaResult> {
    GammaSampler::new(mech, spectral, config, spine)?.simulate(x0, config, rng)
}

/// Monte Carlo estimate of `E~_x e^{-<f, X_t>}` as the mean over
/// original-measure paths of `(W_t / <phi, x0>) e^{-<f, X_t>}`, with
/// `horizon = t`. Path `k` uses stream `k` of `config.seed`.
pub fn weighted_tilt_estimate(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    f: &DVector<f64>,
    t: f64,
    n_paths: usize,
    config: &SimConfig,
) -> Result<Estimate> {
    let w0 = spectral.phi.dot(x0);
    if !(w0 > 0.0) {
        return Err(Error::InvalidArgument(
            "the change of measure needs a nonzero initial state".into(),
        ));
    }
    let config = SimConfig {
        horizon: t,
        ..config.clone()
    };
    config.validate()?;
    let (n, h) = config.steps();
    let stepper = Stepper::new(mech, h, config.eps_jump)?;
    let values = map_paths(n_paths, config.seed, |_, rng| {
        let mut x = x0.clone();
        let mut scratch = DVector::zeros(x.len());
        for k in 0..n {
            stepper.step(&mut x, &mut scratch, rng, k as f64 * h, None)?;
            if x.sum() < config.extinction_threshold {
                return Ok(0.0);
            }
        }
        Ok(spectral.martingale(t, &x) / w0 * (-f.dot(&x)).exp())
    })?;
    Ok(Estimate::from_samples(&values))
}
