//! Exact sampling of the retained (large) jumps of a Lévy measure.
//!
//! For a truncation radius `eps`, radial measures keep the jumps with
//! `r > eps` (a finite measure) and drop the rest. The dropped part's mean
//! `int_{r <= eps} z mu(dz)` is reported as the compensation vector.
//! Atomic measures are finite already and ignore `eps`.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::levy::{LevyMeasure, RadialTail};
use crate::error::{Error, Result};

/// Radial jump sizes are capped here so that extremely heavy size-biased
/// draws stay finite.
pub const MAX_JUMP_SIZE: f64 = 1e300;

/// Law with density proportional to `r^{-1-kappa} (ln r)^{-gamma}` on `(lo, hi]`.
#[derive(Clone, Copy, Debug)]
struct PowerLogLaw {
    lo: f64,
    hi: f64,
    kappa: f64,
    gamma: f64,
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // (0, 1]
    1.0 - rng.random::<f64>()
}

impl PowerLogLaw {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let r = if self.gamma == 0.0 {
            self.sample_power(rng)
        } else if self.kappa > 0.0 {
            // Pareto proposal, accept with (ln r / ln lo)^{-gamma} <= 1
            let ln_lo = self.lo.ln();
            loop {
                let r = self.lo * open_unit(rng).powf(-1.0 / self.kappa);
                let accept = (r.ln() / ln_lo).powf(-self.gamma);
                if rng.random::<f64>() < accept {
                    break r;
                }
            }
        } else {
            // kappa = 0: y = ln r has density y^{-gamma} on (ln lo, inf)
            let y = self.lo.ln() * open_unit(rng).powf(-1.0 / (self.gamma - 1.0));
            y.min(MAX_JUMP_SIZE.ln()).exp()
        };
        r.min(MAX_JUMP_SIZE)
    }

    fn sample_power<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open_unit(rng);
        let k = self.kappa;
        if self.hi.is_infinite() {
            return self.lo * u.powf(-1.0 / k);
        }
        if k == 0.0 {
            return self.lo * (self.hi / self.lo).powf(1.0 - u);
        }
        // inverse CDF of r^{-1-k} on (lo, hi]
        let a = self.lo.powf(-k);
        let b = self.hi.powf(-k);
        (b + u * (a - b)).powf(-1.0 / k)
    }
}

/// Mixture of power/log pieces for radial sizes.
#[derive(Clone, Debug)]
struct RadialSizes {
    pieces: Vec<PowerLogLaw>,
    choice: Option<WeightedIndex<f64>>,
}

impl RadialSizes {
    /// Sizes `r > eps` drawn from `r^m rho(r)`, normalized (`m` is 0 for the
    /// plain law and 1 for the size-biased law). Returns the law and its
    /// total mass.
    fn new(rt: &RadialTail, eps: f64, m: f64) -> Result<(Self, f64)> {
        let r0 = rt.r0();
        let mut pieces = Vec::new();
        let mut weights = Vec::new();
        if let Some(small) = rt.small {
            if eps < r0 {
                let w = rt.power_moment(m, eps, r0)?;
                if w > 0.0 {
                    pieces.push(PowerLogLaw {
                        lo: eps,
                        hi: r0,
                        kappa: small.beta - m,
                        gamma: 0.0,
                    });
                    weights.push(w);
                }
            }
        }
        let lo = eps.max(r0);
        let w = rt.power_moment(m, lo, f64::INFINITY)?;
        if !w.is_finite() {
            return Err(Error::InvalidMechanism(
                "retained jump law has infinite mass".into(),
            ));
        }
        if w > 0.0 {
            pieces.push(PowerLogLaw {
                lo,
                hi: f64::INFINITY,
                kappa: rt.tail.alpha - m,
                gamma: rt.tail.gamma,
            });
            weights.push(w);
        }
        let total: f64 = weights.iter().sum();
        let choice = if pieces.len() > 1 {
            Some(WeightedIndex::new(&weights).map_err(|e| Error::Numerical(e.to_string()))?)
        } else {
            None
        };
        Ok((Self { pieces, choice }, total))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = match &self.choice {
            Some(c) => c.sample(rng),
            None => 0,
        };
        self.pieces[k].sample(rng)
    }
}

#[derive(Clone, Debug)]
enum Sizes {
    Empty,
    Atomic {
        atoms: Vec<DVector<f64>>,
        choice: WeightedIndex<f64>,
    },
    Radial {
        direction: DVector<f64>,
        sizes: RadialSizes,
    },
}

impl Sizes {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Sizes::Empty => panic!("sampling from an empty jump law"),
            Sizes::Atomic { atoms, choice } => atoms[choice.sample(rng)].clone(),
            Sizes::Radial { direction, sizes } => direction * sizes.sample(rng),
        }
    }
}

/// The finite jump law retained after truncating at `eps`, with the
/// bookkeeping for the dropped small jumps.
#[derive(Clone, Debug)]
pub struct TruncatedJumps {
    /// Total rate of retained jumps per unit mass and time.
    pub intensity: f64,
    /// `int_{retained} z mu(dz)`.
    pub retained_mean: DVector<f64>,
    /// `int_{dropped} z mu(dz)`: drift compensation of the discarded small
    /// jumps (possibly `+inf` for infinite-variation small jumps).
    pub compensation: DVector<f64>,
    /// `int_{dropped} z∘z mu(dz)`: variance rate lost by truncation.
    pub dropped_variance: DVector<f64>,
    sizes: Sizes,
}

/// Summary returned alongside a single draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensation {
    pub intensity: f64,
    pub retained_mean: DVector<f64>,
    pub compensation: DVector<f64>,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "truncation radius must be positive and below the (infinite) support bound, got {eps}"
        )));
    }
    Ok(())
}

impl TruncatedJumps {
    pub fn new(measure: &LevyMeasure, d: usize, eps: f64) -> Result<Self> {
        match measure {
            LevyMeasure::Atomic { atoms } => {
                let mut mean = DVector::zeros(d);
                for a in atoms {
                    mean += &a.z * a.rate;
                }
                let intensity: f64 = atoms.iter().map(|a| a.rate).sum();
                let sizes = if atoms.is_empty() {
                    Sizes::Empty
                } else {
                    Sizes::Atomic {
                        atoms: atoms.iter().map(|a| a.z.clone()).collect(),
                        choice: WeightedIndex::new(atoms.iter().map(|a| a.rate))
                            .map_err(|e| Error::InvalidMechanism(e.to_string()))?,
                    }
                };
                Ok(Self {
                    intensity,
                    retained_mean: mean,
                    compensation: DVector::zeros(d),
                    dropped_variance: DVector::zeros(d),
                    sizes,
                })
            }
            LevyMeasure::Radial(rt) => {
                check_eps(eps)?;
                let (sizes, intensity) = RadialSizes::new(rt, eps, 0.0)?;
                let pi = &rt.direction;
                let kept_first = rt.power_moment(1.0, eps, f64::INFINITY)?;
                let dropped_first = rt.power_moment(1.0, 0.0, eps)?;
                let dropped_second = rt.power_moment(2.0, 0.0, eps)?;
                let comp = pi.map(|p| if p == 0.0 { 0.0 } else { p * dropped_first });
                Ok(Self {
                    intensity,
                    retained_mean: pi * kept_first,
                    compensation: comp,
                    dropped_variance: pi.component_mul(pi) * dropped_second,
                    sizes: Sizes::Radial {
                        direction: pi.clone(),
                        sizes,
                    },
                })
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.intensity == 0.0
    }

    /// One retained jump vector. Must not be called on an empty law.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sizes.sample(rng)
    }

    pub fn summary(&self) -> Compensation {
        Compensation {
            intensity: self.intensity,
            retained_mean: self.retained_mean.clone(),
            compensation: self.compensation.clone(),
        }
    }
}

/// Draws one retained jump of `measure` (truncated at `eps` when radial)
/// together with the compensation summary of the truncation.
pub fn sample_jump<R: Rng + ?Sized>(
    measure: &LevyMeasure,
    rng: &mut R,
    eps: f64,
) -> Result<(DVector<f64>, Compensation)> {
    let d = measure
        .dim()
        .ok_or_else(|| Error::InvalidArgument("cannot sample from the zero measure".into()))?;
    let law = TruncatedJumps::new(measure, d, eps)?;
    Ok((law.sample(rng), law.summary()))
}

/// The finite measure `z(j) mu(dz)` restricted to retained jumps,
/// normalized for sampling. Used for the size-biased immigration along the
/// spine.
#[derive(Clone, Debug)]
pub struct SizeBiasedJumps {
    /// `int_{retained} z(j) mu(dz)`.
    pub rate: f64,
    sizes: Sizes,
}

impl SizeBiasedJumps {
    pub fn new(measure: &LevyMeasure, j: usize, eps: f64) -> Result<Self> {
        match measure {
            LevyMeasure::Atomic { atoms } => {
                let weights: Vec<f64> = atoms.iter().map(|a| a.rate * a.z[j]).collect();
                let rate: f64 = weights.iter().sum();
                let sizes = if rate > 0.0 {
                    Sizes::Atomic {
                        atoms: atoms.iter().map(|a| a.z.clone()).collect(),
                        choice: WeightedIndex::new(&weights)
                            .map_err(|e| Error::Numerical(e.to_string()))?,
                    }
                } else {
                    Sizes::Empty
                };
                Ok(Self { rate, sizes })
            }
            LevyMeasure::Radial(rt) => {
                let p = rt.direction[j];
                if p == 0.0 {
                    return Ok(Self {
                        rate: 0.0,
                        sizes: Sizes::Empty,
                    });
                }
                check_eps(eps)?;
                let (sizes, mass) = RadialSizes::new(rt, eps, 1.0)?;
                Ok(Self {
                    rate: p * mass,
                    sizes: Sizes::Radial {
                        direction: rt.direction.clone(),
                        sizes,
                    },
                })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sizes.sample(rng)
    }
}
