//! Jump laws on the nonnegative orthant.
//!
//! Two families are supported:
//!
//! - `Atomic`: finitely many jump vectors `z_k` with rates `w_k`,
//!   `mu(dz) = sum_k w_k delta_{z_k}(dz)`.
//! - `Radial`: `mu(dz) = pi(dz/r) rho(r) dr` with a fixed probability vector
//!   `pi` over the types and a radial density
//!
//!   ```text
//!   rho(r) = k_s r^{-1-beta}                    for 0 < r <= r0   (optional)
//!   rho(r) = k   r^{-1-alpha} (ln r)^{-gamma}   for r > r0
//!   ```
//!
//! Radial integrals are done in closed form where the integrand is a pure
//! power/log term, and otherwise by double-exponential quadrature. The tail
//! is integrated in the variable `y = ln r`, which keeps the algebraically
//! decaying borderline case `alpha = 1` analytic. Divergence is always
//! decided from the exponents, never by quadrature.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::quad::{self, Tolerance};

/// One atom of an atomic Lévy measure.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub z: DVector<f64>,
    pub rate: f64,
}

/// Power law (with optional log factor) density on `(r0, inf)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawTail {
    pub r0: f64,
    pub scale: f64,
    pub alpha: f64,
    pub gamma: f64,
}

/// Small-jump density `scale * r^{-1-beta}` on `(0, r0]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallJumps {
    pub scale: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadialTail {
    pub direction: DVector<f64>,
    pub tail: PowerLawTail,
    pub small: Option<SmallJumps>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LevyMeasure {
    Atomic { atoms: Vec<Atom> },
    Radial(RadialTail),
}

/// Which moment `measure_moment` computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentKind {
    /// `int z(i) mu(dz)`
    First(usize),
    /// `int ||z|| ^ ||z||^2 mu(dz)` with the Euclidean norm.
    TruncatedSecond,
    /// `int_{<1,z> >= 1} <1,z> ln <1,z> mu(dz)`
    Xlogx,
}

/// `e^{-x} - 1 + x`, accurate for small `x`.
pub(crate) fn phi2(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        x * x * phi2_over_sq(x)
    } else {
        (-x).exp_m1() + x
    }
}

/// `(e^{-x} - 1 + x) / x^2`.
pub(crate) fn phi2_over_sq(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // Taylor series; truncation error below 1e-17 on this range
        let x2 = x * x;
        0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0 + x2 * x2 / 720.0
    } else {
        ((-x).exp_m1() + x) / (x * x)
    }
}

/// `(1 - e^{-x}) / x`.
pub(crate) fn phi1_over_x(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - 0.5 * x
    } else {
        -(-x).exp_m1() / x
    }
}

impl PowerLawTail {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(format!("tail threshold r0 must be positive, got {}", self.r0));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(format!("tail scale must be positive, got {}", self.scale));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("log exponent gamma must be >= 0, got {}", self.gamma));
        }
        if self.gamma > 0.0 && self.r0 <= 1.0 {
            return Err("a logarithmic tail factor needs r0 > 1".into());
        }
        let first_moment_finite =
            self.alpha > 1.0 || (self.alpha == 1.0 && self.gamma > 1.0);
        if !first_moment_finite || !self.alpha.is_finite() {
            return Err(format!(
                "tail r^-(1+{}) (ln r)^-{} has an infinite first moment",
                self.alpha, self.gamma
            ));
        }
        Ok(())
    }

    /// `int_lo^hi r^p (ln r)^q rho(r) dr` for `r0 <= lo < hi <= inf`.
    fn power_log(&self, p: f64, q: f64, lo: f64, hi: f64) -> Result<f64> {
        if hi <= lo {
            return Ok(0.0);
        }
        // y = ln r: integrand k e^{c y} y^{-g}
        let c = p - self.alpha;
        let g = self.gamma - q;
        let k = self.scale;
        let y_lo = lo.ln();
        if hi.is_infinite() {
            if c > 0.0 || (c == 0.0 && g <= 1.0) {
                return Ok(f64::INFINITY);
            }
            if c == 0.0 {
                return Ok(k * y_lo.powf(1.0 - g) / (g - 1.0));
            }
            if g == 0.0 {
                return Ok(k * (c * y_lo).exp() / -c);
            }
            // factor out e^{c y_lo} so the quadrature works on an O(1) scale
            let v = quad::exp_sinh(
                |s| (c * s).exp() * (y_lo + s).powf(-g),
                0.0,
                Tolerance::default(),
            )?;
            return Ok(k * (c * y_lo).exp() * v);
        }
        let y_hi = hi.ln();
        if g == 0.0 {
            return Ok(if c == 0.0 {
                k * (y_hi - y_lo)
            } else {
                k * ((c * y_hi).exp() - (c * y_lo).exp()) / c
            });
        }
        if c == 0.0 {
            return Ok(if g == 1.0 {
                k * (y_hi / y_lo).ln()
            } else {
                k * (y_hi.powf(1.0 - g) - y_lo.powf(1.0 - g)) / (1.0 - g)
            });
        }
        let v = quad::tanh_sinh(
            |y| (c * y).exp() * y.powf(-g),
            y_lo,
            y_hi,
            Tolerance::default(),
        )?;
        Ok(k * v)
    }

    /// `int_lo^inf h(r) rho(r) dr` computed in `y = ln r`. The closure gets
    /// `y` and returns `h(e^y) e^{-alpha y}`, i.e. everything except the
    /// scale and the log factor, combined so it cannot overflow.
    fn log_quad<F: Fn(f64) -> f64>(&self, lo: f64, hy: F) -> Result<f64> {
        let y_lo = lo.ln();
        let g = self.gamma;
        let v = quad::exp_sinh(
            |s| {
                let y = y_lo + s;
                let w = if g == 0.0 { 1.0 } else { y.powf(-g) };
                hy(y) * w
            },
            0.0,
            Tolerance::default(),
        )?;
        Ok(self.scale * v)
    }
}

impl SmallJumps {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(format!("small-jump scale must be positive, got {}", self.scale));
        }
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return Err(format!("small-jump index beta must lie in (0,2), got {}", self.beta));
        }
        Ok(())
    }

    /// `int_lo^hi r^p rho(r) dr` for `0 <= lo < hi <= r0`.
    fn power(&self, p: f64, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let e = p - self.beta;
        if lo == 0.0 && e <= 0.0 {
            return f64::INFINITY;
        }
        if e == 0.0 {
            self.scale * (hi / lo).ln()
        } else {
            self.scale * (hi.powf(e) - lo.powf(e)) / e
        }
    }
}

impl RadialTail {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let d = &self.direction;
        if d.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err("direction must have nonnegative entries".into());
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(format!("direction must sum to 1, sums to {s}"));
        }
        self.tail.validate()?;
        if let Some(small) = &self.small {
            small.validate()?;
        }
        Ok(())
    }

    pub fn r0(&self) -> f64 {
        self.tail.r0
    }

    /// Radial density `rho(r)`.
    pub fn density(&self, r: f64) -> f64 {
        if r <= 0.0 {
            0.0
        } else if r <= self.tail.r0 {
            self.small
                .map_or(0.0, |s| s.scale * r.powf(-1.0 - s.beta))
        } else {
            let t = &self.tail;
            let base = t.scale * r.powf(-1.0 - t.alpha);
            if t.gamma == 0.0 {
                base
            } else {
                base * r.ln().powf(-t.gamma)
            }
        }
    }

    /// `int_lo^hi r^p rho(r) dr`, possibly `+inf`.
    pub fn power_moment(&self, p: f64, lo: f64, hi: f64) -> Result<f64> {
        let r0 = self.tail.r0;
        let mut total = 0.0;
        if lo < r0 {
            if let Some(small) = &self.small {
                total += small.power(p, lo.max(0.0), hi.min(r0));
            }
        }
        if hi > r0 {
            total += self.tail.power_log(p, 0.0, lo.max(r0), hi)?;
        }
        Ok(total)
    }

    /// `int_{r >= 1} r ln r rho(r) dr`.
    pub fn xlogx_moment(&self) -> Result<f64> {
        let r0 = self.tail.r0;
        let mut total = 0.0;
        if r0 > 1.0 {
            if let Some(small) = &self.small {
                let (k, b) = (small.scale, small.beta);
                total += k * quad::tanh_sinh(
                    |r| r.ln() * r.powf(-b),
                    1.0,
                    r0,
                    Tolerance::default(),
                )?;
            }
        }
        total += self.tail.power_log(1.0, 1.0, r0.max(1.0), f64::INFINITY)?;
        Ok(total)
    }

    /// Radial part of the mechanism integral:
    /// `int (e^{-s r} - 1 + s r) rho(r) dr` for `s >= 0`.
    pub fn laplace_exponent(&self, s: f64) -> Result<f64> {
        if s == 0.0 {
            return Ok(0.0);
        }
        let r0 = self.tail.r0;
        let mut total = 0.0;
        if let Some(small) = &self.small {
            let (k, b) = (small.scale, small.beta);
            total += k * s * s * quad::tanh_sinh(
                |r| phi2_over_sq(s * r) * r.powf(1.0 - b),
                0.0,
                r0,
                Tolerance::default(),
            )?;
        }
        // tail: s * int r rho  +  int (e^{-s r} - 1) rho
        let alpha = self.tail.alpha;
        total += s * self.tail.power_log(1.0, 0.0, r0, f64::INFINITY)?;
        total += self.tail.log_quad(r0, |y| {
            let r = y.exp();
            (-s * r).exp_m1() * (-alpha * y).exp()
        })?;
        Ok(total)
    }

    /// `int r (1 - e^{-s r}) rho(r) dr` for `s >= 0`.
    pub fn tilted_exponent(&self, s: f64) -> Result<f64> {
        if s == 0.0 {
            return Ok(0.0);
        }
        let r0 = self.tail.r0;
        let mut total = 0.0;
        if let Some(small) = &self.small {
            let (k, b) = (small.scale, small.beta);
            total += k * s * quad::tanh_sinh(
                |r| phi1_over_x(s * r) * r.powf(1.0 - b),
                0.0,
                r0,
                Tolerance::default(),
            )?;
        }
        // tail: int r rho - int r e^{-s r} rho
        let alpha = self.tail.alpha;
        total += self.tail.power_log(1.0, 0.0, r0, f64::INFINITY)?;
        total -= self
            .tail
            .log_quad(r0, |y| ((1.0 - alpha) * y - s * y.exp()).exp())?;
        Ok(total)
    }
}

impl LevyMeasure {
    pub fn zero() -> Self {
        LevyMeasure::Atomic { atoms: Vec::new() }
    }

    pub fn atomic(atoms: Vec<(Vec<f64>, f64)>) -> Self {
        LevyMeasure::Atomic {
            atoms: atoms
                .into_iter()
                .map(|(z, rate)| Atom {
                    z: DVector::from_vec(z),
                    rate,
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, LevyMeasure::Atomic { atoms } if atoms.is_empty())
    }

    /// Checks the parametric constraints of the measure for type `own` in a
    /// `d`-type mechanism.
    pub fn check(&self, d: usize, own: usize) -> std::result::Result<(), String> {
        match self {
            LevyMeasure::Atomic { atoms } => {
                for (k, a) in atoms.iter().enumerate() {
                    if a.z.len() != d {
                        return Err(format!("atom {k} has length {}, expected {d}", a.z.len()));
                    }
                    if a.z.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                        return Err(format!("atom {k} has a negative or non-finite entry"));
                    }
                    if a.z.iter().all(|&x| x == 0.0) {
                        return Err(format!("atom {k} is the zero vector"));
                    }
                    if !(a.rate > 0.0 && a.rate.is_finite()) {
                        return Err(format!("atom {k} has non-positive rate {}", a.rate));
                    }
                }
                Ok(())
            }
            LevyMeasure::Radial(rt) => {
                if rt.direction.len() != d {
                    return Err(format!(
                        "direction has length {}, expected {d}",
                        rt.direction.len()
                    ));
                }
                rt.validate()?;
                if let Some(small) = &rt.small {
                    let off: f64 = (0..d).filter(|&j| j != own).map(|j| rt.direction[j]).sum();
                    if small.beta >= 1.0 && off > 0.0 {
                        return Err(format!(
                            "small jumps with beta = {} >= 1 must point along the own type \
                             (off-diagonal first moment diverges)",
                            small.beta
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    /// `int z(j) mu(dz)`.
    pub fn first_moment(&self, j: usize) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms.iter().map(|a| a.rate * a.z[j]).sum()),
            LevyMeasure::Radial(rt) => {
                let p = rt.direction[j];
                if p == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(p * rt.power_moment(1.0, 0.0, f64::INFINITY)?)
                }
            }
        }
    }

    /// `int (z(j) - 1)^+ mu(dz)`.
    pub fn excess_moment(&self, j: usize) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms
                .iter()
                .map(|a| a.rate * (a.z[j] - 1.0).max(0.0))
                .sum()),
            LevyMeasure::Radial(rt) => {
                let p = rt.direction[j];
                if p == 0.0 {
                    return Ok(0.0);
                }
                let lo = 1.0 / p;
                let m1 = rt.power_moment(1.0, lo, f64::INFINITY)?;
                let m0 = rt.power_moment(0.0, lo, f64::INFINITY)?;
                Ok((p * m1 - m0).max(0.0))
            }
        }
    }

    /// `int ||z|| ^ ||z||^2 mu(dz)` with the Euclidean norm.
    pub fn truncated_second(&self) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms
                .iter()
                .map(|a| {
                    let n = a.z.norm();
                    a.rate * n.min(n * n)
                })
                .sum()),
            LevyMeasure::Radial(rt) => {
                let n = rt.direction.norm();
                let split = 1.0 / n;
                let inner = rt.power_moment(2.0, 0.0, split)?;
                let outer = rt.power_moment(1.0, split, f64::INFINITY)?;
                Ok(n * n * inner + n * outer)
            }
        }
    }

    /// `int_{<1,z> >= 1} <1,z> ln <1,z> mu(dz)`.
    pub fn xlogx(&self) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms
                .iter()
                .map(|a| {
                    let s = a.z.sum();
                    if s >= 1.0 {
                        a.rate * s * s.ln()
                    } else {
                        0.0
                    }
                })
                .sum()),
            // <1, r pi> = r since pi sums to one
            LevyMeasure::Radial(rt) => rt.xlogx_moment(),
        }
    }

    /// The quantity in the integrability condition for type `own`:
    /// `int [||z|| ^ ||z||^2 + sum_{j != own} z_j] mu(dz)`.
    pub fn integrability(&self, own: usize) -> Result<f64> {
        let mut total = self.truncated_second()?;
        let d = self.dim().unwrap_or(0);
        for j in (0..d).filter(|&j| j != own) {
            total += self.first_moment(j)?;
        }
        Ok(total)
    }

    /// Type count the measure is defined on, `None` for the zero measure.
    pub fn dim(&self) -> Option<usize> {
        match self {
            LevyMeasure::Atomic { atoms } => atoms.first().map(|a| a.z.len()),
            LevyMeasure::Radial(rt) => Some(rt.direction.len()),
        }
    }

    /// Jump part of the mechanism: `int (e^{-<u,z>} - 1 + <u,z>) mu(dz)`.
    pub fn laplace_exponent(&self, u: &DVector<f64>) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms
                .iter()
                .map(|a| a.rate * phi2(u.dot(&a.z)))
                .sum()),
            LevyMeasure::Radial(rt) => rt.laplace_exponent(u.dot(&rt.direction)),
        }
    }

    /// `int <w,z> (e^{-<v,z>} - 1) mu(dz)` (nonpositive for `v, w >= 0`).
    pub fn tilted_integral(&self, v: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms
                .iter()
                .map(|a| a.rate * w.dot(&a.z) * (-v.dot(&a.z)).exp_m1())
                .sum()),
            LevyMeasure::Radial(rt) => {
                let s = v.dot(&rt.direction);
                let wp = w.dot(&rt.direction);
                if wp == 0.0 {
                    return Ok(0.0);
                }
                Ok(-wp * rt.tilted_exponent(s)?)
            }
        }
    }

    /// `int z(j) (1 - e^{-<v,z>}) mu(dz)`.
    pub fn size_biased_exponent(&self, j: usize, v: &DVector<f64>) -> Result<f64> {
        match self {
            LevyMeasure::Atomic { atoms } => Ok(atoms
                .iter()
                .map(|a| -a.rate * a.z[j] * (-v.dot(&a.z)).exp_m1())
                .sum()),
            LevyMeasure::Radial(rt) => {
                let p = rt.direction[j];
                if p == 0.0 {
                    return Ok(0.0);
                }
                Ok(p * rt.tilted_exponent(v.dot(&rt.direction))?)
            }
        }
    }
}

/// Moment of a Lévy measure; `+inf` when analytically divergent.
pub fn measure_moment(measure: &LevyMeasure, kind: MomentKind) -> Result<f64> {
    match kind {
        MomentKind::First(i) => {
            if let Some(d) = measure.dim() {
                if i >= d {
                    return Err(Error::InvalidArgument(format!(
                        "coordinate {i} out of range for dimension {d}"
                    )));
                }
            } else {
                return Ok(0.0);
            }
            measure.first_moment(i)
        }
        MomentKind::TruncatedSecond => measure.truncated_second(),
        MomentKind::Xlogx => measure.xlogx(),
    }
}
