//! Log-Laplace flow `dv/dt = -psi(v)`, `v(0) = f`, and the spine functional
//! `theta`, integrated with classical RK4 on a uniform grid.
//!
//! `E_x e^{-<f, X_t>} = e^{-<x, v(t, f)>}`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::BranchingMechanism;
use crate::spectral::{mean_matrix, SpectralData};

pub const DEFAULT_DT: f64 = 1e-3;
/// Negative components above `-CLIP_TOL` are set to zero; below, the solve
/// aborts.
pub const CLIP_TOL: f64 = 1e-12;
const MAX_HALVINGS: u32 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    pub t_grid: Vec<f64>,
    pub v_values: Vec<DVector<f64>>,
    pub f: DVector<f64>,
    pub step_size: f64,
    /// Number of components clipped from tiny negatives to zero.
    pub clipped: usize,
}

impl FlowSolution {
    /// `v(t, f)` at the final grid time.
    pub fn terminal(&self) -> &DVector<f64> {
        self.v_values.last().expect("grid is never empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSolution {
    pub t_grid: Vec<f64>,
    pub theta_values: Vec<DVector<f64>>,
    pub flow: FlowSolution,
}

impl ThetaSolution {
    pub fn terminal(&self) -> &DVector<f64> {
        self.theta_values.last().expect("grid is never empty")
    }
}

fn check_nonneg(name: &str, x: &DVector<f64>, d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::InvalidArgument(format!(
            "{name} has length {}, expected {d}",
            x.len()
        )));
    }
    if x.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Uniform grid with `ceil(t / dt)` steps ending exactly at `t`.
fn grid(t: f64, dt: f64) -> Result<(usize, f64)> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("time must be finite and >= 0, got {t}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    if t == 0.0 {
        return Ok((0, dt));
    }
    let n = (t / dt - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t / n as f64))
}

fn rk4<F>(y: &DVector<f64>, h: f64, rhs: &F) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = rhs(y)?;
    let k2 = rhs(&(y + &k1 * (0.5 * h)))?;
    let k3 = rhs(&(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(&(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// One step of size `h`, retried with halved substeps while the result is
/// not finite.
fn advance<F>(y: &DVector<f64>, h: f64, rhs: &F) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    for level in 0..=MAX_HALVINGS {
        let sub = 1usize << level;
        let hs = h / sub as f64;
        let mut cur = y.clone();
        let mut ok = true;
        for _ in 0..sub {
            cur = rk4(&cur, hs, rhs)?;
            if cur.iter().any(|v| !v.is_finite()) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(cur);
        }
    }
    Err(Error::Numerical(format!(
        "flow not finite after {MAX_HALVINGS} step halvings"
    )))
}

/// Clips `x[range]` from tiny negatives to zero; larger negatives abort.
fn clip(x: &mut DVector<f64>, range: std::ops::Range<usize>, t: f64, clipped: &mut usize) -> Result<()> {
    for k in range {
        if x[k] < 0.0 {
            if x[k] > -CLIP_TOL {
                x[k] = 0.0;
                *clipped += 1;
            } else {
                return Err(Error::Numerical(format!(
                    "flow component {k} became {} at t = {t}",
                    x[k]
                )));
            }
        }
    }
    Ok(())
}

fn positive_part(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// Solves `dv/dt = -psi(v)`, `v(0) = f` on `[0, t]`.
pub fn solve_v(mech: &BranchingMechanism, f: &DVector<f64>, t: f64, dt: f64) -> Result<FlowSolution> {
    let d = mech.dim();
    check_nonneg("f", f, d)?;
    let (n, h) = grid(t, dt)?;
    // stage arguments are projected onto the orthant, where psi is defined
    let rhs = |v: &DVector<f64>| mech.psi(&positive_part(v.clone())).map(|p| -p);
    let mut t_grid = Vec::with_capacity(n + 1);
    let mut v_values = Vec::with_capacity(n + 1);
    t_grid.push(0.0);
    v_values.push(f.clone());
    let mut clipped = 0;
    let mut v = f.clone();
    for k in 1..=n {
        let tk = if k == n { t } else { k as f64 * h };
        v = advance(&v, h, &rhs)?;
        clip(&mut v, 0..d, tk, &mut clipped)?;
        t_grid.push(tk);
        v_values.push(v.clone());
    }
    Ok(FlowSolution {
        t_grid,
        v_values,
        f: f.clone(),
        step_size: h,
        clipped,
    })
}

/// `E_x e^{-<f, X_t>} = e^{-<x, v(t, f)>}`.
pub fn laplace_functional(
    mech: &BranchingMechanism,
    x: &DVector<f64>,
    f: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<f64> {
    check_nonneg("x", x, mech.dim())?;
    let sol = solve_v(mech, f, t, dt)?;
    Ok((-x.dot(sol.terminal())).exp())
}

/// `max_k |v(s + t, f) - v(t, v(s, f))|_k`.
///
/// The one-shot flow is integrated with step `dt` and the composition with
/// step `dt / 2`, so the grids never coincide and the defect measures the
/// discretization error (order 4 in `dt`) rather than vanishing trivially.
pub fn semigroup_check(
    mech: &BranchingMechanism,
    f: &DVector<f64>,
    s: f64,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let direct = solve_v(mech, f, s + t, dt)?;
    let first = solve_v(mech, f, s, 0.5 * dt)?;
    let second = solve_v(mech, first.terminal(), t, 0.5 * dt)?;
    Ok((direct.terminal() - second.terminal()).amax())
}

/// Default finite-difference increment of [`mean_consistency`].
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Jacobian of `f -> v(t, f)` at `f = 0` by finite differences, compared
/// against `M(t)`; returns `max_{k,j} |dv_k/df_j - M(t)_{kj}|`.
///
/// The difference quotient `(4 v(eps e_j) - v(2 eps e_j)) / (2 eps)` is
/// second-order accurate and stays inside the orthant.
pub fn mean_consistency(mech: &BranchingMechanism, t: f64, dt: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let d = mech.dim();
    let m = mean_matrix(mech.b(), t).m;
    let mut defect: f64 = 0.0;
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = eps;
        let v1 = solve_v(mech, &e, t, dt)?;
        let v2 = solve_v(mech, &(&e * 2.0), t, dt)?;
        let jac = (v1.terminal() * 4.0 - v2.terminal()) / (2.0 * eps);
        for k in 0..d {
            defect = defect.max((jac[k] - m[(k, j)]).abs());
        }
    }
    Ok(defect)
}

/// Right-hand side of the `theta` equation:
/// `(1/phi_i) [(B^T - lambda1 I)(phi∘theta)]_i - 2 c_i v_i theta_i
///  + (1/phi_i) int <theta, phi∘z> (e^{-<v,z>} - 1) mu_i(dz)`.
fn theta_rhs(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    v: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = mech.dim();
    let phi = &spectral.phi;
    let w = phi.component_mul(theta);
    let mut lin = mech.b().tr_mul(&w);
    lin -= &w * spectral.lambda1;
    let mut out = DVector::zeros(d);
    for i in 0..d {
        let jump = mech.measure(i).tilted_integral(v, &w)?;
        out[i] = (lin[i] + jump) / phi[i] - 2.0 * mech.c()[i] * v[i] * theta[i];
    }
    Ok(out)
}

/// Solves the coupled system for `(v, theta)` on a shared grid, `theta(0) = 1`.
pub fn solve_theta(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    f: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<ThetaSolution> {
    let d = mech.dim();
    check_nonneg("f", f, d)?;
    if spectral.dim() != d {
        return Err(Error::InvalidArgument("spectral data dimension mismatch".into()));
    }
    spectral.require_supercritical()?;
    let (n, h) = grid(t, dt)?;
    let rhs = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let v = positive_part(y.rows(0, d).into_owned());
        let theta = y.rows(d, d).into_owned();
        let dv = -mech.psi(&v)?;
        let dtheta = theta_rhs(mech, spectral, &v, &theta)?;
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&dv);
        out.rows_mut(d, d).copy_from(&dtheta);
        Ok(out)
    };
    let mut y = DVector::zeros(2 * d);
    y.rows_mut(0, d).copy_from(f);
    y.rows_mut(d, d).fill(1.0);
    let mut t_grid = vec![0.0];
    let mut v_values = vec![f.clone()];
    let mut theta_values = vec![DVector::from_element(d, 1.0)];
    let mut clipped = 0;
    for k in 1..=n {
        let tk = if k == n { t } else { k as f64 * h };
        y = advance(&y, h, &rhs)?;
        clip(&mut y, 0..d, tk, &mut clipped)?;
        t_grid.push(tk);
        v_values.push(y.rows(0, d).into_owned());
        theta_values.push(y.rows(d, d).into_owned());
    }
    Ok(ThetaSolution {
        t_grid: t_grid.clone(),
        theta_values,
        flow: FlowSolution {
            t_grid,
            v_values,
            f: f.clone(),
            step_size: h,
            clipped,
        },
    })
}

/// Laplace functional under the martingale change of measure:
/// `E~_x e^{-<f,X_t>} = E_x e^{-<f,X_t>} <theta_t, phi∘x> / <phi, x>`.
pub fn tilted_laplace(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x: &DVector<f64>,
    f: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<f64> {
    check_nonneg("x", x, mech.dim())?;
    let px = spectral.phi.dot(x);
    if !(px > 0.0) {
        return Err(Error::InvalidArgument(
            "the change of measure needs a nonzero initial state".into(),
        ));
    }
    let sol = solve_theta(mech, spectral, f, t, dt)?;
    let plain = (-x.dot(sol.flow.terminal())).exp();
    let ratio = sol.terminal().dot(&spectral.phi.component_mul(x)) / px;
    Ok(plain * ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::LevyMeasure;
    use crate::spectral::perron;
    use nalgebra::DMatrix;

    /// `psi(u) = -u + u^2`.
    fn logistic() -> BranchingMechanism {
        BranchingMechanism::from_b(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![LevyMeasure::zero()],
        )
        .unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn logistic_closed_form() {
        let t = std::f64::consts::LN_2;
        let sol = solve_v(&logistic(), &v1(0.5), t, DEFAULT_DT).unwrap();
        assert!((sol.terminal()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(sol.t_grid.last().copied(), Some(t));
        assert_eq!(sol.v_values[0][0], 0.5);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let sol = solve_v(&logistic(), &v1(1.0), 3.0, 0.01).unwrap();
        assert!(sol.v_values.iter().all(|v| (v[0] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_datum_stays_zero() {
        let sol = solve_v(&logistic(), &v1(0.0), 2.0, 0.01).unwrap();
        assert!(sol.v_values.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn theta_closed_form() {
        let mech = logistic();
        let spectral = perron(mech.b()).unwrap();
        let t = std::f64::consts::LN_2;
        let sol = solve_theta(&mech, &spectral, &v1(0.5), t, DEFAULT_DT).unwrap();
        assert!((sol.terminal()[0] - 4.0 / 9.0).abs() < 1e-12);
        assert!((sol.flow.terminal()[0] - 2.0 / 3.0).abs() < 1e-12);
        let tl = tilted_laplace(&mech, &spectral, &v1(1.0), &v1(0.5), t, DEFAULT_DT).unwrap();
        assert!((tl - (-2.0f64 / 3.0).exp() * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn tilted_laplace_rejects_zero_state() {
        let mech = logistic();
        let spectral = perron(mech.b()).unwrap();
        assert!(tilted_laplace(&mech, &spectral, &v1(0.0), &v1(0.5), 1.0, 0.01).is_err());
    }

    #[test]
    fn mean_consistency_logistic() {
        let defect = mean_consistency(&logistic(), 1.0, DEFAULT_DT, DEFAULT_FD_EPS).unwrap();
        assert!(defect < 1e-7, "{defect}");
        assert_eq!(mean_consistency(&logistic(), 0.0, DEFAULT_DT, DEFAULT_FD_EPS).unwrap(), 0.0);
    }
}
