//! Mean semigroup and Perron–Frobenius data.
//!
//! `M(t) = exp(t B^T)` with `M(t)_ij = E_{e_i} <e_j, X_t>`. For an irreducible
//! drift the dominant eigenvalue `lambda1` of `B^T` is real and simple with
//! strictly positive right and left eigenvectors `phi`, `phi_hat`,
//! normalized so that `<phi, 1> = 1 = <phi, phi_hat>`, and
//! `M(t) e^{-lambda1 t} -> P = phi phi_hat^T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_ext;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 100_000;
/// Iterations between squarings of the iteration matrix.
const SQUARE_EVERY: usize = 64;
const NEWTON_STEPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralData {
    pub lambda1: f64,
    pub phi: DVector<f64>,
    pub phi_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub class: Criticality,
    pub m_phi: f64,
    pub big_m_phi: f64,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn is_supercritical(&self) -> bool {
        self.class == Criticality::Supercritical
    }

    /// Errors unless the data describe a supercritical process.
    pub fn require_supercritical(&self) -> Result<()> {
        if self.is_supercritical() {
            Ok(())
        } else {
            Err(Error::NotSupercritical(self.lambda1))
        }
    }

    /// `e^{-lambda1 t} <phi, x>`.
    pub fn martingale(&self, t: f64, x: &DVector<f64>) -> f64 {
        (-self.lambda1 * t).exp() * self.phi.dot(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanMatrix {
    pub t: f64,
    pub m: DMatrix<f64>,
}

/// `M(t) = exp(t B^T)`.
pub fn mean_matrix(b: &DMatrix<f64>, t: f64) -> MeanMatrix {
    let m = if t == 0.0 {
        DMatrix::identity(b.nrows(), b.ncols())
    } else {
        (b.transpose() * t).exp()
    };
    MeanMatrix { t, m }
}

/// Strong connectivity of the digraph `i -> j` iff `B_ij > 0`, `i != j`.
pub fn is_irreducible(b: &DMatrix<f64>) -> bool {
    let d = b.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..d {
                let w = if forward { b[(i, j)] } else { b[(j, i)] };
                if j != i && w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    d >= 1 && reach(true) && reach(false)
}

/// Dominant eigenvector of the positive matrix `a`, normalized to sum one.
fn power_iteration(mut a: DMatrix<f64>) -> Result<DVector<f64>> {
    let d = a.nrows();
    let mut v = DVector::from_element(d, 1.0 / d as f64);
    for it in 1..=POWER_MAX_ITER {
        let mut next = &a * &v;
        // positivity projection: roundoff may produce tiny negatives
        next.iter_mut().for_each(|x| *x = x.max(0.0));
        let s = next.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::NoDominantEigenvalue(
                "power iteration lost positivity".into(),
            ));
        }
        next /= s;
        let delta = (&next - &v).amax();
        v = next;
        if delta < POWER_TOL {
            return Ok(v);
        }
        if it % SQUARE_EVERY == 0 {
            a = &a * &a;
            let scale = a.amax();
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::NoDominantEigenvalue("iteration matrix degenerated".into()));
            }
            a /= scale;
        }
    }
    Err(Error::NoDominantEigenvalue(format!(
        "power iteration did not converge in {POWER_MAX_ITER} iterations"
    )))
}

/// Newton refinement of `a v = lambda v`, `<1, v> = 1`.
fn refine_eigenpair(a: &DMatrix<f64>, mut v: DVector<f64>) -> (f64, DVector<f64>) {
    let d = a.nrows();
    let mut lambda = (a * &v).sum() / v.sum();
    for _ in 0..NEWTON_STEPS {
        let r = a * &v - &v * lambda;
        if r.amax() <= f64::EPSILON * a.amax().max(1.0) {
            break;
        }
        let mut j = DMatrix::zeros(d + 1, d + 1);
        j.view_mut((0, 0), (d, d)).copy_from(a);
        for i in 0..d {
            j[(i, i)] -= lambda;
            j[(i, d)] = -v[i];
            j[(d, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(d + 1);
        for i in 0..d {
            rhs[i] = -r[i];
        }
        rhs[d] = 1.0 - v.sum();
        let Some(step) = j.lu().solve(&rhs) else {
            break;
        };
        for i in 0..d {
            v[i] += step[i];
        }
        lambda += step[d];
    }
    (lambda, v)
}

/// Perron–Frobenius data of an irreducible drift matrix `B`.
pub fn perron(b: &DMatrix<f64>) -> Result<SpectralData> {
    let d = b.nrows();
    if d == 0 || b.ncols() != d {
        return Err(Error::InvalidArgument("drift must be a nonempty square matrix".into()));
    }
    if !is_irreducible(b) {
        return Err(Error::NotIrreducible);
    }
    let bt = b.transpose();
    let shift = b.diagonal().max();
    let shifted = {
        let mut m = bt.clone();
        for i in 0..d {
            m[(i, i)] -= shift;
        }
        m
    };
    // exp(h (B^T - s I)) with h = 1 is entrywise positive for irreducible B
    let a = shifted.exp();
    let phi0 = power_iteration(a.clone())?;
    let phi_hat0 = power_iteration(a.transpose())?;

    let (lambda1, mut phi) = refine_eigenpair(&bt, phi0);
    let (lambda_left, mut phi_hat) = refine_eigenpair(b, phi_hat0);
    let scale = lambda1.abs().max(b.amax()).max(1.0);
    if (lambda1 - lambda_left).abs() > 1e-8 * scale {
        return Err(Error::NoDominantEigenvalue(format!(
            "right and left eigenvalues disagree: {lambda1} vs {lambda_left}"
        )));
    }
    if phi.iter().any(|&x| !(x > 0.0)) || phi_hat.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NoDominantEigenvalue(
            "dominant eigenvector is not strictly positive".into(),
        ));
    }
    phi /= phi.sum();
    phi_hat /= phi.dot(&phi_hat);
    let p = &phi * phi_hat.transpose();
    let tol = 1e-12 * scale;
    let class = if lambda1 > tol {
        Criticality::Supercritical
    } else if lambda1 < -tol {
        Criticality::Subcritical
    } else {
        Criticality::Critical
    };
    Ok(SpectralData {
        lambda1,
        m_phi: phi.min(),
        big_m_phi: phi.max(),
        phi,
        phi_hat,
        p,
        class,
    })
}

/// Empirical check of `|M(t) e^{-lambda1 t} - P| <= c1 e^{-c2 t}` and
/// `|M(t)| <= c3 e^{lambda1 t}` in the max-abs-entry norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub c1: f64,
    /// Fitted decay rate; `inf` when the deviation vanishes identically.
    #[serde(with = "serde_ext::ext_real")]
    pub c2: f64,
    /// `sup_t |M(t)| e^{-lambda1 t}` over the grid.
    pub c3: f64,
    /// Largest absolute residual of the log-linear fit.
    pub max_residual: f64,
    pub t: Vec<f64>,
    pub deviation: Vec<f64>,
}

/// Deviations below this carry too much relative roundoff to be fitted.
const DECAY_FLOOR: f64 = 1e-9;

pub fn check_decay(spectral: &SpectralData, b: &DMatrix<f64>, t_grid: &[f64]) -> DecayFit {
    let mut deviation = Vec::with_capacity(t_grid.len());
    let mut c3: f64 = 0.0;
    for &t in t_grid {
        let m = mean_matrix(b, t).m * (-spectral.lambda1 * t).exp();
        c3 = c3.max(m.amax());
        deviation.push((m - &spectral.p).amax());
    }
    let pts: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(&deviation)
        .filter(|(_, &dv)| dv > DECAY_FLOOR)
        .map(|(&t, &dv)| (t, dv.ln()))
        .collect();
    // fit the asymptotic regime: later half of the usable points
    let tail = &pts[pts.len() / 2..];
    let (c1, c2, max_residual) = if tail.len() < 2 {
        (deviation.iter().copied().fold(0.0, f64::max), f64::INFINITY, 0.0)
    } else {
        let n = tail.len() as f64;
        let mt = tail.iter().map(|p| p.0).sum::<f64>() / n;
        let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = tail.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
        let sxx: f64 = tail.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mt;
        let res = tail
            .iter()
            .map(|p| (p.1 - (intercept + slope * p.0)).abs())
            .fold(0.0, f64::max);
        (intercept.exp(), -slope, res)
    };
    DecayFit {
        c1,
        c2,
        c3,
        max_residual,
        t: t_grid.to_vec(),
        deviation,
    }
}

/// Uniform grid on `[0, 40]` with step 0.25, the default for gap estimates.
pub fn default_decay_grid() -> Vec<f64> {
    (0..=160).map(|k| 0.25 * k as f64).collect()
}

/// `lambda1` minus the largest real part among the remaining eigenvalues
/// of `B`; infinite for a single type.
pub fn spectral_gap(spectral: &SpectralData, b: &DMatrix<f64>) -> f64 {
    let mut eig: Vec<(f64, f64)> = b
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect();
    let k = eig
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1 .0 - spectral.lambda1).hypot(a.1 .1);
            let db = (b.1 .0 - spectral.lambda1).hypot(b.1 .1);
            da.total_cmp(&db)
        })
        .map(|(k, _)| k);
    if let Some(k) = k {
        eig.remove(k);
    }
    eig.iter()
        .map(|z| spectral.lambda1 - z.0)
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swap() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn gap_of_swap() {
        let s = perron(&swap()).unwrap();
        assert!((spectral_gap(&s, &swap()) - 2.0).abs() < 1e-12);
        let one = DMatrix::from_element(1, 1, 0.3);
        assert!(spectral_gap(&perron(&one).unwrap(), &one).is_infinite());
    }

    #[test]
    fn mean_matrix_identity_at_zero() {
        let b = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.2, 0.5]);
        assert_eq!(mean_matrix(&b, 0.0).m, DMatrix::identity(2, 2));
    }

    #[test]
    fn mean_matrix_cosh_sinh() {
        for &t in &[0.1, 1.0, 2.5] {
            let m = mean_matrix(&swap(), t).m;
            let (c, s): (f64, f64) = (f64::cosh(t), f64::sinh(t));
            let expected = DMatrix::from_row_slice(2, 2, &[c, s, s, c]);
            assert!((m - expected).amax() < 1e-13 * c);
        }
    }

    #[test]
    fn mean_matrix_diagonal() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.7, 0.4]));
        let m = mean_matrix(&b, 1.5).m;
        assert!((m[(0, 0)] - (-1.05f64).exp()).abs() < 1e-14);
        assert!((m[(1, 1)] - 0.6f64.exp()).abs() < 1e-14);
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn perron_swap() {
        let s = perron(&swap()).unwrap();
        assert!((s.lambda1 - 1.0).abs() < 1e-12);
        assert!((&s.phi - DVector::from_vec(vec![0.5, 0.5])).amax() < 1e-12);
        assert!((&s.phi_hat - DVector::from_vec(vec![1.0, 1.0])).amax() < 1e-12);
        assert_eq!(s.class, Criticality::Supercritical);
    }

    #[test]
    fn perron_scalar() {
        let s = perron(&DMatrix::from_element(1, 1, -0.3)).unwrap();
        assert!((s.lambda1 + 0.3).abs() < 1e-15);
        assert_eq!(s.phi[0], 1.0);
        assert_eq!(s.phi_hat[0], 1.0);
        assert_eq!(s.class, Criticality::Subcritical);
    }

    #[test]
    fn perron_rejects_reducible() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(perron(&b), Err(Error::NotIrreducible)));
        // one-way coupling is still reducible
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        assert!(matches!(perron(&b), Err(Error::NotIrreducible)));
    }

    #[test]
    fn swap_decay_rate_is_two() {
        let s = perron(&swap()).unwrap();
        let fit = check_decay(&s, &swap(), &default_decay_grid());
        assert!((fit.c2 - 2.0).abs() < 1e-6, "{}", fit.c2);
        assert!((fit.c1 - 0.5).abs() < 1e-6, "{}", fit.c1);
        // closed form e^{-2t} / 2
        for (t, dv) in fit.t.iter().zip(&fit.deviation).take(20) {
            assert!((dv - 0.5 * (-2.0 * t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_decay_is_identically_zero() {
        let b = DMatrix::from_element(1, 1, 0.4);
        let s = perron(&b).unwrap();
        let fit = check_decay(&s, &b, &default_decay_grid());
        assert!(fit.deviation.iter().all(|&d| d < 1e-12));
        assert!(fit.c2.is_infinite());
    }
}
