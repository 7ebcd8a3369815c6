//! Branching mechanisms.
//!
//! A mechanism on `d` types is given by diffusion coefficients `c`, a drift
//! matrix and one Lévy measure per type. The drift is either supplied in the
//! uncompensated form `B~` (off-diagonals nonnegative), in which case
//!
//! ```text
//! B_ij = B~_ij + int (z_i - delta_ij)^+ mu_j(dz),
//! ```
//!
//! or directly as `B`, which must then satisfy
//! `int z(i) mu_j(dz) <= B_ij` for `i != j`. In compensated form
//!
//! ```text
//! psi_i(u) = -<u, B e_i> + c_i u_i^2 + int (e^{-<u,z>} - 1 + <u,z>) mu_i(dz).
//! ```

mod levy;
mod sampling;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_ext;

pub use levy::{measure_moment, Atom, LevyMeasure, MomentKind, PowerLawTail, RadialTail, SmallJumps};
pub use sampling::{sample_jump, Compensation, SizeBiasedJumps, TruncatedJumps, MAX_JUMP_SIZE};

/// Relative slack allowed in the moment inequality.
const MOMENT_INEQUALITY_TOL: f64 = 1e-12;

/// How the drift was supplied.
#[derive(Clone, Debug, PartialEq)]
pub enum Drift {
    Tilde(DMatrix<f64>),
    Direct(DMatrix<f64>),
}

/// Unvalidated mechanism data, as read from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismParts {
    pub c: DVector<f64>,
    pub drift: Drift,
    pub measures: Vec<LevyMeasure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchingMechanism {
    c: DVector<f64>,
    b_tilde: Option<DMatrix<f64>>,
    b: DMatrix<f64>,
    measures: Vec<LevyMeasure>,
}

/// `B_ij = B~_ij + int (z_i - delta_ij)^+ mu_j(dz)`.
pub fn convert_drift(b_tilde: &DMatrix<f64>, measures: &[LevyMeasure]) -> Result<DMatrix<f64>> {
    let d = b_tilde.nrows();
    if b_tilde.ncols() != d || measures.len() != d {
        return Err(Error::InvalidMechanism(format!(
            "drift is {}x{} but {} measures were given",
            b_tilde.nrows(),
            b_tilde.ncols(),
            measures.len()
        )));
    }
    let mut b = b_tilde.clone();
    for j in 0..d {
        for i in 0..d {
            let m = if i == j {
                measures[j].excess_moment(i)?
            } else {
                measures[j].first_moment(i)?
            };
            if !m.is_finite() {
                return Err(Error::InfiniteMoment { i, j });
            }
            b[(i, j)] += m;
        }
    }
    Ok(b)
}

/// Matrix `m_ij = int z(i) mu_j(dz)`.
pub fn moment_matrix(measures: &[LevyMeasure]) -> Result<DMatrix<f64>> {
    let d = measures.len();
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            m[(i, j)] = measures[j].first_moment(i)?;
        }
    }
    Ok(m)
}

impl BranchingMechanism {
    /// Builds a mechanism from `c`, `B~` and the measures.
    pub fn from_b_tilde(
        c: DVector<f64>,
        b_tilde: DMatrix<f64>,
        measures: Vec<LevyMeasure>,
    ) -> Result<Self> {
        Self::from_parts(MechanismParts {
            c,
            drift: Drift::Tilde(b_tilde),
            measures,
        })
    }

    /// Builds a mechanism from `c`, `B` and the measures. The moment
    /// inequality is a hard precondition here.
    pub fn from_b(c: DVector<f64>, b: DMatrix<f64>, measures: Vec<LevyMeasure>) -> Result<Self> {
        Self::from_parts(MechanismParts {
            c,
            drift: Drift::Direct(b),
            measures,
        })
    }

    pub fn from_parts(parts: MechanismParts) -> Result<Self> {
        let report = validate(&parts);
        if let Some(bad) = report.checks.iter().find(|c| !c.passed) {
            return Err(Error::InvalidMechanism(format!("{}: {}", bad.name, bad.detail)));
        }
        let (b_tilde, b) = match parts.drift {
            Drift::Tilde(bt) => {
                let b = convert_drift(&bt, &parts.measures)?;
                (Some(bt), b)
            }
            Drift::Direct(b) => (None, b),
        };
        Ok(Self {
            c: parts.c,
            b_tilde,
            b,
            measures: parts.measures,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn b_tilde(&self) -> Option<&DMatrix<f64>> {
        self.b_tilde.as_ref()
    }

    pub fn measures(&self) -> &[LevyMeasure] {
        &self.measures
    }

    pub fn measure(&self, i: usize) -> &LevyMeasure {
        &self.measures[i]
    }

    /// True when every jump measure vanishes.
    pub fn is_continuous(&self) -> bool {
        self.measures.iter().all(LevyMeasure::is_zero)
    }

    /// True when the mechanism is linear (no diffusion and no jumps).
    pub fn is_linear(&self) -> bool {
        self.is_continuous() && self.c.iter().all(|&c| c == 0.0)
    }

    /// Mechanism sharing `c`, `B` and the measures with `self`, but with `B`
    /// replaced.
    pub fn with_b(&self, b: DMatrix<f64>) -> Result<Self> {
        Self::from_b(self.c.clone(), b, self.measures.clone())
    }

    /// The branching mechanism `psi(u)`.
    pub fn psi(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.dim();
        if u.len() != d {
            return Err(Error::InvalidArgument(format!(
                "argument has length {}, expected {d}",
                u.len()
            )));
        }
        let lin = self.b.tr_mul(u);
        let mut out = DVector::zeros(d);
        for i in 0..d {
            out[i] = -lin[i] + self.c[i] * u[i] * u[i] + self.measures[i].laplace_exponent(u)?;
        }
        Ok(out)
    }

    /// Per-type `x log x` integrals and the overall verdict.
    pub fn check_xlogx(&self) -> Result<XlogxVerdict> {
        check_xlogx(self)
    }
}

/// Shorthand for `mech.psi(u)`.
pub fn evaluate_psi(mech: &BranchingMechanism, u: &DVector<f64>) -> Result<DVector<f64>> {
    mech.psi(u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XlogxVerdict {
    pub holds: bool,
    #[serde(with = "serde_ext::ext_real_vec")]
    pub integrals: Vec<f64>,
}

pub fn check_xlogx(mech: &BranchingMechanism) -> Result<XlogxVerdict> {
    let integrals = mech
        .measures
        .iter()
        .map(|m| measure_moment(m, MomentKind::Xlogx))
        .collect::<Result<Vec<_>>>()?;
    Ok(XlogxVerdict {
        holds: integrals.iter().all(|v| v.is_finite()),
        integrals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of `validate`: one entry per invariant plus the computed
/// quantities they were decided from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Drift matrix `B` (rows), when computable.
    pub b: Option<Vec<Vec<f64>>>,
    /// `int z(i) mu_j(dz)` (rows indexed by `i`), when computable.
    pub moments: Option<Vec<Vec<f64>>>,
    #[serde(with = "serde_ext::ext_real_vec")]
    pub integrability: Vec<f64>,
    pub xlogx: Option<XlogxVerdict>,
    pub psi_at_zero: Option<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Checks every structural invariant of a mechanism and reports each one.
pub fn validate(parts: &MechanismParts) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        })
    };
    let d = parts.c.len();
    let drift = match &parts.drift {
        Drift::Tilde(m) | Drift::Direct(m) => m,
    };
    let dims_ok = d > 0 && drift.nrows() == d && drift.ncols() == d && parts.measures.len() == d;
    push(
        "dimension",
        dims_ok,
        format!(
            "c has {d} entries, drift is {}x{}, {} measures",
            drift.nrows(),
            drift.ncols(),
            parts.measures.len()
        ),
    );
    let mut report = ValidationReport {
        passed: false,
        checks: Vec::new(),
        b: None,
        moments: None,
        integrability: Vec::new(),
        xlogx: None,
        psi_at_zero: None,
    };
    if !dims_ok {
        report.checks = checks;
        return report;
    }

    let c_ok = parts.c.iter().all(|&c| c >= 0.0 && c.is_finite());
    push("diffusion sign", c_ok, format!("c = {:?}", parts.c.as_slice()));

    let finite = drift.iter().all(|x| x.is_finite());
    push("finite drift", finite, String::new());

    if let Drift::Tilde(bt) = &parts.drift {
        let bad: Vec<String> = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && bt[(i, j)] < 0.0)
            .map(|(i, j)| format!("B~[{i}][{j}] = {}", bt[(i, j)]))
            .collect();
        push("off-diagonal sign", bad.is_empty(), bad.join(", "));
    }

    let mut measures_ok = true;
    for (i, m) in parts.measures.iter().enumerate() {
        if let Err(e) = m.check(d, i) {
            measures_ok = false;
            push("measure parameters", false, format!("type {i}: {e}"));
        }
    }
    if measures_ok {
        push("measure parameters", true, String::new());
    } else {
        report.checks = checks;
        return report;
    }

    let integrability: Vec<f64> = parts
        .measures
        .iter()
        .enumerate()
        .map(|(i, m)| m.integrability(i).unwrap_or(f64::NAN))
        .collect();
    let integrable = integrability.iter().all(|v| v.is_finite());
    push(
        "integrability",
        integrable,
        format!("int [|z| ^ |z|^2 + sum_(j!=i) z_j] mu_i = {integrability:?}"),
    );
    report.integrability = integrability;

    let moments = match moment_matrix(&parts.measures) {
        Ok(m) => m,
        Err(e) => {
            push("moment inequality", false, e.to_string());
            report.checks = checks;
            return report;
        }
    };
    report.moments = Some(rows(&moments));

    let b = match &parts.drift {
        Drift::Tilde(bt) => convert_drift(bt, &parts.measures),
        Drift::Direct(b) => Ok(b.clone()),
    };
    let b = match b {
        Ok(b) => b,
        Err(e) => {
            push("drift conversion", false, e.to_string());
            report.checks = checks;
            return report;
        }
    };
    let mut violations = Vec::new();
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let m = moments[(i, j)];
            let slack = MOMENT_INEQUALITY_TOL * m.abs().max(b[(i, j)].abs()).max(1.0);
            if !(m <= b[(i, j)] + slack) {
                violations.push(format!(
                    "int z({i}) mu_{j} = {m} > B[{i}][{j}] = {}",
                    b[(i, j)]
                ));
            }
        }
    }
    push("moment inequality", violations.is_empty(), violations.join(", "));
    report.b = Some(rows(&b));

    let mech = BranchingMechanism {
        c: parts.c.clone(),
        b_tilde: None,
        b,
        measures: parts.measures.clone(),
    };
    match mech.psi(&DVector::zeros(d)) {
        Ok(p) => {
            let ok = p.iter().all(|&x| x == 0.0);
            push("psi at zero", ok, format!("psi(0) = {:?}", p.as_slice()));
            report.psi_at_zero = Some(p.iter().copied().collect());
        }
        Err(e) => push("psi at zero", false, e.to_string()),
    }
    report.xlogx = check_xlogx(&mech).ok();

    report.passed = checks.iter().all(|c| c.passed);
    report.checks = checks;
    report
}
