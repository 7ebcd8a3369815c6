//! TOML configuration.
//!
//! ```toml
//! [mechanism]
//! c = [0.5, 0.5]
//! b_tilde = [[0.4, 0.5], [0.5, 0.4]]     # or `b = ...` to give B directly
//!
//! [[mechanism.measures]]                 # one entry per type, in order
//! kind = "atomic"
//! atoms = [{ z = [1.0, 0.5], rate = 0.2 }]
//!
//! [[mechanism.measures]]
//! kind = "radial"
//! direction = [0.0, 1.0]
//! r0 = 1.0
//! scale = 1.0
//! alpha = 1.5
//! gamma = 0.0                            # optional log exponent
//! small = { scale = 1.0, beta = 0.5 }    # optional, density on (0, r0]
//!
//! [simulation]                           # all keys optional
//! dt = 1e-3
//! horizon = 2.0
//! eps_jump = 1e-3
//! extinction_threshold = 1e-12
//! grid_stride = 100
//! x0 = [1.0, 1.0]
//!
//! [flow]
//! dt = 1e-3
//! f = [1.0, 1.0]
//! t = 1.0
//!
//! [spine]
//! delta = 1e-3
//! max_immigrants = 100000
//!
//! [experiment]
//! seed = 42
//! paths = 10000
//! t_list = [2.0, 4.0, 8.0]
//!
//! [xlogx]                                # measures of the paired mechanism
//! survivors_median_floor = 0.0667        # optional, holding-side floor
//! [[xlogx.measures]]
//! kind = "zero"
//! ```
//!
//! A measure of `kind = "zero"` has no jumps.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulator::SimConfig;
use crate::spine::SpineConfig;
use crate::mechanism::{
    Atom, BranchingMechanism, Drift, LevyMeasure, MechanismParts, PowerLawTail, RadialTail,
    SmallJumps,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub mechanism: MechanismSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub flow: FlowSpec,
    #[serde(default)]
    pub spine: SpineSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xlogx: Option<XlogxSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSpec {
    pub c: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_tilde: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    pub measures: Vec<MeasureSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MeasureSpec {
    Zero,
    Atomic {
        atoms: Vec<AtomSpec>,
    },
    Radial {
        direction: Vec<f64>,
        r0: f64,
        scale: f64,
        alpha: f64,
        #[serde(default)]
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        small: Option<SmallSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub z: Vec<f64>,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallSpec {
    pub scale: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub dt: f64,
    pub horizon: f64,
    pub eps_jump: f64,
    pub extinction_threshold: f64,
    pub grid_stride: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1.0,
            eps_jump: 1e-3,
            extinction_threshold: 1e-12,
            grid_stride: 100,
            x0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    pub dt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
    pub t: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            f: None,
            t: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpineSpec {
    pub delta: f64,
    pub max_immigrants: usize,
}

impl Default for SpineSpec {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            max_immigrants: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub paths: usize,
    pub t_list: Vec<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: 10_000,
            t_list: vec![2.0, 4.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XlogxSpec {
    pub measures: Vec<MeasureSpec>,
    /// Lower bound for the survivors' median of `W_T / W_0` on the holding
    /// side, taken from the pilot baseline.
    #[serde(default)]
    pub survivors_median_floor: f64,
}

fn matrix(rows: &[Vec<f64>], d: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("{name} must be {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl MeasureSpec {
    pub fn to_measure(&self, d: usize) -> Result<LevyMeasure> {
        Ok(match self {
            MeasureSpec::Zero => LevyMeasure::zero(),
            MeasureSpec::Atomic { atoms } => {
                if let Some(a) = atoms.iter().find(|a| a.z.len() != d) {
                    return Err(Error::Config(format!(
                        "atom {:?} has length {}, expected {d}",
                        a.z,
                        a.z.len()
                    )));
                }
                LevyMeasure::Atomic {
                    atoms: atoms
                        .iter()
                        .map(|a| Atom {
                            z: DVector::from_vec(a.z.clone()),
                            rate: a.rate,
                        })
                        .collect(),
                }
            }
            MeasureSpec::Radial {
                direction,
                r0,
                scale,
                alpha,
                gamma,
                small,
            } => {
                if direction.len() != d {
                    return Err(Error::Config(format!(
                        "direction has length {}, expected {d}",
                        direction.len()
                    )));
                }
                LevyMeasure::Radial(RadialTail {
                    direction: DVector::from_vec(direction.clone()),
                    tail: PowerLawTail {
                        r0: *r0,
                        scale: *scale,
                        alpha: *alpha,
                        gamma: *gamma,
                    },
                    small: small.map(|s| SmallJumps {
                        scale: s.scale,
                        beta: s.beta,
                    }),
                })
            }
        })
    }
}

impl MechanismSpec {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Unvalidated parts, with `measures` replacing the configured ones if
    /// given.
    pub fn parts_with(&self, measures: Option<&[MeasureSpec]>) -> Result<MechanismParts> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Config("mechanism needs at least one type".into()));
        }
        let specs = measures.unwrap_or(&self.measures);
        if specs.len() != d {
            return Err(Error::Config(format!(
                "{} measures given for {d} types",
                specs.len()
            )));
        }
        let drift = match (&self.b_tilde, &self.b) {
            (Some(bt), None) => Drift::Tilde(matrix(bt, d, "b_tilde")?),
            (None, Some(b)) => Drift::Direct(matrix(b, d, "b")?),
            _ => {
                return Err(Error::Config(
                    "give exactly one of `b_tilde` and `b`".into(),
                ))
            }
        };
        Ok(MechanismParts {
            c: DVector::from_vec(self.c.clone()),
            drift,
            measures: specs.iter().map(|m| m.to_measure(d)).collect::<Result<_>>()?,
        })
    }

    pub fn parts(&self) -> Result<MechanismParts> {
        self.parts_with(None)
    }

    pub fn build(&self) -> Result<BranchingMechanism> {
        BranchingMechanism::from_parts(self.parts()?)
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn dim(&self) -> usize {
        self.mechanism.dim()
    }

    pub fn build_mechanism(&self) -> Result<BranchingMechanism> {
        self.mechanism.build()
    }

    /// The paired mechanism of the x log x experiment.
    pub fn build_xlogx_pair(&self) -> Result<BranchingMechanism> {
        let spec = self
            .xlogx
            .as_ref()
            .ok_or_else(|| Error::Config("missing [xlogx] section".into()))?;
        BranchingMechanism::from_parts(self.mechanism.parts_with(Some(&spec.measures))?)
    }

    /// Initial state, defaulting to the all-ones vector.
    pub fn x0(&self) -> Result<DVector<f64>> {
        self.vector(self.simulation.x0.as_deref(), "x0")
    }

    /// Test function, defaulting to the all-ones vector.
    pub fn f(&self) -> Result<DVector<f64>> {
        self.vector(self.flow.f.as_deref(), "f")
    }

    fn vector(&self, v: Option<&[f64]>, name: &str) -> Result<DVector<f64>> {
        let d = self.dim();
        match v {
            None => Ok(DVector::from_element(d, 1.0)),
            Some(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            Some(v) => Err(Error::Config(format!(
                "{name} has length {}, expected {d}",
                v.len()
            ))),
        }
    }

    /// Simulation settings with the experiment seed.
    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            dt: s.dt,
            horizon: s.horizon,
            eps_jump: s.eps_jump,
            seed: self.experiment.seed,
            extinction_threshold: s.extinction_threshold,
            grid_stride: s.grid_stride,
            record_events: false,
        }
    }

    pub fn spine_config(&self) -> SpineConfig {
        SpineConfig {
            delta: self.spine.delta,
            max_immigrants: self.spine.max_immigrants,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
