//! Ensemble runner, estimators, the growth experiments and report output.
//!
//! Paths run in parallel on the current rayon pool. Path `k` always draws
//! from stream `k` of the experiment seed and per-path results are reduced
//! in path order, so every statistic is bit-identical for any worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace_flow::{solve_v, tilted_laplace};
use crate::mechanism::BranchingMechanism;
use crate::rng::{derive_seed, path_rng, PathRng};
use crate::serde_ext;
use crate::simulator::{absorb, SimConfig, Stepper};
use crate::spectral::SpectralData;
use crate::spine::{weighted_tilt_estimate, GammaSampler, SpineConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Uniform statistical tolerance, in standard errors.
pub const SIGMA: f64 = 3.0;
/// Survivors are paths with `<1, X_T>` above this.
pub const SURVIVAL_THRESHOLD: f64 = 1e-6;

/// Runs `f` for paths `0..n_paths`, each with its own stream of `seed`,
/// and returns the results in path order.
pub fn map_paths<T, F>(n_paths: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut PathRng) -> Result<T> + Sync,
{
    (0..n_paths as u64)
        .into_par_iter()
        .map(|k| f(k, &mut path_rng(seed, k)))
        .collect()
}

/// Sample mean with standard error `std / sqrt(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            f64::NAN
        } else {
            let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        };
        Self { mean, se, n }
    }

    /// `|mean - reference| / se`; zero when both sides agree exactly.
    pub fn z_score(&self, reference: f64) -> f64 {
        let dev = (self.mean - reference).abs();
        if dev == 0.0 {
            0.0
        } else {
            dev / self.se
        }
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub levels: Vec<f64>,
    #[serde(with = "serde_ext::ext_real_vec")]
    pub values: Vec<f64>,
}

impl Quantiles {
    pub fn of(xs: &[f64]) -> Self {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            levels: QUANTILE_LEVELS.to_vec(),
            values: QUANTILE_LEVELS.iter().map(|&p| quantile(&s, p)).collect(),
        }
    }

    pub fn median(&self) -> f64 {
        self.values[2]
    }
}

/// States of every path at the observation times.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub times: Vec<f64>,
    /// `states[path][time]`.
    pub states: Vec<Vec<DVector<f64>>>,
    pub clamps: Vec<usize>,
}

impl Ensemble {
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    pub fn at(&self, k: usize) -> impl Iterator<Item = &DVector<f64>> {
        self.states.iter().map(move |p| &p[k])
    }

    pub fn estimate<F: Fn(&DVector<f64>) -> f64>(&self, k: usize, f: F) -> Estimate {
        Estimate::from_samples(&self.at(k).map(f).collect::<Vec<_>>())
    }

    pub fn laplace(&self, k: usize, f: &DVector<f64>) -> Estimate {
        self.estimate(k, |x| (-f.dot(x)).exp())
    }

    pub fn martingale(&self, k: usize, spectral: &SpectralData) -> Vec<f64> {
        let t = self.times[k];
        self.at(k).map(|x| spectral.martingale(t, x)).collect()
    }
}

/// Simulates `n_paths` paths to the largest observation time and keeps the
/// states at `times` (which must lie on the step grid).
pub fn simulate_ensemble(
    mech: &BranchingMechanism,
    x0: &DVector<f64>,
    config: &SimConfig,
    n_paths: usize,
    times: &[f64],
) -> Result<Ensemble> {
    let horizon = times.iter().copied().fold(0.0, f64::max);
    if horizon <= 0.0 {
        return Ok(Ensemble {
            times: times.to_vec(),
            states: vec![vec![x0.clone(); times.len()]; n_paths],
            clamps: vec![0; n_paths],
        });
    }
    let config = SimConfig {
        horizon,
        ..config.clone()
    };
    config.validate()?;
    let (n, h) = config.steps();
    let idx = times
        .iter()
        .map(|&t| config.step_index(t))
        .collect::<Result<Vec<_>>>()?;
    let stepper = Stepper::new(mech, h, config.eps_jump)?;
    let d = mech.dim();
    let results = map_paths(n_paths, config.seed, |_, rng| {
        let mut x = x0.clone();
        let mut scratch = DVector::zeros(d);
        let mut obs = vec![DVector::zeros(d); times.len()];
        let mut clamps = 0;
        let mut dead = absorb(&mut x, config.extinction_threshold);
        let store = |obs: &mut Vec<DVector<f64>>, k: usize, x: &DVector<f64>| {
            for (slot, &i) in idx.iter().enumerate() {
                if i == k {
                    obs[slot].copy_from(x);
                }
            }
        };
        store(&mut obs, 0, &x);
        for k in 0..n {
            if !dead {
                clamps += stepper.step(&mut x, &mut scratch, rng, k as f64 * h, None)?;
                dead = absorb(&mut x, config.extinction_threshold);
            }
            store(&mut obs, k + 1, &x);
        }
        Ok((obs, clamps))
    })?;
    let (states, clamps) = results.into_iter().unzip();
    Ok(Ensemble {
        times: times.to_vec(),
        states,
        clamps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub t: f64,
    pub mean_x: Vec<f64>,
    pub se_x: Vec<f64>,
    pub mean_w: f64,
    pub se_w: f64,
    pub w_quantiles: Quantiles,
    pub survival_fraction: f64,
    /// Quantiles over survivors of `|X/<1,X> - phi_hat/<1,phi_hat>|_1`.
    pub direction_error: Quantiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_paths: usize,
    pub times: Vec<TimeStats>,
    pub clamps: usize,
}

/// `|x / <1,x> - phi_hat / <1,phi_hat>|_1`.
pub fn direction_error(x: &DVector<f64>, spectral: &SpectralData) -> f64 {
    let target = &spectral.phi_hat / spectral.phi_hat.sum();
    (x / x.sum() - target).lp_norm(1)
}

impl EnsembleStats {
    pub fn from_ensemble(ens: &Ensemble, spectral: &SpectralData) -> Self {
        let d = spectral.dim();
        let n = ens.n_paths();
        let times = (0..ens.times.len())
            .map(|k| {
                let comps: Vec<Estimate> = (0..d).map(|i| ens.estimate(k, |x| x[i])).collect();
                let w = ens.martingale(k, spectral);
                let west = Estimate::from_samples(&w);
                let survivors: Vec<f64> = ens
                    .at(k)
                    .filter(|x| x.sum() > SURVIVAL_THRESHOLD)
                    .map(|x| direction_error(x, spectral))
                    .collect();
                TimeStats {
                    t: ens.times[k],
                    mean_x: comps.iter().map(|e| e.mean).collect(),
                    se_x: comps.iter().map(|e| e.se).collect(),
                    mean_w: west.mean,
                    se_w: west.se,
                    w_quantiles: Quantiles::of(&w),
                    survival_fraction: survivors.len() as f64 / n as f64,
                    direction_error: Quantiles::of(&survivors),
                }
            })
            .collect();
        Self {
            n_paths: n,
            times,
            clamps: ens.clamps.iter().sum(),
        }
    }
}

/// Simulates an ensemble and summarizes it at `times`.
pub fn run_ensemble(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    n_paths: usize,
    times: &[f64],
) -> Result<EnsembleStats> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("an ensemble needs at least 2 paths".into()));
    }
    let ens = simulate_ensemble(mech, x0, config, n_paths, times)?;
    Ok(EnsembleStats::from_ensemble(&ens, spectral))
}

/// One statistic in long format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    #[serde(with = "serde_ext::ext_real")]
    pub t: f64,
    pub quantity: String,
    pub component: Option<usize>,
    #[serde(with = "serde_ext::ext_real")]
    pub value: f64,
    #[serde(with = "serde_ext::ext_real")]
    pub se: f64,
    #[serde(with = "serde_ext::ext_real")]
    pub reference: f64,
}

impl StatRow {
    pub fn new(t: f64, quantity: &str, component: Option<usize>, value: f64) -> Self {
        Self {
            t,
            quantity: quantity.into(),
            component,
            value,
            se: f64::NAN,
            reference: f64::NAN,
        }
    }

    pub fn estimate(t: f64, quantity: &str, component: Option<usize>, e: Estimate, reference: f64) -> Self {
        Self {
            se: e.se,
            reference,
            ..Self::new(t, quantity, component, e.mean)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    #[serde(with = "serde_ext::ext_real")]
    pub value: f64,
    #[serde(with = "serde_ext::ext_real")]
    pub threshold: f64,
    pub detail: String,
}

impl Criterion {
    pub fn new(name: impl Into<String>, passed: bool, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    /// `|estimate - reference| <= SIGMA * se`.
    pub fn within_se(name: impl Into<String>, e: Estimate, reference: f64) -> Self {
        let z = e.z_score(reference);
        Self::new(
            name,
            z <= SIGMA,
            z,
            SIGMA,
            format!("estimate {:.6e} ± {:.3e}, reference {:.6e}", e.mean, e.se, reference),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub fingerprint: String,
    pub seed: u64,
    pub n_paths: usize,
    pub runtime_secs: f64,
    /// Multiplier applied to `SIGMA` for simultaneous comparisons.
    pub bonferroni: f64,
    /// Pre-registered tolerances and thresholds used by the criteria.
    pub tolerances: BTreeMap<String, f64>,
    pub rows: Vec<StatRow>,
    pub criteria: Vec<Criterion>,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64, n_paths: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.into(),
            fingerprint: String::new(),
            seed,
            n_paths,
            runtime_secs: 0.0,
            bonferroni: 1.0,
            tolerances: BTreeMap::new(),
            rows: Vec::new(),
            criteria: Vec::new(),
            passed: true,
        }
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn push(&mut self, c: Criterion) {
        self.passed &= c.passed;
        self.criteria.push(c);
    }

    /// Equality of everything except the runtime, with NaN equal to NaN.
    pub fn same_statistics(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.runtime_secs = other.runtime_secs;
        serde_json::to_string(&a).ok() == serde_json::to_string(other).ok()
    }

    /// Recomputes `passed` from the criteria.
    pub fn recompute_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Column order of the statistics CSV.
pub const CSV_COLUMNS: [&str; 7] = ["experiment", "t", "quantity", "component", "value", "se", "reference"];
/// Column order of the criteria CSV.
pub const CRITERIA_COLUMNS: [&str; 5] = ["name", "passed", "value", "threshold", "detail"];

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:?}")
    }
}

/// Writes `<experiment>.json`, or `<experiment>.csv` plus
/// `<experiment>_criteria.csv`, into `out_dir`.
pub fn emit_report(report: &ExperimentReport, format: Format, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    match format {
        Format::Json => {
            let path = out_dir.join(format!("{}.json", report.experiment));
            std::fs::write(&path, serde_json::to_string_pretty(report)?)?;
            Ok(vec![path])
        }
        Format::Csv => {
            let stats = out_dir.join(format!("{}.csv", report.experiment));
            let mut w = csv::Writer::from_path(&stats)?;
            w.write_record(CSV_COLUMNS)?;
            for r in &report.rows {
                w.write_record([
                    report.experiment.clone(),
                    fmt_f64(r.t),
                    r.quantity.clone(),
                    r.component.map_or(String::new(), |c| c.to_string()),
                    fmt_f64(r.value),
                    fmt_f64(r.se),
                    fmt_f64(r.reference),
                ])?;
            }
            w.flush()?;
            let crit = out_dir.join(format!("{}_criteria.csv", report.experiment));
            let mut w = csv::Writer::from_path(&crit)?;
            w.write_record(CRITERIA_COLUMNS)?;
            for c in &report.criteria {
                w.write_record([
                    c.name.clone(),
                    c.passed.to_string(),
                    fmt_f64(c.value),
                    fmt_f64(c.threshold),
                    c.detail.clone(),
                ])?;
            }
            w.flush()?;
            Ok(vec![stats, crit])
        }
    }
}

pub fn read_json_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Times and test functions of the Monte Carlo oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub laplace_times: Vec<f64>,
    pub test_functions: Vec<DVector<f64>>,
    pub mean_times: Vec<f64>,
    pub martingale_times: Vec<f64>,
    /// Step of the log-Laplace flow oracle.
    pub flow_dt: f64,
}

fn union_times(lists: &[&[f64]]) -> Vec<f64> {
    let mut all: Vec<f64> = lists.iter().flat_map(|l| l.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

fn vec_str(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("({})", parts.join(","))
}

/// Monte Carlo against the analytic oracles: Laplace functional vs the
/// log-Laplace flow, mean state vs `x0^T M(T)`, and mean of `W_T` vs
/// `<phi, x0>`.
pub fn oracle_experiment(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    n_paths: usize,
    spec: &OracleSpec,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let times = union_times(&[&spec.laplace_times, &spec.mean_times, &spec.martingale_times]);
    let ens = simulate_ensemble(mech, x0, config, n_paths, &times)?;
    let k_of = |t: f64| times.iter().position(|&s| s == t).expect("time in union");
    let mut rep = ExperimentReport::new("oracle", config.seed, n_paths);
    rep.tolerances.insert("sigma".into(), SIGMA);
    rep.tolerances.insert("flow_dt".into(), spec.flow_dt);
    rep.tolerances.insert("dt".into(), config.dt);
    for f in &spec.test_functions {
        for &t in &spec.laplace_times {
            let exact = (-x0.dot(solve_v(mech, f, t, spec.flow_dt)?.terminal())).exp();
            let e = ens.laplace(k_of(t), f);
            rep.rows.push(StatRow::estimate(t, &format!("laplace f={}", vec_str(f)), None, e, exact));
            rep.push(Criterion::within_se(format!("laplace f={} T={t}", vec_str(f)), e, exact));
        }
    }
    for &t in &spec.mean_times {
        let m = crate::spectral::mean_matrix(mech.b(), t).m;
        let exact = m.tr_mul(x0);
        for i in 0..mech.dim() {
            let e = ens.estimate(k_of(t), |x| x[i]);
            rep.rows.push(StatRow::estimate(t, "mean_x", Some(i), e, exact[i]));
            rep.push(Criterion::within_se(format!("mean X_{i} T={t}"), e, exact[i]));
        }
    }
    let w0 = spectral.phi.dot(x0);
    for &t in &spec.martingale_times {
        let w = ens.martingale(k_of(t), spectral);
        let e = Estimate::from_samples(&w);
        rep.rows.push(StatRow::estimate(t, "mean_w", None, e, w0));
        rep.push(Criterion::within_se(format!("martingale T={t}"), e, w0));
    }
    for (k, &t) in times.iter().enumerate() {
        let alive = ens.at(k).filter(|x| x.sum() > 0.0).count();
        rep.rows.push(StatRow::new(t, "survival_fraction", None, alive as f64 / n_paths as f64));
    }
    rep.rows.push(StatRow::new(f64::NAN, "clamps", None, ens.clamps.iter().sum::<usize>() as f64));
    rep.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rep)
}

/// Thresholds of the strong-law experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SllnThresholds {
    /// Upper bound on the median direction error at the last time.
    pub final_median: f64,
    /// Upper bound on `|median ratio - 1|` at the last time.
    pub ratio: f64,
}

impl Default for SllnThresholds {
    fn default() -> Self {
        Self {
            final_median: 0.05,
            ratio: 0.05,
        }
    }
}

/// Strong law: `X_T / <1, X_T>` approaches `phi_hat / <1, phi_hat>` on
/// survival and `e^{-lambda1 T} X_T(k) / (W_T phi_hat(k))` approaches 1.
pub fn slln_experiment(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    n_paths: usize,
    t_list: &[f64],
    thresholds: &SllnThresholds,
) -> Result<ExperimentReport> {
    spectral.require_supercritical()?;
    if !mech.check_xlogx()?.holds {
        return Err(Error::XlogxFails);
    }
    let start = Instant::now();
    let mut rep = ExperimentReport::new("slln", config.seed, n_paths);
    rep.tolerances.insert("final_median".into(), thresholds.final_median);
    rep.tolerances.insert("ratio".into(), thresholds.ratio);
    rep.tolerances.insert("survival_threshold".into(), SURVIVAL_THRESHOLD);
    if t_list.is_empty() {
        rep.runtime_secs = start.elapsed().as_secs_f64();
        return Ok(rep);
    }
    let ens = simulate_ensemble(mech, x0, config, n_paths, t_list)?;
    let d = mech.dim();
    let mut medians = Vec::with_capacity(t_list.len());
    let mut last_ratio_dev = 0.0;
    for (k, &t) in t_list.iter().enumerate() {
        let survivors: Vec<&DVector<f64>> = ens.at(k).filter(|x| x.sum() > SURVIVAL_THRESHOLD).collect();
        let derr: Vec<f64> = survivors.iter().map(|x| direction_error(x, spectral)).collect();
        let q = Quantiles::of(&derr);
        for (p, v) in q.levels.iter().zip(&q.values) {
            rep.rows.push(StatRow::new(t, &format!("direction_error_q{p}"), None, *v));
        }
        rep.rows.push(StatRow::new(
            t,
            "survival_fraction",
            None,
            survivors.len() as f64 / n_paths as f64,
        ));
        medians.push(q.median());
        let mut dev: f64 = 0.0;
        for i in 0..d {
            let ratios: Vec<f64> = survivors
                .iter()
                .map(|x| {
                    let w = spectral.martingale(t, x);
                    (-spectral.lambda1 * t).exp() * x[i] / (w * spectral.phi_hat[i])
                })
                .collect();
            let med = Quantiles::of(&ratios).median();
            rep.rows.push(StatRow::new(t, "ratio_median", Some(i), med));
            dev = dev.max((med - 1.0).abs());
        }
        last_ratio_dev = dev;
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    rep.push(Criterion::new(
        "median direction error non-increasing",
        monotone,
        f64::NAN,
        f64::NAN,
        format!("medians {medians:?} at T = {t_list:?}"),
    ));
    let last = *medians.last().unwrap();
    rep.push(Criterion::new(
        "final median direction error",
        last < thresholds.final_median,
        last,
        thresholds.final_median,
        format!("T = {}", t_list.last().unwrap()),
    ));
    rep.push(Criterion::new(
        "ratio medians near 1",
        last_ratio_dev < thresholds.ratio,
        last_ratio_dev,
        thresholds.ratio,
        "max over types of |median ratio - 1| at the last time",
    ));
    rep.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rep)
}

/// Thresholds of the x log x experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XlogxThresholds {
    /// Holding side: `P(W_T > holds_level W_0 | survival) > holds_probability`.
    pub holds_level: f64,
    pub holds_probability: f64,
    /// Holding side: lower bound for the survivors' median of `W_T / W_0`
    /// at the last time (from the pilot baseline).
    pub survivors_median_floor: f64,
    /// Failing side: `fraction{W_T < fails_level W_0} >= fails_fraction` at
    /// the last time.
    pub fails_level: f64,
    pub fails_fraction: f64,
}

impl Default for XlogxThresholds {
    fn default() -> Self {
        Self {
            holds_level: 0.05,
            holds_probability: 0.5,
            survivors_median_floor: 0.0,
            fails_level: 0.01,
            fails_fraction: 0.9,
        }
    }
}

/// Dichotomy for `W_infinity`: a mechanism satisfying the x log x condition
/// against one that differs only in the jump tails and violates it.
pub fn xlogx_experiment(
    holds: &BranchingMechanism,
    fails: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    n_paths: usize,
    t_list: &[f64],
    thresholds: &XlogxThresholds,
) -> Result<ExperimentReport> {
    spectral.require_supercritical()?;
    if holds.b() != fails.b() || holds.c() != fails.c() {
        return Err(Error::InvalidArgument(
            "the paired mechanisms must share B and c".into(),
        ));
    }
    let start = Instant::now();
    let mut rep = ExperimentReport::new("xlogx", config.seed, n_paths);
    rep.tolerances.insert("sigma".into(), SIGMA);
    rep.tolerances.insert("holds_level".into(), thresholds.holds_level);
    rep.tolerances.insert("holds_probability".into(), thresholds.holds_probability);
    rep.tolerances.insert("survivors_median_floor".into(), thresholds.survivors_median_floor);
    rep.tolerances.insert("fails_level".into(), thresholds.fails_level);
    rep.tolerances.insert("fails_fraction".into(), thresholds.fails_fraction);
    if t_list.is_empty() {
        rep.runtime_secs = start.elapsed().as_secs_f64();
        return Ok(rep);
    }
    let w0 = spectral.phi.dot(x0);
    let holds_verdict = holds.check_xlogx()?.holds;
    let fails_verdict = fails.check_xlogx()?.holds;
    for (label, mech, verdict, seed_tag) in [
        ("holds", holds, holds_verdict, 1u64),
        ("fails", fails, fails_verdict, 2u64),
    ] {
        let cfg = SimConfig {
            seed: derive_seed(config.seed, seed_tag),
            ..config.clone()
        };
        let ens = simulate_ensemble(mech, x0, &cfg, n_paths, t_list)?;
        rep.rows.push(StatRow::new(f64::NAN, &format!("{label} xlogx_holds"), None, f64::from(u8::from(verdict))));
        let mut low_fractions = Vec::new();
        let mut last = None;
        for (k, &t) in t_list.iter().enumerate() {
            let w: Vec<f64> = ens.martingale(k, spectral).iter().map(|w| w / w0).collect();
            let e = Estimate::from_samples(&w);
            rep.rows.push(StatRow::estimate(t, &format!("{label} mean_w_ratio"), None, e, 1.0));
            rep.push(Criterion::within_se(format!("{label}: mean W_T = W_0 at T={t}"), e, 1.0));
            let q = Quantiles::of(&w);
            for (p, v) in q.levels.iter().zip(&q.values) {
                rep.rows.push(StatRow::new(t, &format!("{label} w_ratio_q{p}"), None, *v));
            }
            let surv: Vec<f64> = ens
                .at(k)
                .zip(&w)
                .filter(|(x, _)| x.sum() > SURVIVAL_THRESHOLD)
                .map(|(_, &w)| w)
                .collect();
            let surv_frac = surv.len() as f64 / n_paths as f64;
            let surv_median = Quantiles::of(&surv).median();
            let above = surv.iter().filter(|&&w| w > thresholds.holds_level).count() as f64
                / surv.len().max(1) as f64;
            let low = w.iter().filter(|&&w| w < thresholds.fails_level).count() as f64 / n_paths as f64;
            rep.rows.push(StatRow::new(t, &format!("{label} survival_fraction"), None, surv_frac));
            rep.rows.push(StatRow::new(t, &format!("{label} survivors_median_w_ratio"), None, surv_median));
            rep.rows.push(StatRow::new(t, &format!("{label} survivors_above_holds_level"), None, above));
            rep.rows.push(StatRow::new(t, &format!("{label} fraction_below_fails_level"), None, low));
            low_fractions.push(low);
            last = Some((t, surv_median, above, low));
        }
        let (t, surv_median, above, low) = last.unwrap();
        if label == "holds" {
            rep.push(Criterion::new(
                format!("holds: P(W_T > {} W_0 | survival) > {} at T={t}", thresholds.holds_level, thresholds.holds_probability),
                above > thresholds.holds_probability,
                above,
                thresholds.holds_probability,
                "",
            ));
            rep.push(Criterion::new(
                format!("holds: survivors' median W_T/W_0 >= pilot floor at T={t}"),
                surv_median >= thresholds.survivors_median_floor,
                surv_median,
                thresholds.survivors_median_floor,
                "",
            ));
        } else {
            let monotone = low_fractions.windows(2).all(|p| p[1] >= p[0]);
            rep.push(Criterion::new(
                format!("fails: fraction{{W_T < {} W_0}} increasing in T", thresholds.fails_level),
                monotone,
                f64::NAN,
                f64::NAN,
                format!("{low_fractions:?}"),
            ));
            rep.push(Criterion::new(
                format!("fails: fraction{{W_T < {} W_0}} >= {} at T={t}", thresholds.fails_level, thresholds.fails_fraction),
                low >= thresholds.fails_fraction,
                low,
                thresholds.fails_fraction,
                "",
            ));
        }
    }
    rep.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rep)
}

/// Inputs of the spine consistency triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SpineSpec {
    pub f: DVector<f64>,
    pub t: f64,
    /// Excursion masses to compare; the discrepancy must decrease along the
    /// list.
    pub deltas: Vec<f64>,
    pub max_immigrants: usize,
    pub flow_dt: f64,
}

/// Three estimates of `E~_x e^{-<f, X_t>}`: the analytic `theta` formula,
/// importance weighting of original paths, and the spine construction.
pub fn spine_experiment(
    mech: &BranchingMechanism,
    spectral: &SpectralData,
    x0: &DVector<f64>,
    config: &SimConfig,
    n_paths: usize,
    spec: &SpineSpec,
) -> Result<ExperimentReport> {
    spectral.require_supercritical()?;
    let start = Instant::now();
    let t = spec.t;
    let mut rep = ExperimentReport::new("spine", config.seed, n_paths);
    rep.tolerances.insert("sigma".into(), SIGMA);
    rep.tolerances.insert("flow_dt".into(), spec.flow_dt);
    let analytic = tilted_laplace(mech, spectral, x0, &spec.f, t, spec.flow_dt)?;
    rep.rows.push(StatRow::new(t, "tilted_laplace_analytic", None, analytic));
    let cfg = SimConfig {
        horizon: t,
        seed: derive_seed(config.seed, 1),
        ..config.clone()
    };
    let weighted = weighted_tilt_estimate(mech, spectral, x0, &spec.f, t, n_paths, &cfg)?;
    rep.rows.push(StatRow::estimate(t, "tilted_laplace_weighted", None, weighted, analytic));
    rep.push(Criterion::within_se("weighted vs analytic", weighted, analytic));
    let mut discrepancies = Vec::new();
    for (k, &delta) in spec.deltas.iter().enumerate() {
        let gcfg = SimConfig {
            seed: derive_seed(config.seed, 100 + k as u64),
            ..cfg.clone()
        };
        let sampler = GammaSampler::new(
            mech,
            spectral,
            &gcfg,
            &SpineConfig {
                delta,
                max_immigrants: spec.max_immigrants,
            },
        )?;
        let (n, _) = gcfg.steps();
        let gcfg = SimConfig {
            grid_stride: n,
            ..gcfg
        };
        let values = map_paths(n_paths, gcfg.seed, |_, rng| {
            let g = sampler.simulate(x0, &gcfg, rng)?;
            Ok((-spec.f.dot(g.gamma.last().unwrap())).exp())
        })?;
        let gamma = Estimate::from_samples(&values);
        rep.rows.push(StatRow::estimate(t, &format!("tilted_laplace_gamma delta={delta}"), None, gamma, analytic));
        rep.push(Criterion::within_se(format!("gamma(delta={delta}) vs analytic"), gamma, analytic));
        let combined = Estimate {
            mean: gamma.mean - weighted.mean,
            se: (gamma.se * gamma.se + weighted.se * weighted.se).sqrt(),
            n: n_paths,
        };
        rep.push(Criterion::within_se(format!("gamma(delta={delta}) vs weighted"), combined, 0.0));
        discrepancies.push((gamma.mean - analytic).abs());
        rep.rows.push(StatRow::new(t, &format!("gamma_discrepancy delta={delta}"), None, (gamma.mean - analytic).abs()));
    }
    if discrepancies.len() > 1 {
        rep.push(Criterion::new(
            "discrepancy decreases with delta",
            discrepancies.windows(2).all(|w| w[1] <= w[0]),
            f64::NAN,
            f64::NAN,
            format!("|gamma - analytic| = {discrepancies:?} for delta = {:?}", spec.deltas),
        ));
    }
    rep.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rep)
}
