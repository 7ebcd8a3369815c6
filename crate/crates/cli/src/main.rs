//! `mcsbp` command-line interface.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcsbp::config::Config;
use mcsbp::harness::{
    self, emit_report, map_paths, Criterion, Estimate, ExperimentReport, OracleSpec, SllnThresholds,
    SpineSpec, StatRow, XlogxThresholds,
};
use mcsbp::laplace_flow::{solve_theta, solve_v};
use mcsbp::mechanism::validate;
use mcsbp::nalgebra::DVector;
use mcsbp::simulator::simulate_path;
use mcsbp::spectral::{check_decay, default_decay_grid, mean_matrix, perron, spectral_gap};
use serde_json::json;

/// Thread count override for the worker pool.
const THREADS_ENV: &str = "MCSBP_THREADS";

#[derive(Parser)]
#[command(name = "mcsbp", version, about = "Multi-type continuous-state branching processes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Mechanism and experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides `experiment.paths`.
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for harness::Format {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => harness::Format::Csv,
            Format::Json => harness::Format::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the mechanism and print the validation report.
    Validate,
    /// Perron data, class and spectral gap.
    Spectral,
    /// Log-Laplace flow `v` (and `theta` when supercritical).
    Laplace {
        #[arg(long, value_delimiter = ',')]
        f: Option<Vec<f64>>,
        /// Starting state for the Laplace functional.
        #[arg(long, value_delimiter = ',')]
        x: Option<Vec<f64>>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Simulate paths, write them as CSV and check the ensemble oracles.
    Simulate {
        /// Path CSV; defaults to `<out-dir>/paths.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Monte Carlo against the Laplace, mean and martingale oracles.
    Oracle,
    /// Direction and ratio convergence on survival.
    Slln,
    /// x log x dichotomy between the mechanism and its `[xlogx]` pair.
    Xlogx,
    /// Analytic, weighted and spine estimates of the tilted Laplace functional.
    Spine {
        #[arg(long, value_delimiter = ',')]
        x0: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        f: Option<Vec<f64>>,
        #[arg(long)]
        t: Option<f64>,
        /// Excursion masses; the discrepancy must decrease along the list.
        #[arg(long, value_delimiter = ',')]
        delta: Option<Vec<f64>>,
    },
}

struct Ctx {
    config: Config,
    common: Common,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.common.seed.unwrap_or(self.config.experiment.seed)
    }

    fn paths(&self) -> usize {
        self.common.paths.unwrap_or(self.config.experiment.paths)
    }

    fn sim_config(&self) -> mcsbp::simulator::SimConfig {
        mcsbp::simulator::SimConfig {
            seed: self.seed(),
            ..self.config.sim_config()
        }
    }

    fn vector(&self, v: &Option<Vec<f64>>, default: DVector<f64>) -> anyhow::Result<DVector<f64>> {
        match v {
            None => Ok(default),
            Some(v) if v.len() == self.config.dim() => Ok(DVector::from_column_slice(v)),
            Some(v) => bail!("vector has {} entries, expected {}", v.len(), self.config.dim()),
        }
    }

    fn finish(&self, report: ExperimentReport) -> anyhow::Result<bool> {
        let report = report.with_fingerprint(self.config.fingerprint());
        for c in &report.criteria {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        for p in emit_report(&report, self.common.format.into(), &self.common.out_dir)? {
            eprintln!("wrote {}", p.display());
        }
        Ok(report.passed)
    }
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn validate_cmd(ctx: &Ctx) -> anyhow::Result<bool> {
    let report = validate(&ctx.config.mechanism.parts()?);
    let value = serde_json::to_value(&report)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    write_json(&ctx.common.out_dir, "validate.json", &value)?;
    Ok(report.passed)
}

fn spectral_cmd(ctx: &Ctx) -> anyhow::Result<bool> {
    let mech = ctx.config.build_mechanism()?;
    let s = perron(mech.b())?;
    let bt = mech.b().transpose();
    let right = (&bt * &s.phi - &s.phi * s.lambda1).amax();
    let left = (s.phi_hat.transpose() * &bt - s.phi_hat.transpose() * s.lambda1).amax();
    let fit = check_decay(&s, mech.b(), &default_decay_grid());
    let mut rep = ExperimentReport::new("spectral", ctx.seed(), 0);
    rep.tolerances.insert("residual".into(), 1e-10);
    rep.tolerances.insert("normalization".into(), 1e-12);
    rep.push(Criterion::new("right eigen-residual", right <= 1e-10, right, 1e-10, ""));
    rep.push(Criterion::new("left eigen-residual", left <= 1e-10, left, 1e-10, ""));
    let n1 = (s.phi.sum() - 1.0).abs();
    let n2 = (s.phi.dot(&s.phi_hat) - 1.0).abs();
    rep.push(Criterion::new("<phi, 1> = 1", n1 <= 1e-12, n1, 1e-12, ""));
    rep.push(Criterion::new("<phi, phi_hat> = 1", n2 <= 1e-12, n2, 1e-12, ""));
    let value = json!({
        "lambda1": s.lambda1,
        "phi": s.phi.as_slice(),
        "phi_hat": s.phi_hat.as_slice(),
        "class": s.class,
        "spectral_gap": mcsbp::serde_ext::real_to_json(spectral_gap(&s, mech.b())),
        "fitted_decay_rate": mcsbp::serde_ext::real_to_json(fit.c2),
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    write_json(&ctx.common.out_dir, "spectral_data.json", &value)?;
    ctx.finish(rep)
}

fn laplace_cmd(
    ctx: &Ctx,
    f: &Option<Vec<f64>>,
    x: &Option<Vec<f64>>,
    t: Option<f64>,
    dt: Option<f64>,
) -> anyhow::Result<bool> {
    let mech = ctx.config.build_mechanism()?;
    let f = ctx.vector(f, ctx.config.f()?)?;
    let x = ctx.vector(x, ctx.config.x0()?)?;
    let t = t.unwrap_or(ctx.config.flow.t);
    let dt = dt.unwrap_or(ctx.config.flow.dt);
    let d = mech.dim();
    let spectral = perron(mech.b()).ok().filter(|s| s.is_supercritical());
    let (flow, theta) = match &spectral {
        Some(s) => {
            let th = solve_theta(&mech, s, &f, t, dt)?;
            (th.flow.clone(), Some(th.theta_values))
        }
        None => (solve_v(&mech, &f, t, dt)?, None),
    };
    std::fs::create_dir_all(&ctx.common.out_dir)?;
    let csv_path = ctx.common.out_dir.join("laplace.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("v_{i}")));
    if theta.is_some() {
        header.extend((1..=d).map(|i| format!("theta_{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for (k, t) in flow.t_grid.iter().enumerate() {
        let mut row = vec![format!("{t:?}")];
        row.extend(flow.v_values[k].iter().map(|v| format!("{v:?}")));
        if let Some(th) = &theta {
            row.extend(th[k].iter().map(|v| format!("{v:?}")));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    eprintln!("wrote {}", csv_path.display());
    let v = flow.terminal();
    let laplace = (-x.dot(v)).exp();
    let finite = v.iter().all(|v| v.is_finite() && *v >= 0.0);
    let value = json!({
        "t": t,
        "dt": flow.step_size,
        "f": f.as_slice(),
        "x": x.as_slice(),
        "v": v.as_slice(),
        "theta": theta.as_ref().map(|th| th.last().unwrap().as_slice().to_vec()),
        "laplace_functional": laplace,
        "clipped": flow.clipped,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    write_json(&ctx.common.out_dir, "laplace.json", &value)?;
    Ok(finite)
}

fn simulate_cmd(ctx: &Ctx, csv: &Option<PathBuf>) -> anyhow::Result<bool> {
    let start = Instant::now();
    let mech = ctx.config.build_mechanism()?;
    let spectral = perron(mech.b())?;
    let x0 = ctx.config.x0()?;
    let f = ctx.config.f()?;
    let config = ctx.sim_config();
    let n = ctx.paths();
    if n < 2 {
        bail!("simulate needs at least 2 paths");
    }
    let paths = map_paths(n, config.seed, |_, rng| simulate_path(&mech, &spectral, &x0, &config, rng))?;
    let csv_path = csv.clone().unwrap_or_else(|| ctx.common.out_dir.join("paths.csv"));
    if let Some(dir) = csv_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&csv_path).context("creating path CSV")?);
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((1..=mech.dim()).map(|i| format!("X_{i}")));
    header.push("W".into());
    writeln!(w, "{}", header.join(","))?;
    for (id, p) in paths.iter().enumerate() {
        for (k, t) in p.t_grid.iter().enumerate() {
            let mut row = vec![id.to_string(), format!("{t:?}")];
            row.extend(p.x[k].iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", p.w[k]));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    eprintln!("wrote {}", csv_path.display());

    let t = *paths[0].t_grid.last().unwrap();
    let last: Vec<&DVector<f64>> = paths.iter().map(|p| p.x.last().unwrap()).collect();
    let mut rep = ExperimentReport::new("simulate", config.seed, n);
    rep.tolerances.insert("sigma".into(), harness::SIGMA);
    let exact = mean_matrix(mech.b(), t).m.tr_mul(&x0);
    for i in 0..mech.dim() {
        let e = Estimate::from_samples(&last.iter().map(|x| x[i]).collect::<Vec<_>>());
        rep.rows.push(StatRow::estimate(t, "mean_x", Some(i), e, exact[i]));
        rep.push(Criterion::within_se(format!("mean X_{i} T={t}"), e, exact[i]));
    }
    let w0 = spectral.phi.dot(&x0);
    let we = Estimate::from_samples(&paths.iter().map(|p| *p.w.last().unwrap()).collect::<Vec<_>>());
    rep.rows.push(StatRow::estimate(t, "mean_w", None, we, w0));
    rep.push(Criterion::within_se(format!("martingale T={t}"), we, w0));
    let lap = (-x0.dot(solve_v(&mech, &f, t, ctx.config.flow.dt)?.terminal())).exp();
    let le = Estimate::from_samples(&last.iter().map(|x| (-f.dot(x)).exp()).collect::<Vec<_>>());
    rep.rows.push(StatRow::estimate(t, "laplace", None, le, lap));
    rep.push(Criterion::within_se(format!("laplace T={t}"), le, lap));
    let extinct = paths.iter().filter(|p| p.extinction_time.is_some()).count();
    rep.rows.push(StatRow::new(t, "extinction_fraction", None, extinct as f64 / n as f64));
    rep.rows.push(StatRow::new(t, "clamps", None, paths.iter().map(|p| p.clamps).sum::<usize>() as f64));
    rep.runtime_secs = start.elapsed().as_secs_f64();
    ctx.finish(rep)
}

fn oracle_cmd(ctx: &Ctx) -> anyhow::Result<bool> {
    let mech = ctx.config.build_mechanism()?;
    let spectral = perron(mech.b())?;
    let t_list = ctx.config.experiment.t_list.clone();
    let spec = OracleSpec {
        laplace_times: t_list.clone(),
        test_functions: vec![ctx.config.f()?],
        mean_times: t_list.clone(),
        martingale_times: t_list,
        flow_dt: ctx.config.flow.dt,
    };
    let rep = harness::oracle_experiment(&mech, &spectral, &ctx.config.x0()?, &ctx.sim_config(), ctx.paths(), &spec)?;
    ctx.finish(rep)
}

fn slln_cmd(ctx: &Ctx) -> anyhow::Result<bool> {
    let mech = ctx.config.build_mechanism()?;
    let spectral = perron(mech.b())?;
    let rep = harness::slln_experiment(
        &mech,
        &spectral,
        &ctx.config.x0()?,
        &ctx.sim_config(),
        ctx.paths(),
        &ctx.config.experiment.t_list,
        &SllnThresholds::default(),
    )?;
    ctx.finish(rep)
}

fn xlogx_cmd(ctx: &Ctx) -> anyhow::Result<bool> {
    let holds = ctx.config.build_mechanism()?;
    let fails = ctx.config.build_xlogx_pair()?;
    let spectral = perron(holds.b())?;
    let thresholds = XlogxThresholds {
        survivors_median_floor: ctx.config.xlogx.as_ref().map_or(0.0, |x| x.survivors_median_floor),
        ..Default::default()
    };
    let rep = harness::xlogx_experiment(
        &holds,
        &fails,
        &spectral,
        &ctx.config.x0()?,
        &ctx.sim_config(),
        ctx.paths(),
        &ctx.config.experiment.t_list,
        &thresholds,
    )?;
    ctx.finish(rep)
}

fn spine_cmd(
    ctx: &Ctx,
    x0: &Option<Vec<f64>>,
    f: &Option<Vec<f64>>,
    t: Option<f64>,
    delta: &Option<Vec<f64>>,
) -> anyhow::Result<bool> {
    let mech = ctx.config.build_mechanism()?;
    let spectral = perron(mech.b())?;
    let spec = SpineSpec {
        f: ctx.vector(f, ctx.config.f()?)?,
        t: t.unwrap_or(ctx.config.flow.t),
        deltas: delta.clone().unwrap_or_else(|| vec![ctx.config.spine.delta]),
        max_immigrants: ctx.config.spine.max_immigrants,
        flow_dt: ctx.config.flow.dt,
    };
    let x0 = ctx.vector(x0, ctx.config.x0()?)?;
    let rep = harness::spine_experiment(&mech, &spectral, &x0, &ctx.sim_config(), ctx.paths(), &spec)?;
    ctx.finish(rep)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.common.threads {
        mcsbp::rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let path = cli.common.config.as_ref().context("--config is required")?;
    let config = Config::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let ctx = Ctx {
        config,
        common: cli.common,
    };
    match &cli.command {
        Command::Validate => validate_cmd(&ctx),
        Command::Spectral => spectral_cmd(&ctx),
        Command::Laplace { f, x, t, dt } => laplace_cmd(&ctx, f, x, *t, *dt),
        Command::Simulate { csv } => simulate_cmd(&ctx, csv),
        Command::Oracle => oracle_cmd(&ctx),
        Command::Slln => slln_cmd(&ctx),
        Command::Xlogx => xlogx_cmd(&ctx),
        Command::Spine { x0, f, t, delta } => spine_cmd(&ctx, x0, f, *t, delta),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
