//! Batch experiment driver behind the `zomd` binary.
//!
//! Experiments are described by a `key = value` file (`#` starts a comment);
//! `--set key=value` and the dedicated flags override file values.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::environments::{
    load_loss_script, BiasPolicy, EnvironmentSpec, Family, FunctionClassConstants, History, LossFn, LossScript,
    NoiseModel, StochasticNoise,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate, sample_sphere, QueryPoints, ScalarMoments, SmoothingConfig, VectorMoments};
use crate::geometry::{GeometrySpec, Point};
use crate::regret::{fit_rate, monte_carlo_regret, ExperimentSpec, RegretReport};
use crate::rng::{derive_seed, stream, SALT_SOLVER};
use crate::solver::{Mode, SolverConfig, StepSchedule};
use crate::tuning::{
    bound_m2, choose_mu, choose_n, delta_max, sigma_budget, table_order, tune, two_point_preconditions, Regime,
    TuningInput,
};

pub const CSV_HEADER: &str = "run_id,seed,family,geometry,mode,n,N,epsilon,mu,delta,replicas,regret_mean,regret_stderr,q05,q50,q95,bound,bound_satisfied,wall_ms";
pub const VERIFY_HEADER: &str = "check,m,q,samples,value,reference,pass";

#[derive(Debug, Parser)]
#[command(name = "zomd", version, about = "Zero-order online mirror descent experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the tuned parameters for a target accuracy.
    Tune(CommonArgs),
    /// Run Monte-Carlo replicas of one configuration.
    Run(CommonArgs),
    /// Run a grid of horizons or accuracies.
    Sweep(CommonArgs),
    /// Check estimator unbiasedness and second-moment bounds.
    VerifyEstimator(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for replicas.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expert loss matrix (one step per line).
    #[arg(long)]
    pub losses: Option<PathBuf>,
    /// Override a configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Record wall-clock times (makes output nondeterministic).
    #[arg(long)]
    pub timing: bool,
}

const KNOWN_KEYS: &[&str] = &[
    "family", "script", "losses", "scale", "gap", "period", "center", "weight", "softness", "offset", "curvature",
    "geometry", "n", "radius", "mu0", "mode", "regime", "noise", "noise_sd", "bias", "delta", "epsilon", "N", "mu",
    "alpha", "M", "B", "M2", "L2", "gamma2", "R2", "replicas", "seed", "jobs", "sweep", "values", "samples", "m",
    "point", "q",
];

/// Parsed experiment configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
    base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: idx + 1, message: format!("expected `key = value`, got {line:?}") })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::InvalidConfig(format!("unknown key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key).map_or(Ok(default), |v| parse_f64(key, v))
    }

    fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|v| parse_f64(key, v)).transpose()
    }

    fn usize_opt(&self, key: &str) -> Result<Option<usize>> {
        self.get(key).map(|v| parse_usize(key, v)).transpose()
    }

    fn require_usize(&self, key: &str) -> Result<usize> {
        self.usize_opt(key)?.ok_or_else(|| Error::InvalidConfig(format!("missing key {key:?}")))
    }

    fn vector(&self, key: &str, n: usize, default: f64) -> Result<Vec<f64>> {
        let Some(v) = self.get(key) else { return Ok(vec![default; n]) };
        let items = v.split(',').map(|s| parse_f64(key, s.trim())).collect::<Result<Vec<f64>>>()?;
        match items.len() {
            1 => Ok(vec![items[0]; n]),
            len if len == n => Ok(items),
            len => Err(Error::InvalidConfig(format!("{key} has {len} entries, expected 1 or {n}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|p| match &self.base_dir {
            Some(dir) if Path::new(p).is_relative() => dir.join(p),
            _ => PathBuf::from(p),
        })
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let parsed = match v {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => v.parse::<f64>(),
    };
    match parsed {
        Ok(x) if !x.is_nan() => Ok(x),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a number, got {v:?}"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    if let Ok(n) = v.parse::<usize>() {
        return Ok(n);
    }
    // allow 1e5-style horizons when they are exact integers
    match v.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 1e18 => Ok(x as usize),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a nonnegative integer, got {v:?}"))),
    }
}

/// Merges the config file, flags and `--set` overrides.
pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = args.jobs {
        cfg.set("jobs", &jobs.to_string())?;
    }
    if let Some(path) = &args.losses {
        cfg.set("losses", &path.display().to_string())?;
        cfg.set("script", "file")?;
    }
    Ok(cfg)
}

fn geometry_from(cfg: &ExperimentConfig, mu0: f64) -> Result<GeometrySpec> {
    let n = cfg.require_usize("n")?;
    let geom = match cfg.get("geometry").unwrap_or("simplex") {
        "simplex" => GeometrySpec::simplex(n)?,
        "ball" | "euclidean-ball" => GeometrySpec::euclidean_ball(n, cfg.f64_or("radius", 1.0)?)?,
        "l1-ball" => GeometrySpec::l1_ball(n)?,
        other => return Err(Error::InvalidConfig(format!("unknown geometry {other:?}"))),
    };
    geom.with_mu0(mu0)
}

fn noise_from(cfg: &ExperimentConfig, delta: f64) -> Result<NoiseModel> {
    let sd = cfg.f64_or("noise_sd", 1.0)?;
    let stochastic = match cfg.get("noise").unwrap_or("none") {
        "none" => StochasticNoise::None,
        "additive" | "additive-gaussian" => StochasticNoise::AdditiveGaussian { sd },
        "multiplicative" => StochasticNoise::Multiplicative { sd },
        other => return Err(Error::InvalidConfig(format!("unknown noise {other:?}"))),
    };
    let policy = match cfg.get("bias").unwrap_or(if delta > 0.0 { "constant-sign" } else { "zero" }) {
        "zero" => BiasPolicy::Zero,
        "constant-sign" => BiasPolicy::ConstantSign,
        "worst-direction" => BiasPolicy::WorstDirection,
        other => return Err(Error::InvalidConfig(format!("unknown bias policy {other:?}"))),
    };
    let noise = NoiseModel { stochastic, delta, policy };
    noise.validate()?;
    Ok(noise)
}

fn family_from(cfg: &ExperimentConfig, n: usize) -> Result<Family> {
    let family = match cfg.get("family").unwrap_or("expert-linear") {
        "expert-linear" => {
            let scale = cfg.f64_or("scale", 1.0)?;
            let script = match cfg.get("script").unwrap_or("iid") {
                "iid" => LossScript::IidUniform,
                "drifting" => LossScript::DriftingBest {
                    gap: cfg.f64_or("gap", 0.2)?,
                    period: cfg.usize_opt("period")?.unwrap_or(100),
                },
                "file" => {
                    let path = cfg
                        .path("losses")
                        .ok_or_else(|| Error::InvalidConfig("script = file needs a losses path".into()))?;
                    LossScript::Scripted(Arc::new(load_loss_script(&path)?))
                }
                other => return Err(Error::InvalidConfig(format!("unknown loss script {other:?}"))),
            };
            Family::ExpertLinear { scale, script }
        }
        "adaptive-linear" => Family::AdaptiveLinear { scale: cfg.f64_or("scale", 1.0)? },
        "fixed-convex" => Family::FixedConvex {
            center: cfg.vector("center", n, 0.0)?,
            weight: cfg.f64_or("weight", 1.0)?,
            softness: cfg.f64_or("softness", 1.0)?,
            offset: cfg.f64_or("offset", 0.0)?,
        },
        "fixed-quadratic" => Family::FixedQuadratic {
            center: cfg.vector("center", n, 0.0)?,
            curvature: cfg.vector("curvature", n, 1.0)?,
        },
        other => return Err(Error::InvalidConfig(format!("unknown family {other:?}"))),
    };
    Ok(family)
}

/// Class constants from the environment, overridden by any declared `B`, `M2`, `L2`, `gamma2`.
fn declared_constants(cfg: &ExperimentConfig, env: Option<&EnvironmentSpec>) -> Result<FunctionClassConstants> {
    let mut c = match env {
        Some(e) => e.constants(),
        None => FunctionClassConstants {
            m2: f64::INFINITY,
            mr: f64::INFINITY,
            r: 2.0,
            l2: f64::INFINITY,
            gamma2: 0.0,
            b: f64::INFINITY,
        },
    };
    if let Some(v) = cfg.f64_opt("B")? {
        c.b = v;
    }
    if let Some(v) = cfg.f64_opt("M2")? {
        c.m2 = v;
        c.mr = v;
        c.r = 2.0;
    }
    if let Some(v) = cfg.f64_opt("L2")? {
        c.l2 = v;
    }
    if let Some(v) = cfg.f64_opt("gamma2")? {
        c.gamma2 = v;
    }
    c.validate()?;
    Ok(c)
}

fn regime_from(cfg: &ExperimentConfig) -> Result<Regime> {
    Regime::parse(cfg.get("regime").unwrap_or("convex"))
}

fn mode_from(cfg: &ExperimentConfig) -> Result<Mode> {
    Mode::parse(cfg.get("mode").unwrap_or("first-order"))
}

/// One resolved experiment cell.
#[derive(Debug, Clone)]
pub struct Cell {
    pub experiment: ExperimentSpec,
    pub epsilon: Option<f64>,
    pub mu: Option<f64>,
    pub delta: f64,
    pub replicas: usize,
}

/// Turns a configuration into a runnable cell: geometry, environment, tuned
/// parameters, step schedule and the regret bound to test.
pub fn resolve_cell(cfg: &ExperimentConfig) -> Result<Cell> {
    let mode = mode_from(cfg)?;
    let regime = regime_from(cfg)?;
    let epsilon = cfg.f64_opt("epsilon")?;
    let horizon = cfg.usize_opt("N")?;
    let replicas = cfg.usize_opt("replicas")?.unwrap_or(10);
    if replicas < 2 {
        return Err(Error::InvalidConfig(format!("replicas must be at least 2, got {replicas}")));
    }
    if epsilon.is_none() && horizon.is_none() {
        return Err(Error::InvalidConfig("either epsilon or N is required".into()));
    }
    // provisional geometry and environment: the margin is fixed once μ is known
    let declared_mu0 = cfg.f64_opt("mu0")?;
    let probe_geom = geometry_from(cfg, declared_mu0.unwrap_or(0.0))?;
    let n = probe_geom.n();
    let family = family_from(cfg, n)?;
    let r2 = cfg.f64_or("R2", probe_geom.r2())?;
    let delta_key = cfg.get("delta").unwrap_or("0");
    let diameter = probe_geom.diameter();

    match mode {
        Mode::FirstOrder => {
            if cfg.has("mu") {
                return Err(Error::ModeMismatch("mu is meaningless in first-order mode".into()));
            }
            let delta = if delta_key == "max" {
                return Err(Error::InvalidConfig("delta = max needs a bandit mode".into()));
            } else {
                parse_f64("delta", delta_key)?
            };
            let env = EnvironmentSpec::new(family, probe_geom.clone(), noise_from(cfg, delta)?)?;
            let constants = declared_constants(cfg, Some(&env))?;
            let m_sq = match cfg.f64_opt("M")? {
                Some(m) => m * m,
                None => env.gradient_moment_bound(),
            };
            let sigma = delta * diameter;
            let inp = TuningInput {
                epsilon: epsilon.unwrap_or(1.0),
                n,
                q: probe_geom.q(),
                m: QueryPoints::One,
                r2,
                constants,
                regime,
                mu0: None,
            };
            let horizon = match (horizon, epsilon) {
                (Some(h), _) => h,
                (None, Some(_)) => choose_n(&inp, m_sq)?,
                (None, None) => unreachable!(),
            };
            let (schedule, bound) = schedule_and_bound(cfg, &inp, m_sq, horizon, sigma)?;
            let solver = SolverConfig::new(probe_geom, schedule, horizon, mode, None)?;
            Ok(Cell {
                experiment: ExperimentSpec { env, solver, bound },
                epsilon,
                mu: None,
                delta,
                replicas,
            })
        }
        Mode::Bandit(m) => {
            let provisional = EnvironmentSpec::new(family.clone(), probe_geom.clone(), NoiseModel::noiseless())?;
            let mut inp = TuningInput {
                epsilon: epsilon.unwrap_or(1.0),
                n,
                q: probe_geom.q(),
                m,
                r2,
                constants: declared_constants(cfg, Some(&provisional))?,
                regime,
                mu0: declared_mu0,
            };
            let mu = match cfg.f64_opt("mu")? {
                Some(mu) => mu,
                None if epsilon.is_some() => choose_mu(&inp)?,
                None => return Err(Error::InvalidConfig("bandit runs need mu or epsilon".into())),
            };
            let geom = probe_geom.with_mu0(declared_mu0.unwrap_or(mu))?;
            let delta = if delta_key == "max" {
                if epsilon.is_none() {
                    return Err(Error::InvalidConfig("delta = max needs epsilon".into()));
                }
                delta_max(&inp, mu)
            } else {
                parse_f64("delta", delta_key)?
            };
            let env = EnvironmentSpec::new(family, geom.clone(), noise_from(cfg, delta)?)?;
            // constants of the noisy readings (B grows with the bias and the noise)
            inp.constants = declared_constants(cfg, Some(&env))?;
            inp.mu0 = Some(geom.mu0());
            inp.validate()?;
            let m_sq = match cfg.f64_opt("M")? {
                Some(v) => v * v,
                None => bound_m2(&inp, mu, delta)?,
            };
            let horizon = match horizon {
                Some(h) => h,
                None => choose_n(&inp, m_sq)?,
            };
            let smoothing_error = (inp.constants.m2 * mu).min(0.5 * inp.constants.l2 * mu * mu);
            let sigma = sigma_budget(&inp, mu, delta);
            let (schedule, bound) = schedule_and_bound(cfg, &inp, m_sq, horizon, sigma + smoothing_error)?;
            let smoothing = SmoothingConfig::new(&geom, mu, m)?;
            let solver = SolverConfig::new(geom, schedule, horizon, mode, Some(smoothing))?;
            Ok(Cell {
                experiment: ExperimentSpec { env, solver, bound },
                epsilon,
                mu: Some(mu),
                delta,
                replicas,
            })
        }
    }
}

/// Step schedule (explicit `alpha` wins) and the expected-regret bound it implies.
fn schedule_and_bound(
    cfg: &ExperimentConfig,
    inp: &TuningInput,
    m_sq: f64,
    horizon: usize,
    extra: f64,
) -> Result<(StepSchedule, f64)> {
    let nf = horizon as f64;
    match inp.regime {
        Regime::Convex => {
            let schedule = match cfg.f64_opt("alpha")? {
                Some(alpha) => StepSchedule::Constant { alpha },
                None => StepSchedule::constant(inp.r(), m_sq.sqrt(), horizon)?,
            };
            let StepSchedule::Constant { alpha } = schedule else { unreachable!() };
            Ok((schedule, inp.r2 / (alpha * nf) + alpha * m_sq / 2.0 + extra))
        }
        Regime::StronglyConvex => {
            if cfg.has("alpha") {
                return Err(Error::InvalidConfig("alpha is fixed to 1/(gamma2 k) in the strongly convex regime".into()));
            }
            let gamma2 = inp.constants.gamma2;
            if !(gamma2 > 0.0) {
                return Err(Error::InvalidConfig("strongly convex regime needs gamma2 > 0".into()));
            }
            Ok((
                StepSchedule::StronglyConvex { gamma2 },
                m_sq * (1.0 + nf.ln()) / (2.0 * gamma2 * nf) + extra,
            ))
        }
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), fmt_num)
}

fn geometry_name(geom: &GeometrySpec) -> String {
    geom.domain().to_string()
}

/// CSV rows for one cell: one per replica, then the `:all` aggregate.
pub fn report_rows(cell_id: &str, cell: &Cell, report: &RegretReport, master_seed: u64, timing: bool) -> String {
    let spec = &cell.experiment;
    let prefix = |id: String, seed: u64| {
        format!(
            "{id},{seed},{},{},{},{},{},{},{},{}",
            spec.env.family.name(),
            geometry_name(&spec.solver.geom),
            spec.solver.mode.name(),
            spec.solver.geom.n(),
            spec.solver.horizon,
            fmt_opt(cell.epsilon),
            fmt_opt(cell.mu),
            fmt_num(cell.delta),
        )
    };
    let wall = |ms: f64| if timing { fmt_num(ms) } else { "0".to_string() };
    let mut out = String::new();
    for r in &report.replicas {
        let v = fmt_num(r.regret);
        let _ = writeln!(
            out,
            "{},1,{v},{},{v},{v},{v},{},{},{}",
            prefix(format!("{cell_id}:{}", r.index), r.seed),
            fmt_num(0.0),
            fmt_num(report.bound),
            r.regret <= report.bound,
            wall(r.wall_ms),
        );
    }
    let total_ms: f64 = report.replicas.iter().map(|r| r.wall_ms).sum();
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        prefix(format!("{cell_id}:all"), master_seed),
        report.replicas.len(),
        fmt_num(report.mean),
        fmt_num(report.stderr),
        fmt_num(report.q05),
        fmt_num(report.q50),
        fmt_num(report.q95),
        fmt_num(report.bound),
        report.bound_satisfied,
        wall(total_ms),
    );
    out
}

/// Output text and whether the command succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub text: String,
    pub success: bool,
}

fn seed_and_jobs(cfg: &ExperimentConfig) -> Result<(u64, usize)> {
    let seed = match cfg.get("seed") {
        Some(s) => s.parse::<u64>().map_err(|_| Error::InvalidConfig(format!("seed: expected u64, got {s:?}")))?,
        None => 0,
    };
    let jobs = cfg.usize_opt("jobs")?.unwrap_or(1).max(1);
    Ok((seed, jobs))
}

pub fn cmd_tune(cfg: &ExperimentConfig) -> Result<Outcome> {
    let epsilon = cfg.f64_opt("epsilon")?.ok_or_else(|| Error::InvalidConfig("tune needs epsilon".into()))?;
    let m = QueryPoints::from_count(cfg.usize_opt("m")?.unwrap_or(1))?;
    let regime = regime_from(cfg)?;
    let declared_mu0 = cfg.f64_opt("mu0")?;
    let (n, q, r2, env) = if cfg.has("geometry") || cfg.has("family") {
        let geom = geometry_from(cfg, declared_mu0.unwrap_or(0.0))?;
        let env = if cfg.has("family") {
            let delta = parse_f64("delta", cfg.get("delta").unwrap_or("0"))?;
            Some(EnvironmentSpec::new(family_from(cfg, geom.n())?, geom.clone(), noise_from(cfg, delta)?)?)
        } else {
            None
        };
        (geom.n(), geom.q(), cfg.f64_or("R2", geom.r2())?, env)
    } else {
        let n = cfg.require_usize("n")?;
        let q = cfg.f64_or("q", 2.0)?;
        let r2 = cfg.f64_opt("R2")?.ok_or_else(|| Error::InvalidConfig("tune needs R2 or a geometry".into()))?;
        (n, q, r2, None)
    };
    let inp = TuningInput {
        epsilon,
        n,
        q,
        m,
        r2,
        constants: declared_constants(cfg, env.as_ref())?,
        regime,
        mu0: declared_mu0,
    };
    let out = tune(&inp)?;
    let cell = table_order(&inp)?;
    let mut text = String::new();
    let _ = writeln!(text, "epsilon = {}", fmt_num(epsilon));
    let _ = writeln!(text, "m = {}", m.count());
    let _ = writeln!(text, "regime = {}", regime.name());
    let _ = writeln!(text, "mu = {}", fmt_num(out.mu));
    let _ = writeln!(text, "delta_max = {}", fmt_num(out.delta_max));
    let _ = writeln!(text, "M2_bound = {}", fmt_num(out.m2_bound));
    let _ = writeln!(text, "M2_bound_simplified = {}", out.simplified);
    let _ = writeln!(text, "sigma = {}", fmt_num(out.sigma_budget));
    match out.schedule {
        StepSchedule::Constant { alpha } => {
            let _ = writeln!(text, "alpha = {}", fmt_num(alpha));
        }
        StepSchedule::StronglyConvex { gamma2 } => {
            let _ = writeln!(text, "alpha = 1/({} k)", fmt_num(gamma2));
        }
    }
    let _ = writeln!(text, "N = {}", out.n_steps);
    let _ = writeln!(text, "cell = {cell}");
    Ok(Outcome { text, success: true })
}

pub fn cmd_run(cfg: &ExperimentConfig, timing: bool) -> Result<Outcome> {
    let (seed, jobs) = seed_and_jobs(cfg)?;
    let cell = resolve_cell(cfg)?;
    let report = monte_carlo_regret(&cell.experiment, cell.replicas, seed, jobs)?;
    let mut text = format!("{CSV_HEADER}\n");
    text.push_str(&report_rows("0", &cell, &report, seed, timing));
    Ok(Outcome { text, success: true })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, timing: bool) -> Result<Outcome> {
    let (seed, jobs) = seed_and_jobs(cfg)?;
    let axis = cfg.get("sweep").unwrap_or("N");
    if axis != "N" && axis != "epsilon" {
        return Err(Error::InvalidConfig(format!("sweep axis must be N or epsilon, got {axis:?}")));
    }
    let values: Vec<&str> = cfg
        .get("values")
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    // validate every cell before running any
    let mut cells = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = cfg.clone();
        c.set(axis, v)?;
        if axis == "epsilon" {
            c.entries.remove("N");
        }
        cells.push(resolve_cell(&c)?);
    }
    let mut text = format!("{CSV_HEADER}\n");
    let mut points = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let report = monte_carlo_regret(&cell.experiment, cell.replicas, seed, jobs)?;
        points.push((cell.experiment.solver.horizon as f64, report.mean));
        text.push_str(&report_rows(&i.to_string(), cell, &report, seed, timing));
    }
    if cells.len() >= 4 {
        match fit_rate(&points) {
            Ok(fit) => {
                let _ = writeln!(
                    text,
                    "# fit slope={} stderr={} points={} excluded={}",
                    fmt_num(fit.slope),
                    fmt_num(fit.stderr),
                    fit.used,
                    fit.excluded.len()
                );
            }
            Err(e) => {
                let _ = writeln!(text, "# fit unavailable: {e}");
            }
        }
    }
    Ok(Outcome { text, success: true })
}

/// Result of one estimator check.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCheck {
    pub name: &'static str,
    pub m: usize,
    pub q: f64,
    pub samples: usize,
    pub value: f64,
    pub reference: f64,
    pub pass: bool,
}

/// Samples the `m`-point estimator at `x` and compares its mean with `∇f(x)` (when the
/// smoothed gradient is known in closed form) and its second moment with the tuning bound.
pub fn verify_estimator(
    env_spec: &EnvironmentSpec,
    inp: &TuningInput,
    x: &Point,
    mu: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<EstimatorCheck>> {
    let geom = &env_spec.geom;
    let n = geom.n();
    let smoothing = SmoothingConfig::new(geom, mu, inp.m)?;
    let mut env = env_spec.build(seed);
    let mut rng = stream(derive_seed(seed, 0, SALT_SOLVER));
    let mut moments = VectorMoments::new(n);
    let mut second = ScalarMoments::default();
    let mut exact_grad: Option<Vec<f64>> = None;
    for k in 1..=samples {
        let f = env.reveal(k, &History { current: x, previous: None })?;
        if exact_grad.is_none() {
            // linear and quadratic losses have ∇f^μ = ∇f
            exact_grad = match f.as_ref() {
                LossFn::Linear(_) | LossFn::Quadratic { .. } if env_spec.family.is_fixed() => Some(f.gradient(x)),
                _ => None,
            };
        }
        let e = sample_sphere(&mut rng, n);
        let est = estimate(&mut env, k, x, &smoothing, &e)?;
        moments.push(est.g.coords());
        let norm = geom.dual_norm(&est.g);
        second.push(norm * norm);
    }
    let m = inp.m.count();
    let q = geom.q();
    let mut checks = Vec::new();
    if let Some(grad) = exact_grad {
        let diff: f64 = moments.mean().iter().zip(&grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let tol = 4.0 * moments.stderr_norm();
        checks.push(EstimatorCheck { name: "unbiased", m, q, samples, value: diff, reference: tol, pass: diff <= tol });
    }
    let delta = env_spec.noise.delta;
    let bound = bound_m2(inp, mu, delta)?;
    let name = match inp.m {
        QueryPoints::One => "second-moment",
        QueryPoints::Two if two_point_preconditions(inp, mu, delta) => "second-moment-simplified",
        QueryPoints::Two => "second-moment-general",
    };
    let reference = 1.1 * bound;
    checks.push(EstimatorCheck { name, m, q, samples, value: second.mean(), reference, pass: second.mean() <= reference });
    Ok(checks)
}

pub fn cmd_verify_estimator(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (seed, _) = seed_and_jobs(cfg)?;
    let samples = cfg.usize_opt("samples")?.unwrap_or(100_000);
    if samples < 2 {
        return Err(Error::InvalidConfig("samples must be at least 2".into()));
    }
    let mu = cfg.f64_opt("mu")?.ok_or_else(|| Error::InvalidConfig("verify-estimator needs mu".into()))?;
    let ms: Vec<QueryPoints> = match cfg.get("m").unwrap_or("both") {
        "both" => vec![QueryPoints::One, QueryPoints::Two],
        v => vec![QueryPoints::from_count(parse_usize("m", v)?)?],
    };
    let geom = geometry_from(cfg, cfg.f64_opt("mu0")?.unwrap_or(mu))?;
    let family = {
        let mut c = cfg.clone();
        if !c.has("family") {
            c.set("family", "fixed-quadratic")?;
        }
        family_from(&c, geom.n())?
    };
    let delta = parse_f64("delta", cfg.get("delta").unwrap_or("0"))?;
    let env = EnvironmentSpec::new(family, geom.clone(), noise_from(cfg, delta)?)?;
    let x = match cfg.get("point") {
        Some(_) => Point::new(cfg.vector("point", geom.n(), 0.0)?),
        None => geom.start_point(),
    };
    if !geom.contains(&x) {
        return Err(Error::InvalidPoint("verification point lies outside the feasible set".into()));
    }
    let mut text = format!("{VERIFY_HEADER}\n");
    let mut success = true;
    for (i, m) in ms.into_iter().enumerate() {
        let inp = TuningInput {
            epsilon: cfg.f64_or("epsilon", 1.0)?,
            n: geom.n(),
            q: geom.q(),
            m,
            r2: cfg.f64_or("R2", geom.r2())?,
            constants: declared_constants(cfg, Some(&env))?,
            regime: Regime::Convex,
            mu0: Some(geom.mu0()),
        };
        inp.validate()?;
        for c in verify_estimator(&env, &inp, &x, mu, samples, derive_seed(seed, i as u64, 0))? {
            success &= c.pass;
            let q = if c.q.is_infinite() { "inf".to_string() } else { fmt_num(c.q) };
            let _ = writeln!(
                text,
                "{},{},{q},{},{},{},{}",
                c.name,
                c.m,
                c.samples,
                fmt_num(c.value),
                fmt_num(c.reference),
                c.pass
            );
        }
    }
    Ok(Outcome { text, success })
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Tune(args) => cmd_tune(&resolve_config(args)?),
        Command::Run(args) => cmd_run(&resolve_config(args)?, args.timing),
        Command::Sweep(args) => cmd_sweep(&resolve_config(args)?, args.timing),
        Command::VerifyEstimator(args) => cmd_verify_estimator(&resolve_config(args)?),
    }
}

fn out_path(cli: &Cli) -> Option<&Path> {
    match &cli.command {
        Command::Tune(a) | Command::Run(a) | Command::Sweep(a) | Command::VerifyEstimator(a) => a.out.as_deref(),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            let written = match out_path(&cli) {
                Some(path) => std::fs::write(path, &outcome.text)
                    .map_err(|e| Error::Io(format!("writing {}: {e}", path.display()))),
                None => {
                    print!("{}", outcome.text);
                    Ok(())
                }
            };
            match written {
                Ok(()) if outcome.success => 0,
                Ok(()) => {
                    eprintln!("zomd: one or more checks failed");
                    1
                }
                Err(e) => {
                    eprintln!("zomd: {e}");
                    1
                }
            }
        }
        Err(e) => {
            eprintln!("zomd: {e}");
            1
        }
    }
}
