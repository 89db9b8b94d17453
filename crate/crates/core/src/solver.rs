//! Online mirror descent with first-order or bandit feedback.
//!
//! Each step reveals `f_k`, charges `f_k(xᵏ)`, builds a dual vector `g_k`
//! (a noisy gradient or a one-/two-point estimate) and moves to
//! `x^{k+1} = Mirr_{xᵏ}(α_k g_k)`.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::environments::{History, LossAggregate, OnlineEnvironment};
use crate::error::{Error, Result};
use crate::estimators::{estimate, sample_sphere, QueryPoints, SmoothingConfig};
use crate::geometry::{GeometrySpec, Point};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α_k = 1/(γ₂ k)`.
    StronglyConvex { gamma2: f64 },
}

impl StepSchedule {
    /// `α = (R/M)·√(2/N)`.
    pub fn constant(r: f64, m: f64, horizon: usize) -> Result<Self> {
        if !(r > 0.0 && m > 0.0 && r.is_finite() && m.is_finite()) || horizon == 0 {
            return Err(Error::InvalidConfig(format!(
                "constant schedule needs finite R > 0, M > 0 and N >= 1 (R = {r}, M = {m}, N = {horizon})"
            )));
        }
        Ok(StepSchedule::Constant { alpha: r / m * (2.0 / horizon as f64).sqrt() })
    }

    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::StronglyConvex { gamma2 } => 1.0 / (gamma2 * k as f64),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepSchedule::Constant { .. } => "constant",
            StepSchedule::StronglyConvex { .. } => "strongly-convex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    FirstOrder,
    Bandit(QueryPoints),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::FirstOrder => "first-order",
            Mode::Bandit(QueryPoints::One) => "bandit-1pt",
            Mode::Bandit(QueryPoints::Two) => "bandit-2pt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first-order" => Ok(Mode::FirstOrder),
            "bandit-1pt" | "1" => Ok(Mode::Bandit(QueryPoints::One)),
            "bandit-2pt" | "2" => Ok(Mode::Bandit(QueryPoints::Two)),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// How much per-step detail a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trace {
    /// Exact losses and running sums only.
    Summary,
    /// Also every iterate, query batch and dual vector.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub geom: GeometrySpec,
    pub schedule: StepSchedule,
    pub horizon: usize,
    pub mode: Mode,
    pub smoothing: Option<SmoothingConfig>,
    pub trace: Trace,
}

impl SolverConfig {
    pub fn new(
        geom: GeometrySpec,
        schedule: StepSchedule,
        horizon: usize,
        mode: Mode,
        smoothing: Option<SmoothingConfig>,
    ) -> Result<Self> {
        let cfg = Self { geom, schedule, horizon, mode, smoothing, trace: Trace::Summary };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_trace(mut self, trace: Trace) -> Self {
        self.trace = trace;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon N must be at least 1".into()));
        }
        match self.schedule {
            StepSchedule::Constant { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::InvalidConfig(format!("step size must be positive, got {alpha}")));
            }
            StepSchedule::StronglyConvex { gamma2 } => {
                if !(gamma2 > 0.0 && gamma2.is_finite()) {
                    return Err(Error::InvalidConfig(format!("gamma2 must be positive, got {gamma2}")));
                }
                if self.geom.p() != 2.0 {
                    return Err(Error::InvalidConfig("strongly convex schedule requires p = 2".into()));
                }
            }
            _ => {}
        }
        match (self.mode, &self.smoothing) {
            (Mode::FirstOrder, Some(_)) => {
                Err(Error::ModeMismatch("first-order mode takes no smoothing configuration".into()))
            }
            (Mode::Bandit(_), None) => Err(Error::ModeMismatch("bandit modes need a smoothing configuration".into())),
            (Mode::Bandit(m), Some(s)) => {
                if s.m != m {
                    return Err(Error::ModeMismatch("smoothing point count differs from the mode".into()));
                }
                if s.n != self.geom.n() {
                    return Err(Error::DimensionMismatch { expected: self.geom.n(), got: s.n });
                }
                if s.mu > self.geom.mu0() {
                    return Err(Error::InvalidConfig(format!(
                        "smoothing radius {} exceeds mu0 = {}",
                        s.mu,
                        self.geom.mu0()
                    )));
                }
                Ok(())
            }
            (Mode::FirstOrder, None) => Ok(()),
        }
    }
}

/// Per-step detail kept by [`Trace::Full`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub queries: Vec<Point>,
    pub readings: Vec<f64>,
    pub direction: Option<Vec<f64>>,
    pub g: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub horizon: usize,
    /// `f_k(xᵏ)`, exact.
    pub losses: Vec<f64>,
    /// `Σ xᵏ`.
    pub iterate_sum: Vec<f64>,
    /// `x^N`.
    pub last_iterate: Point,
    /// `x¹..x^N` under [`Trace::Full`], else empty.
    pub iterates: Vec<Point>,
    pub steps: Vec<StepRecord>,
    pub aggregate: LossAggregate,
    /// `(1/N) Σ ‖g_k‖_*²`.
    pub mean_sq_dual_norm: f64,
    pub max_bias: f64,
    pub wall: Duration,
}

impl RunRecord {
    /// `(1/N) Σ f_k(xᵏ)`.
    pub fn average_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Runs `cfg.horizon` steps against `env`. `rng` drives the direction samples only.
pub fn run_online<R: Rng + ?Sized>(
    mut env: OnlineEnvironment,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<RunRecord> {
    cfg.validate()?;
    let geom = &cfg.geom;
    let n = geom.n();
    if env.dimension() != n {
        return Err(Error::DimensionMismatch { expected: n, got: env.dimension() });
    }
    let started = Instant::now();
    let full = cfg.trace == Trace::Full;
    let mut x = geom.start_point();
    let mut prev: Option<Point> = None;
    let mut losses = Vec::with_capacity(cfg.horizon);
    let mut iterate_sum = vec![0.0; n];
    let mut iterates = Vec::new();
    let mut steps = Vec::new();
    let mut sq_norms = 0.0;

    for k in 1..=cfg.horizon {
        env.reveal(k, &History { current: &x, previous: prev.as_ref() })?;
        losses.push(env.exact_value(k, &x)?);
        iterate_sum.iter_mut().zip(x.iter()).for_each(|(s, v)| *s += v);

        let (g, detail) = match cfg.mode {
            Mode::FirstOrder => {
                let g = env.query_gradient(k, &x)?;
                (g, None)
            }
            Mode::Bandit(_) => {
                let smoothing = cfg.smoothing.as_ref().expect("validated");
                let e = sample_sphere(rng, n);
                let est = estimate(&mut env, k, &x, smoothing, &e)?;
                let detail = full.then(|| (est.queries, est.raw_values, est.e.coords().to_vec()));
                (est.g, detail)
            }
        };
        if !g.is_finite() {
            return Err(Error::InvalidGradient(format!("non-finite dual vector at step {k}")));
        }
        let norm = geom.dual_norm(&g);
        sq_norms += norm * norm;
        let alpha = cfg.schedule.alpha(k);
        if full {
            iterates.push(x.clone());
            let (queries, readings, direction) = match detail {
                Some((q, r, e)) => (q, r, Some(e)),
                None => (vec![x.clone()], Vec::new(), None),
            };
            steps.push(StepRecord { queries, readings, direction, g: g.coords().to_vec(), alpha });
        }
        // no update is needed after the last charged step
        if k < cfg.horizon {
            let next = geom.mirror_step(&x, &g.scaled(alpha))?;
            prev = Some(std::mem::replace(&mut x, next));
        }
    }

    Ok(RunRecord {
        seed: env.seed(),
        horizon: cfg.horizon,
        losses,
        iterate_sum,
        last_iterate: x,
        iterates,
        steps,
        max_bias: env.max_bias(),
        aggregate: env.into_aggregate(),
        mean_sq_dual_norm: sq_norms / cfg.horizon as f64,
        wall: started.elapsed(),
    })
}

/// `x̄^N = (1/N) Σ xᵏ`.
pub fn average_iterate(rec: &RunRecord) -> Point {
    let n = rec.horizon.max(1) as f64;
    Point::new(rec.iterate_sum.iter().map(|s| s / n).collect())
}
