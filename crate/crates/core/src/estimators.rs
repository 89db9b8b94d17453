//! Random directions and the one-/two-point zero-order gradient estimators.
//!
//! With `e` uniform on the unit sphere,
//!
//! ```text
//! m = 1:  g = (n/μ) f̃(x + μe, ξ) e
//! m = 2:  g = (n/μ) (f̃(x + μe, ξ) − f̃(x, ξ)) e
//! ```
//!
//! Both are unbiased for the gradient of the ball-smoothed loss
//! `f^μ(x) = E_ẽ f(x + μẽ)` when the bias term of `f̃` vanishes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{lp_norm, DualVector, GeometrySpec, Point};

/// Number of oracle readings per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryPoints {
    One,
    Two,
}

impl QueryPoints {
    pub fn count(self) -> usize {
        match self {
            QueryPoints::One => 1,
            QueryPoints::Two => 2,
        }
    }

    pub fn from_count(m: usize) -> Result<Self> {
        match m {
            1 => Ok(QueryPoints::One),
            2 => Ok(QueryPoints::Two),
            _ => Err(Error::InvalidConfig(format!("points per step must be 1 or 2, got {m}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub mu: f64,
    pub m: QueryPoints,
    pub n: usize,
}

impl SmoothingConfig {
    /// Validates `0 < mu ≤ geom.mu0()`.
    pub fn new(geom: &GeometrySpec, mu: f64, m: QueryPoints) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("smoothing radius must be positive, got {mu}")));
        }
        if mu > geom.mu0() {
            return Err(Error::InvalidConfig(format!(
                "smoothing radius {mu} exceeds the domain margin mu0 = {}",
                geom.mu0()
            )));
        }
        Ok(Self { mu, m, n: geom.n() })
    }
}

/// A unit vector in `ℓ₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSample {
    e: Vec<f64>,
}

impl DirectionSample {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        let norm = lp_norm(&v, 2.0);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidGradient("direction must be a nonzero finite vector".into()));
        }
        Ok(Self { e: v.into_iter().map(|x| x / norm).collect() })
    }

    pub fn coords(&self) -> &[f64] {
        &self.e
    }

    pub fn dim(&self) -> usize {
        self.e.len()
    }
}

/// A gradient estimate together with the randomness and readings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g: DualVector,
    pub e: DirectionSample,
    /// Oracle readings in query order: `f̃(x + μe)` first, then `f̃(x)` for `m = 2`.
    pub raw_values: Vec<f64>,
    pub queries: Vec<Point>,
}

/// Source of noisy function values for bandit feedback.
///
/// `point_index` is 1-based; the implementation must reuse the noise
/// realization drawn at index 1 for index 2 of the same step.
pub trait ValueOracle {
    fn query_value(&mut self, k: usize, x: &Point, point_index: usize) -> Result<f64>;
}

impl<F> ValueOracle for F
where
    F: FnMut(usize, &Point, usize) -> Result<f64>,
{
    fn query_value(&mut self, k: usize, x: &Point, point_index: usize) -> Result<f64> {
        self(k, x, point_index)
    }
}

/// Uniform direction on the unit sphere in `Rⁿ` (normalized Gaussian).
pub fn sample_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DirectionSample {
    assert!(n >= 1, "sphere dimension must be positive");
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if let Ok(e) = DirectionSample::from_vec(v) {
            return e;
        }
    }
}

/// Uniform point in the unit `ℓ₂` ball: sphere sample scaled by `U^{1/n}`.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let e = sample_sphere(rng, n);
    let u: f64 = rng.random();
    let r = u.powf(1.0 / n as f64);
    e.e.into_iter().map(|x| x * r).collect()
}

fn check_direction(x: &Point, cfg: &SmoothingConfig, e: &DirectionSample) -> Result<()> {
    if x.dim() != cfg.n {
        return Err(Error::DimensionMismatch { expected: cfg.n, got: x.dim() });
    }
    if e.dim() != cfg.n {
        return Err(Error::DimensionMismatch { expected: cfg.n, got: e.dim() });
    }
    Ok(())
}

fn assemble(scale: f64, e: &DirectionSample) -> Result<DualVector> {
    let g = DualVector::new(e.coords().iter().map(|v| scale * v).collect());
    if !g.is_finite() {
        return Err(Error::InvalidGradient("non-finite gradient estimate".into()));
    }
    Ok(g)
}

/// `g = (n/μ) f̃_k(x + μe, ξᵏ) e`.
pub fn one_point_estimate<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    k: usize,
    x: &Point,
    cfg: &SmoothingConfig,
    e: &DirectionSample,
) -> Result<GradientEstimate> {
    check_direction(x, cfg, e)?;
    let probe = x.shifted(cfg.mu, e.coords());
    let value = oracle.query_value(k, &probe, 1)?;
    let g = assemble(cfg.n as f64 / cfg.mu * value, e)?;
    Ok(GradientEstimate { g, e: e.clone(), raw_values: vec![value], queries: vec![probe] })
}

/// `g = (n/μ) (f̃_k(x + μe, ξᵏ) − f̃_k(x, ξᵏ)) e`, one noise draw shared by both readings.
pub fn two_point_estimate<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    k: usize,
    x: &Point,
    cfg: &SmoothingConfig,
    e: &DirectionSample,
) -> Result<GradientEstimate> {
    check_direction(x, cfg, e)?;
    let probe = x.shifted(cfg.mu, e.coords());
    let shifted = oracle.query_value(k, &probe, 1)?;
    let base = oracle.query_value(k, x, 2)?;
    let g = assemble(cfg.n as f64 / cfg.mu * (shifted - base), e)?;
    Ok(GradientEstimate {
        g,
        e: e.clone(),
        raw_values: vec![shifted, base],
        queries: vec![probe, x.clone()],
    })
}

/// Dispatches on `cfg.m`.
pub fn estimate<O: ValueOracle + ?Sized>(
    oracle: &mut O,
    k: usize,
    x: &Point,
    cfg: &SmoothingConfig,
    e: &DirectionSample,
) -> Result<GradientEstimate> {
    match cfg.m {
        QueryPoints::One => one_point_estimate(oracle, k, x, cfg, e),
        QueryPoints::Two => two_point_estimate(oracle, k, x, cfg, e),
    }
}

/// Monte-Carlo estimate of `f^μ(x) = E_ẽ f(x + μẽ)`; returns `(mean, stderr)`.
pub fn smoothed_value<F, R>(f: F, x: &[f64], mu: f64, samples: usize, rng: &mut R) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let mut acc = ScalarMoments::default();
    let mut probe = vec![0.0; x.len()];
    for _ in 0..samples {
        let u = sample_ball(rng, x.len());
        probe.iter_mut().zip(x.iter().zip(&u)).for_each(|(p, (x, u))| *p = x + mu * u);
        acc.push(f(&probe));
    }
    (acc.mean(), acc.stderr())
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct ScalarMoments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl ScalarMoments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Coordinate-wise running moments of a vector-valued sample.
#[derive(Debug, Clone)]
pub struct VectorMoments {
    coords: Vec<ScalarMoments>,
}

impl VectorMoments {
    pub fn new(n: usize) -> Self {
        Self { coords: vec![ScalarMoments::default(); n] }
    }

    pub fn push(&mut self, v: &[f64]) {
        self.coords.iter_mut().zip(v).for_each(|(acc, x)| acc.push(*x));
    }

    pub fn mean(&self) -> Vec<f64> {
        self.coords.iter().map(ScalarMoments::mean).collect()
    }

    pub fn stderr(&self) -> Vec<f64> {
        self.coords.iter().map(ScalarMoments::stderr).collect()
    }

    /// `√(Σ seᵢ²)`: the standard error scale of `‖mean − truth‖₂`.
    pub fn stderr_norm(&self) -> f64 {
        self.stderr().iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}
