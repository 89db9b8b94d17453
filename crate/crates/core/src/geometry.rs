//! Norms, prox functions, Bregman divergences and the mirror step.
//!
//! Three geometry pairings are supported:
//!
//! | domain              | prox `d(x)`                       | primal norm |
//! |---------------------|-----------------------------------|-------------|
//! | simplex `S_n(1)`    | `ln n + Σ xᵢ ln xᵢ`               | `ℓ₁`        |
//! | ball `B₂ⁿ(r)`       | `‖x‖₂² / 2`                       | `ℓ₂`        |
//! | `ℓ₁`-ball `B₁ⁿ(1)`  | `‖x‖_a² / (2(a − 1))`             | `ℓ_a`       |
//!
//! with `a = 2 ln n / (2 ln n − 1)`. Each prox is 1-strongly convex with
//! respect to its primal norm, attains its minimum `0` at [`GeometrySpec::start_point`],
//! and its maximum over the domain is [`GeometrySpec::r2`].

use std::ops::Deref;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};

/// Absolute tolerance for domain membership checks.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Lower bound kept on every simplex coordinate after a mirror step.
pub const ENTROPY_FLOOR: f64 = 1e-12;

const LA_BISECTION_TOL: f64 = 1e-10;
const LA_R2_BOUNDARY_SAMPLES: usize = 256;

/// A primal point.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.coords
    }

    /// `self + t·dir`.
    pub fn shifted(&self, t: f64, dir: &[f64]) -> Point {
        Point::new(self.coords.iter().zip(dir).map(|(x, d)| x + t * d).collect())
    }
}

impl Deref for Point {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coords
    }
}

impl From<Vec<f64>> for Point {
    fn from(coords: Vec<f64>) -> Self {
        Self::new(coords)
    }
}

/// A vector in the dual space (gradients, gradient estimates).
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector {
    coords: Vec<f64>,
}

impl DualVector {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn scaled(&self, s: f64) -> DualVector {
        DualVector::new(self.coords.iter().map(|g| s * g).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|g| g.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.coords
    }
}

impl Deref for DualVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coords
    }
}

impl From<Vec<f64>> for DualVector {
    fn from(coords: Vec<f64>) -> Self {
        Self::new(coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Simplex,
    EuclideanBall { radius: f64 },
    L1Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prox {
    Entropy,
    SquaredL2,
    SquaredLa,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Simplex => write!(f, "simplex"),
            Domain::EuclideanBall { .. } => write!(f, "ball"),
            Domain::L1Ball => write!(f, "l1-ball"),
        }
    }
}

/// An immutable geometry: dimension, feasible set, prox structure and the
/// margin `mu0` of the neighbourhood on which losses may be queried.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySpec {
    n: usize,
    domain: Domain,
    prox: Prox,
    p: f64,
    mu0: f64,
    r2: f64,
}

impl GeometrySpec {
    pub fn new(n: usize, domain: Domain, prox: Prox, mu0: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        if !(mu0 >= 0.0 && mu0.is_finite()) {
            return Err(Error::InvalidConfig(format!("mu0 must be a nonnegative real, got {mu0}")));
        }
        let (p, r2) = match (domain, prox) {
            (Domain::Simplex, Prox::Entropy) => (1.0, (n as f64).ln()),
            (Domain::EuclideanBall { radius }, Prox::SquaredL2) => {
                if !(radius > 0.0 && radius.is_finite()) {
                    return Err(Error::InvalidConfig(format!("ball radius must be positive, got {radius}")));
                }
                (2.0, 0.5 * radius * radius)
            }
            (Domain::L1Ball, Prox::SquaredLa) => {
                if n < 3 {
                    return Err(Error::InvalidConfig(
                        "squared-la prox needs n >= 3 so that 1 < a <= 2".into(),
                    ));
                }
                let a = la_exponent(n);
                (a, 0.0)
            }
            (d, p) => {
                return Err(Error::InvalidConfig(format!(
                    "unsupported geometry pairing ({d}, {p:?})"
                )))
            }
        };
        let mut geom = Self { n, domain, prox, p, mu0, r2 };
        if prox == Prox::SquaredLa {
            geom.r2 = geom.la_radius_squared();
        }
        Ok(geom)
    }

    /// Probability simplex with the entropy prox.
    pub fn simplex(n: usize) -> Result<Self> {
        Self::new(n, Domain::Simplex, Prox::Entropy, 0.0)
    }

    /// Euclidean ball of the given radius with the squared-`ℓ₂` prox.
    pub fn euclidean_ball(n: usize, radius: f64) -> Result<Self> {
        Self::new(n, Domain::EuclideanBall { radius }, Prox::SquaredL2, 0.0)
    }

    /// Unit `ℓ₁`-ball with the squared-`ℓ_a` prox.
    pub fn l1_ball(n: usize) -> Result<Self> {
        Self::new(n, Domain::L1Ball, Prox::SquaredLa, 0.0)
    }

    pub fn with_mu0(mut self, mu0: f64) -> Result<Self> {
        if !(mu0 >= 0.0 && mu0.is_finite()) {
            return Err(Error::InvalidConfig(format!("mu0 must be a nonnegative real, got {mu0}")));
        }
        self.mu0 = mu0;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn prox(&self) -> Prox {
        self.prox
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    /// Primal norm exponent.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Dual norm exponent, `1/p + 1/q = 1`.
    pub fn q(&self) -> f64 {
        conjugate_exponent(self.p)
    }

    /// The `a` exponent of the squared-`ℓ_a` prox, when that prox is in use.
    pub fn a(&self) -> Option<f64> {
        (self.prox == Prox::SquaredLa).then_some(self.p)
    }

    /// `R² = max_{x∈Q} d(x)`.
    pub fn r2(&self) -> f64 {
        self.r2
    }

    pub fn radius(&self) -> f64 {
        self.r2.sqrt()
    }

    /// `max_{x,y∈Q} ‖x − y‖` in the primal norm.
    pub fn diameter(&self) -> f64 {
        match self.domain {
            Domain::EuclideanBall { radius } => 2.0 * radius,
            // two opposite (or two distinct) vertices, whose difference has two unit entries
            Domain::Simplex => 2f64.powf(1.0 / self.p),
            Domain::L1Ball => 2.0,
        }
    }

    pub fn primal_norm(&self, v: &[f64]) -> f64 {
        lp_norm(v, self.p)
    }

    /// `‖g‖_q`.
    pub fn dual_norm(&self, g: &[f64]) -> f64 {
        lp_norm(g, self.q())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got });
        }
        Ok(())
    }

    /// Membership in `Q` to [`MEMBERSHIP_TOL`].
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.n || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self.domain {
            Domain::Simplex => {
                x.iter().all(|&v| v >= -MEMBERSHIP_TOL)
                    && (x.iter().sum::<f64>() - 1.0).abs() <= MEMBERSHIP_TOL
            }
            Domain::EuclideanBall { radius } => lp_norm(x, 2.0) <= radius + MEMBERSHIP_TOL,
            Domain::L1Ball => lp_norm(x, 1.0) <= 1.0 + MEMBERSHIP_TOL,
        }
    }

    /// Membership in the query neighbourhood `Q_{μ₀}` (Euclidean distance to `Q` at most `mu0`).
    pub fn contains_query(&self, x: &[f64]) -> bool {
        x.len() == self.n && self.distance_to_domain(x) <= self.mu0 + MEMBERSHIP_TOL
    }

    pub fn check_query(&self, x: &[f64]) -> Result<()> {
        self.check_dim(x.len())?;
        let distance = self.distance_to_domain(x);
        if !(distance <= self.mu0 + MEMBERSHIP_TOL) {
            return Err(Error::DomainViolation { distance, mu0: self.mu0 });
        }
        Ok(())
    }

    pub fn distance_to_domain(&self, x: &[f64]) -> f64 {
        let proj = self.project(x);
        x.iter().zip(proj.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Euclidean projection onto `Q`.
    pub fn project(&self, x: &[f64]) -> Point {
        match self.domain {
            Domain::Simplex => Point::new(project_simplex(x, 1.0)),
            Domain::EuclideanBall { radius } => {
                let norm = lp_norm(x, 2.0);
                if norm <= radius {
                    Point::new(x.to_vec())
                } else {
                    Point::new(x.iter().map(|v| v * radius / norm).collect())
                }
            }
            Domain::L1Ball => {
                if lp_norm(x, 1.0) <= 1.0 {
                    return Point::new(x.to_vec());
                }
                let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
                let w = project_simplex(&abs, 1.0);
                Point::new(x.iter().zip(w).map(|(v, w)| w.copysign(*v)).collect())
            }
        }
    }

    fn check_member(&self, x: &[f64]) -> Result<()> {
        self.check_dim(x.len())?;
        if !self.contains(x) {
            return Err(Error::InvalidPoint(format!("point is not in the {} domain", self.domain)));
        }
        Ok(())
    }

    /// `d(x)`.
    pub fn prox_value(&self, x: &Point) -> Result<f64> {
        self.check_member(x)?;
        Ok(self.prox_unchecked(x))
    }

    fn prox_unchecked(&self, x: &[f64]) -> f64 {
        match self.prox {
            Prox::Entropy => {
                let ent: f64 = x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
                ((self.n as f64).ln() + ent).max(0.0)
            }
            Prox::SquaredL2 => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            Prox::SquaredLa => {
                let norm = lp_norm(x, self.p);
                norm * norm / (2.0 * (self.p - 1.0))
            }
        }
    }

    /// `∇d(x)`; for the entropy prox `x` must be strictly positive.
    pub fn prox_gradient(&self, x: &[f64]) -> Result<DualVector> {
        self.check_dim(x.len())?;
        match self.prox {
            Prox::Entropy => {
                if let Some((index, &value)) = x.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
                    return Err(Error::GradientUndefined { index, value });
                }
                Ok(DualVector::new(x.iter().map(|v| 1.0 + v.ln()).collect()))
            }
            Prox::SquaredL2 => Ok(DualVector::new(x.to_vec())),
            Prox::SquaredLa => {
                let a = self.p;
                Ok(DualVector::new(
                    power_map(x, a).into_iter().map(|v| v / (a - 1.0)).collect(),
                ))
            }
        }
    }

    /// Bregman divergence `V_x(y) = d(y) − d(x) − ⟨∇d(x), y − x⟩`.
    pub fn bregman(&self, x: &Point, y: &Point) -> Result<f64> {
        self.check_member(x)?;
        self.check_member(y)?;
        let grad = self.prox_gradient(x)?;
        let v = match self.prox {
            // Per-coordinate form of the same expression; avoids cancellation.
            Prox::Entropy => x
                .iter()
                .zip(y.iter())
                .map(|(&xi, &yi)| {
                    let yi = yi.max(0.0);
                    if yi > 0.0 {
                        yi * (yi / xi).ln() - yi + xi
                    } else {
                        xi
                    }
                })
                .sum(),
            Prox::SquaredL2 => 0.5 * x.iter().zip(y.iter()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>(),
            Prox::SquaredLa => {
                let lin: f64 = grad.iter().zip(y.iter().zip(x.iter())).map(|(g, (b, a))| g * (b - a)).sum();
                self.prox_unchecked(y) - self.prox_unchecked(x) - lin
            }
        };
        Ok(v.max(0.0))
    }

    /// `x¹ = argmin_{x∈Q} d(x)`.
    pub fn start_point(&self) -> Point {
        match self.domain {
            Domain::Simplex => Point::new(vec![1.0 / self.n as f64; self.n]),
            Domain::EuclideanBall { .. } | Domain::L1Ball => Point::zeros(self.n),
        }
    }

    /// `Mirr_x(g) = argmin_{y∈Q} ⟨g, y − x⟩ + V_x(y)`; `g` already carries the step size.
    pub fn mirror_step(&self, x: &Point, g: &DualVector) -> Result<Point> {
        self.check_dim(x.dim())?;
        self.check_dim(g.dim())?;
        if !g.is_finite() {
            return Err(Error::InvalidGradient("non-finite entry in mirror-step argument".into()));
        }
        match self.domain {
            Domain::Simplex => Ok(entropy_step(x, g)),
            Domain::EuclideanBall { .. } => {
                let moved: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
                Ok(self.project(&moved))
            }
            Domain::L1Ball => {
                let grad = self.prox_gradient(x)?;
                let c: Vec<f64> = grad.iter().zip(g.iter()).map(|(d, g)| d - g).collect();
                Ok(Point::new(self.la_constrained_argmax(&c)))
            }
        }
    }

    /// `argmin_{‖y‖₁≤1} d(y) − ⟨c, y⟩` for the squared-`ℓ_a` prox.
    ///
    /// For a multiplier `λ ≥ 0` the penalized problem is solved by
    /// soft-thresholding `c` at `λ` and applying the conjugate gradient map
    /// coordinate-wise; `‖y(λ)‖₁` is nonincreasing, so `λ` is bisected.
    fn la_constrained_argmax(&self, c: &[f64]) -> Vec<f64> {
        let a = self.p;
        let q = conjugate_exponent(a);
        let solve = |lambda: f64| -> Vec<f64> {
            let shrunk: Vec<f64> = c
                .iter()
                .map(|&v| if v.abs() > lambda { v - lambda.copysign(v) } else { 0.0 })
                .collect();
            power_map(&shrunk, q).into_iter().map(|v| v * (a - 1.0)).collect()
        };
        let unconstrained = solve(0.0);
        if lp_norm(&unconstrained, 1.0) <= 1.0 {
            return unconstrained;
        }
        let mut lo = 0.0;
        let mut hi = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for _ in 0..200 {
            if hi - lo <= LA_BISECTION_TOL {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if lp_norm(&solve(mid), 1.0) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        solve(hi)
    }

    fn la_radius_squared(&self) -> f64 {
        use rand::SeedableRng;
        let mut best = 0.0_f64;
        for i in 0..self.n {
            let mut v = vec![0.0; self.n];
            v[i] = 1.0;
            best = best.max(self.prox_unchecked(&v));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6c61_7232);
        for _ in 0..LA_R2_BOUNDARY_SAMPLES {
            let w = dirichlet_ones(&mut rng, self.n);
            let v: Vec<f64> = w
                .into_iter()
                .map(|w| if rng.random::<bool>() { w } else { -w })
                .collect();
            best = best.max(self.prox_unchecked(&v));
        }
        best
    }

    /// `argmin_{z∈Q} ⟨g, z⟩`.
    pub fn linear_minimizer(&self, g: &[f64]) -> Point {
        let mut z = vec![0.0; self.n];
        match self.domain {
            Domain::Simplex => {
                let j = argmin(g);
                z[j] = 1.0;
            }
            Domain::EuclideanBall { radius } => {
                let norm = lp_norm(g, 2.0);
                if norm > 0.0 {
                    z.iter_mut().zip(g).for_each(|(z, g)| *z = -radius * g / norm);
                }
            }
            Domain::L1Ball => {
                let j = argmax_abs(g);
                if g[j] != 0.0 {
                    z[j] = -g[j].signum();
                }
            }
        }
        Point::new(z)
    }

    /// A random feasible point (not uniform on the simplex boundary; interior with probability one).
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match self.domain {
            Domain::Simplex => Point::new(dirichlet_ones(rng, self.n)),
            Domain::EuclideanBall { radius } => {
                let dir = gaussian_direction(rng, self.n);
                let u: f64 = rng.random();
                let scale = radius * u.powf(1.0 / self.n as f64);
                Point::new(dir.into_iter().map(|d| d * scale).collect())
            }
            Domain::L1Ball => {
                let w = dirichlet_ones(rng, self.n);
                let u: f64 = rng.random();
                let scale = u.powf(1.0 / self.n as f64);
                Point::new(
                    w.into_iter()
                        .map(|w| if rng.random::<bool>() { w * scale } else { -w * scale })
                        .collect(),
                )
            }
        }
    }
}

/// `a = 2 ln n / (2 ln n − 1)`.
pub fn la_exponent(n: usize) -> f64 {
    let l = 2.0 * (n as f64).ln();
    l / (l - 1.0)
}

/// `q` with `1/p + 1/q = 1`; `∞` for `p = 1`.
pub fn conjugate_exponent(p: f64) -> f64 {
    if p <= 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// `‖v‖_p` for `p ∈ [1, ∞]`, scaled by the max-abs entry to avoid overflow.
pub fn lp_norm(v: &[f64], p: f64) -> f64 {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 || p.is_infinite() {
        return max;
    }
    if p == 1.0 {
        return v.iter().map(|x| x.abs()).sum();
    }
    if p == 2.0 {
        return v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    max * v.iter().map(|x| (x.abs() / max).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Gradient of `½‖v‖_p²`: `‖v‖_p (|vᵢ|/‖v‖_p)^{p−1} sign(vᵢ)`.
fn power_map(v: &[f64], p: f64) -> Vec<f64> {
    let norm = lp_norm(v, p);
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    if p.is_infinite() {
        // Limit of the map: mass on the max-abs coordinates only.
        let hits = v.iter().filter(|x| x.abs() == norm).count() as f64;
        return v.iter().map(|x| if x.abs() == norm { norm.copysign(*x) / hits } else { 0.0 }).collect();
    }
    v.iter().map(|x| norm * (x.abs() / norm).powf(p - 1.0) * x.signum()).collect()
}

fn entropy_step(x: &[f64], g: &[f64]) -> Point {
    let logits: Vec<f64> = x
        .iter()
        .zip(g)
        .map(|(&xi, &gi)| if xi > 0.0 { xi.ln() - gi } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v = (*v / total).max(ENTROPY_FLOOR));
    let total: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= total);
    Point::new(y)
}

/// Euclidean projection onto `{x ≥ 0, Σ x = z}` (sort-and-threshold).
pub fn project_simplex(v: &[f64], z: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - z) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn gaussian_direction<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = lp_norm(&v, 2.0);
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn argmin(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x < v[best] { i } else { best })
}

fn argmax_abs(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best })
}
