//! Loss families, noise models and adversaries.
//!
//! An [`OnlineEnvironment`] reveals a convex loss `f_k` at the start of each
//! step and then answers noisy value queries (bandit modes) or noisy
//! gradient queries (first-order mode). Readings are
//!
//! ```text
//! f̃_k(x, ξᵏ) = f_k(x, ξᵏ) + bias,   |bias| ≤ δ,   E_ξ f_k(x, ξ) = f_k(x)
//! ```
//!
//! The loss script and the noise draw from two separate streams, so the
//! loss revealed at step `k` is a function of the seed and the iterate
//! history only; it can never depend on the direction the learner samples
//! after the reveal.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimators::ValueOracle;
use crate::geometry::{lp_norm, Domain, DualVector, GeometrySpec, Point};
use crate::rng::{derive_seed, stream, StreamRng, SALT_LOSSES, SALT_NOISE};

/// Class constants of a loss family on `Q_{μ₀}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionClassConstants {
    /// `ℓ₂`-Lipschitz constant.
    pub m2: f64,
    /// `ℓ_r`-Lipschitz constant, with its `r`.
    pub mr: f64,
    pub r: f64,
    /// `ℓ₂` gradient-Lipschitz constant (`∞` when not smooth).
    pub l2: f64,
    /// `ℓ₂` strong-convexity modulus (`0` when merely convex).
    pub gamma2: f64,
    /// `√ sup E f̃²`.
    pub b: f64,
}

impl FunctionClassConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("M2", self.m2), ("Mr", self.mr), ("L2", self.l2), ("gamma2", self.gamma2), ("B", self.b)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("class constant {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StochasticNoise {
    None,
    /// `f(x) + sd·ξ` (vector `ξ` for gradient readings).
    AdditiveGaussian { sd: f64 },
    /// `f(x)·(1 + sd·ξ)`.
    Multiplicative { sd: f64 },
}

impl StochasticNoise {
    fn sd(&self) -> f64 {
        match *self {
            StochasticNoise::None => 0.0,
            StochasticNoise::AdditiveGaussian { sd } | StochasticNoise::Multiplicative { sd } => sd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasPolicy {
    Zero,
    /// Every reading shifted by `+δ`.
    ConstantSign,
    /// Readings shifted by `δ·sgn⟨xᵏ − x^{k−1}, x − xᵏ⟩`, so that the induced step
    /// opposes the learner's last move.
    WorstDirection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub stochastic: StochasticNoise,
    pub delta: f64,
    pub policy: BiasPolicy,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { stochastic: StochasticNoise::None, delta: 0.0, policy: BiasPolicy::Zero }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("bias magnitude must be nonnegative, got {}", self.delta)));
        }
        let sd = self.stochastic.sd();
        if !(sd >= 0.0 && sd.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise sd must be nonnegative, got {sd}")));
        }
        Ok(())
    }

    fn effective_delta(&self) -> f64 {
        match self.policy {
            BiasPolicy::Zero => 0.0,
            _ => self.delta,
        }
    }
}

/// Expert loss generators.
#[derive(Debug, Clone, PartialEq)]
pub enum LossScript {
    /// Row `k − 1` is the loss vector of step `k`.
    Scripted(Arc<Vec<Vec<f64>>>),
    /// i.i.d. `U[0, scale]` coordinates.
    IidUniform,
    /// i.i.d. uniform losses except for a best expert drawn from `U[0, scale·(1 − gap)]`;
    /// the best expert moves to the next index every `period` steps.
    DriftingBest { gap: f64, period: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// `f_k(x) = ⟨lᵏ, x⟩` with `|lᵏᵢ| ≤ scale`.
    ExpertLinear { scale: f64, script: LossScript },
    /// `f(x) = weight·√(‖x − center‖₂² + softness²) + offset`, the same every step.
    FixedConvex { center: Vec<f64>, weight: f64, softness: f64, offset: f64 },
    /// `f(x) = Σ curvatureᵢ (xᵢ − centerᵢ)²`, the same every step.
    FixedQuadratic { center: Vec<f64>, curvature: Vec<f64> },
    /// `lᵏ = scale·e_j` with `j` the heaviest coordinate of the previous iterate.
    AdaptiveLinear { scale: f64 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::ExpertLinear { .. } => "expert-linear",
            Family::FixedConvex { .. } => "fixed-convex",
            Family::FixedQuadratic { .. } => "fixed-quadratic",
            Family::AdaptiveLinear { .. } => "adaptive-linear",
        }
    }

    /// Whether the same loss is revealed at every step.
    pub fn is_fixed(&self) -> bool {
        matches!(self, Family::FixedConvex { .. } | Family::FixedQuadratic { .. })
    }
}

/// A revealed loss.
#[derive(Debug, Clone, PartialEq)]
pub enum LossFn {
    Linear(Vec<f64>),
    PseudoHuber { center: Vec<f64>, weight: f64, softness: f64, offset: f64 },
    Quadratic { center: Vec<f64>, curvature: Vec<f64> },
}

impl LossFn {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            LossFn::Linear(l) => dot(l, x),
            LossFn::PseudoHuber { center, weight, softness, offset } => {
                weight * (dist_sq(x, center) + softness * softness).sqrt() + offset
            }
            LossFn::Quadratic { center, curvature } => {
                x.iter().zip(center).zip(curvature).map(|((x, c), a)| a * (x - c) * (x - c)).sum()
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LossFn::Linear(l) => l.clone(),
            LossFn::PseudoHuber { center, weight, softness, .. } => {
                let s = (dist_sq(x, center) + softness * softness).sqrt();
                x.iter().zip(center).map(|(x, c)| weight * (x - c) / s).collect()
            }
            LossFn::Quadratic { center, curvature } => {
                x.iter().zip(center).zip(curvature).map(|((x, c), a)| 2.0 * a * (x - c)).collect()
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LossFn::Linear(_))
    }

    /// Upper bound on `‖∇f‖₂` (gradient-Lipschitz constant) for the smooth kinds.
    pub fn smoothness(&self) -> f64 {
        match self {
            LossFn::Linear(_) => 0.0,
            LossFn::PseudoHuber { weight, softness, .. } => weight / softness,
            LossFn::Quadratic { curvature, .. } => 2.0 * curvature.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Running record of the revealed losses, enough to evaluate `(1/N) Σ f_k(x)`.
#[derive(Debug, Clone, Default)]
pub struct LossAggregate {
    count: usize,
    linear_sum: Vec<f64>,
    nonlinear: Vec<(Arc<LossFn>, usize)>,
}

impl LossAggregate {
    pub fn new(n: usize) -> Self {
        Self { count: 0, linear_sum: vec![0.0; n], nonlinear: Vec::new() }
    }

    pub fn push(&mut self, f: &Arc<LossFn>) {
        self.count += 1;
        match f.as_ref() {
            LossFn::Linear(l) => self.linear_sum.iter_mut().zip(l).for_each(|(s, v)| *s += v),
            _ => match self.nonlinear.last_mut() {
                Some((last, c)) if Arc::ptr_eq(last, f) || last.as_ref() == f.as_ref() => *c += 1,
                _ => self.nonlinear.push((f.clone(), 1)),
            },
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.linear_sum.len()
    }

    /// Whether every recorded loss was linear.
    pub fn is_linear(&self) -> bool {
        self.nonlinear.is_empty()
    }

    /// `(1/N) Σ lᵏ` over the linear part.
    pub fn average_linear(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.linear_sum.iter().map(|s| s / n).collect()
    }

    /// `(1/N) Σ_k f_k(x)`.
    pub fn average_loss(&self, x: &[f64]) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let nonlin: f64 = self.nonlinear.iter().map(|(f, c)| *c as f64 * f.value(x)).sum();
        (dot(&self.linear_sum, x) + nonlin) / self.count as f64
    }

    pub fn average_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.linear_sum.clone();
        for (f, c) in &self.nonlinear {
            g.iter_mut().zip(f.gradient(x)).for_each(|(g, v)| *g += *c as f64 * v);
        }
        let n = self.count.max(1) as f64;
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    /// Gradient-Lipschitz constant of the average loss in `ℓ₂`.
    pub fn smoothness(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.nonlinear.iter().map(|(f, c)| *c as f64 * f.smoothness()).sum::<f64>() / self.count as f64
    }
}

/// What the environment may observe about the learner when revealing `f_k`:
/// the current iterate `xᵏ` (a deterministic function of the past) and the previous one.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub current: &'a Point,
    pub previous: Option<&'a Point>,
}

/// Blueprint of an environment; cheap to clone and build per replica.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub family: Family,
    pub geom: GeometrySpec,
    pub noise: NoiseModel,
}

impl EnvironmentSpec {
    pub fn new(family: Family, geom: GeometrySpec, noise: NoiseModel) -> Result<Self> {
        let spec = Self { family, geom, noise };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        let n = self.geom.n();
        let check_len = |name: &str, v: &[f64]| {
            if v.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: v.len() }).map_err(|e| {
                    Error::InvalidConfig(format!("{name}: {e}"))
                });
            }
            Ok(())
        };
        match &self.family {
            Family::ExpertLinear { scale, script } => {
                positive("loss scale", *scale)?;
                match script {
                    LossScript::Scripted(rows) => {
                        if rows.is_empty() {
                            return Err(Error::InvalidConfig("loss script is empty".into()));
                        }
                        for row in rows.iter() {
                            check_len("loss script row", row)?;
                        }
                    }
                    LossScript::DriftingBest { gap, period } => {
                        if !(0.0..=1.0).contains(gap) || *period == 0 {
                            return Err(Error::InvalidConfig("drifting script needs gap in [0,1] and period >= 1".into()));
                        }
                    }
                    LossScript::IidUniform => {}
                }
            }
            Family::FixedConvex { center, weight, softness, offset } => {
                check_len("center", center)?;
                positive("weight", *weight)?;
                positive("softness", *softness)?;
                if !offset.is_finite() {
                    return Err(Error::InvalidConfig("offset must be finite".into()));
                }
            }
            Family::FixedQuadratic { center, curvature } => {
                check_len("center", center)?;
                check_len("curvature", curvature)?;
                for a in curvature {
                    positive("curvature", *a)?;
                }
            }
            Family::AdaptiveLinear { scale } => positive("loss scale", *scale)?,
        }
        Ok(())
    }

    pub fn with_mu0(mut self, mu0: f64) -> Result<Self> {
        self.geom = self.geom.with_mu0(mu0)?;
        Ok(self)
    }

    pub fn build(&self, seed: u64) -> OnlineEnvironment {
        OnlineEnvironment::new(self.clone(), seed)
    }

    /// `max_{x∈Q} ‖x − c‖₂`.
    fn max_distance_from(&self, c: &[f64]) -> f64 {
        let n = self.geom.n();
        match self.geom.domain() {
            Domain::EuclideanBall { radius } => lp_norm(c, 2.0) + radius,
            Domain::Simplex | Domain::L1Ball => {
                let signs: &[f64] = if self.geom.domain() == Domain::Simplex { &[1.0] } else { &[1.0, -1.0] };
                let mut best = 0.0_f64;
                for i in 0..n {
                    for s in signs {
                        let mut v = vec![0.0; n];
                        v[i] = *s;
                        best = best.max(dist_sq(&v, c).sqrt());
                    }
                }
                best
            }
        }
    }

    /// Max-abs of the linear family's loss entries.
    fn linear_scale(&self) -> f64 {
        match &self.family {
            Family::ExpertLinear { script: LossScript::Scripted(rows), .. } => {
                rows.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
            }
            Family::ExpertLinear { scale, .. } | Family::AdaptiveLinear { scale } => *scale,
            _ => 0.0,
        }
    }

    /// `sup |f|` and `sup ‖∇f‖₂` over `Q_{μ₀}` together with the noiseless class constants.
    fn base_bounds(&self) -> (f64, FunctionClassConstants) {
        let n = self.geom.n() as f64;
        let mu0 = self.geom.mu0();
        match &self.family {
            Family::ExpertLinear { .. } | Family::AdaptiveLinear { .. } => {
                let m = self.linear_scale();
                let extent = match self.geom.domain() {
                    Domain::EuclideanBall { radius } => radius * n.sqrt(),
                    _ => 1.0,
                };
                let sup_f = m * extent + mu0 * m * n.sqrt();
                let consts = FunctionClassConstants { m2: m * n.sqrt(), mr: m, r: 1.0, l2: 0.0, gamma2: 0.0, b: sup_f };
                (sup_f, consts)
            }
            Family::FixedConvex { center, weight, softness, offset } => {
                let d = self.max_distance_from(center) + mu0;
                let lo = weight * softness + offset;
                let hi = weight * (d * d + softness * softness).sqrt() + offset;
                let sup_f = lo.abs().max(hi.abs());
                let consts = FunctionClassConstants {
                    m2: *weight,
                    mr: *weight,
                    r: 2.0,
                    l2: weight / softness,
                    gamma2: 0.0,
                    b: sup_f,
                };
                (sup_f, consts)
            }
            Family::FixedQuadratic { center, curvature } => {
                let d = self.max_distance_from(center) + mu0;
                let a_max = curvature.iter().cloned().fold(0.0, f64::max);
                let a_min = curvature.iter().cloned().fold(f64::INFINITY, f64::min);
                let sup_f = a_max * d * d;
                let consts = FunctionClassConstants {
                    m2: 2.0 * a_max * d,
                    mr: 2.0 * a_max * d,
                    r: 2.0,
                    l2: 2.0 * a_max,
                    gamma2: 2.0 * a_min,
                    b: sup_f,
                };
                (sup_f, consts)
            }
        }
    }

    /// Class constants of the noisy readings on `Q_{μ₀}`.
    pub fn constants(&self) -> FunctionClassConstants {
        let (sup_f, mut c) = self.base_bounds();
        let delta = self.noise.effective_delta();
        let biased = sup_f + delta;
        match self.noise.stochastic {
            StochasticNoise::None => c.b = biased,
            StochasticNoise::AdditiveGaussian { sd } => c.b = (biased * biased + sd * sd).sqrt(),
            StochasticNoise::Multiplicative { sd } => {
                let factor = (1.0 + sd * sd).sqrt();
                c.m2 *= factor;
                c.mr *= factor;
                c.l2 *= factor;
                c.b = (biased * biased + sup_f * sup_f * sd * sd).sqrt();
            }
        }
        c
    }

    /// Closed-form bound on `sup_x E‖∇f̃(x, ξ)‖_q²` for first-order readings (`q ≥ 2`).
    pub fn gradient_moment_bound(&self) -> f64 {
        let n = self.geom.n() as f64;
        let (_, base) = self.base_bounds();
        let q = self.geom.q();
        let sup_grad = match &self.family {
            Family::ExpertLinear { .. } | Family::AdaptiveLinear { .. } => {
                self.linear_scale() * if q.is_infinite() { 1.0 } else { n.powf(1.0 / q) }
            }
            _ => base.m2,
        };
        let sd = self.noise.stochastic.sd();
        let signal_sq = match self.noise.stochastic {
            StochasticNoise::None => sup_grad * sup_grad,
            StochasticNoise::AdditiveGaussian { .. } => sup_grad * sup_grad + n * sd * sd,
            StochasticNoise::Multiplicative { .. } => sup_grad * sup_grad * (1.0 + sd * sd),
        };
        let root = signal_sq.sqrt() + self.noise.effective_delta();
        root * root
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueryKind {
    Values,
    Gradients,
}

#[derive(Debug, Clone)]
struct StepNoise {
    k: usize,
    xi: f64,
}

/// A live environment for one run.
#[derive(Debug, Clone)]
pub struct OnlineEnvironment {
    spec: EnvironmentSpec,
    seed: u64,
    loss_rng: StreamRng,
    noise_rng: StreamRng,
    fixed: Option<Arc<LossFn>>,
    current: Option<(usize, Arc<LossFn>)>,
    anchor: Point,
    movement: Vec<f64>,
    step_noise: Option<StepNoise>,
    kind: Option<QueryKind>,
    aggregate: LossAggregate,
    max_bias: f64,
}

impl OnlineEnvironment {
    pub fn new(spec: EnvironmentSpec, seed: u64) -> Self {
        let n = spec.geom.n();
        let fixed = match &spec.family {
            Family::FixedConvex { center, weight, softness, offset } => Some(Arc::new(LossFn::PseudoHuber {
                center: center.clone(),
                weight: *weight,
                softness: *softness,
                offset: *offset,
            })),
            Family::FixedQuadratic { center, curvature } => {
                Some(Arc::new(LossFn::Quadratic { center: center.clone(), curvature: curvature.clone() }))
            }
            _ => None,
        };
        Self {
            anchor: spec.geom.start_point(),
            movement: vec![0.0; n],
            loss_rng: stream(derive_seed(seed, 0, SALT_LOSSES)),
            noise_rng: stream(derive_seed(seed, 0, SALT_NOISE)),
            fixed,
            current: None,
            step_noise: None,
            kind: None,
            aggregate: LossAggregate::new(n),
            max_bias: 0.0,
            spec,
            seed,
        }
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn geom(&self) -> &GeometrySpec {
        &self.spec.geom
    }

    pub fn dimension(&self) -> usize {
        self.spec.geom.n()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn constants(&self) -> FunctionClassConstants {
        self.spec.constants()
    }

    /// Losses revealed so far.
    pub fn aggregate(&self) -> &LossAggregate {
        &self.aggregate
    }

    pub fn into_aggregate(self) -> LossAggregate {
        self.aggregate
    }

    /// Largest `|f̃ − f(·, ξ)|` (or dual norm of the gradient bias) produced so far.
    pub fn max_bias(&self) -> f64 {
        self.max_bias
    }

    /// Fixes `f_k` before any query of step `k`.
    pub fn reveal(&mut self, k: usize, history: &History<'_>) -> Result<Arc<LossFn>> {
        let n = self.dimension();
        if history.current.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: history.current.dim() });
        }
        if let Some((last, _)) = &self.current {
            if k <= *last {
                return Err(Error::InvalidConfig(format!("step {k} revealed after step {last}")));
            }
        }
        let f = match &self.spec.family {
            Family::FixedConvex { .. } | Family::FixedQuadratic { .. } => {
                self.fixed.clone().expect("fixed family carries its loss")
            }
            Family::ExpertLinear { scale, script } => {
                let l = match script {
                    LossScript::Scripted(rows) => rows
                        .get(k - 1)
                        .cloned()
                        .ok_or_else(|| Error::InvalidConfig(format!("loss script has only {} rows, step {k} requested", rows.len())))?,
                    LossScript::IidUniform => (0..n).map(|_| scale * self.loss_rng.random::<f64>()).collect(),
                    LossScript::DriftingBest { gap, period } => {
                        let best = ((k - 1) / period) % n;
                        (0..n)
                            .map(|i| {
                                let u: f64 = self.loss_rng.random();
                                if i == best {
                                    scale * (1.0 - gap) * u
                                } else {
                                    scale * u
                                }
                            })
                            .collect()
                    }
                };
                Arc::new(LossFn::Linear(l))
            }
            Family::AdaptiveLinear { scale } => {
                let target = history.previous.unwrap_or(history.current);
                let j = target
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > target[best] { i } else { best });
                let mut l = vec![0.0; n];
                l[j] = *scale;
                Arc::new(LossFn::Linear(l))
            }
        };
        self.movement = match history.previous {
            Some(prev) => history.current.iter().zip(prev.iter()).map(|(a, b)| a - b).collect(),
            None => vec![0.0; n],
        };
        self.anchor = history.current.clone();
        self.step_noise = None;
        self.aggregate.push(&f);
        self.current = Some((k, f.clone()));
        Ok(f)
    }

    fn current_loss(&self, k: usize) -> Result<&Arc<LossFn>> {
        match &self.current {
            Some((step, f)) if *step == k => Ok(f),
            _ => Err(Error::InvalidConfig(format!("loss for step {k} has not been revealed"))),
        }
    }

    fn lock_kind(&mut self, kind: QueryKind) -> Result<()> {
        match self.kind {
            None => {
                self.kind = Some(kind);
                Ok(())
            }
            Some(k) if k == kind => Ok(()),
            Some(k) => Err(Error::ModeMismatch(format!("environment already serves {k:?} queries, got {kind:?}"))),
        }
    }

    /// `f_k(x)` without noise; measurement only.
    pub fn exact_value(&self, k: usize, x: &[f64]) -> Result<f64> {
        Ok(self.current_loss(k)?.value(x))
    }

    /// `sgn⟨xᵏ − x^{k−1}, x − xᵏ⟩`, zero at the iterate itself.
    fn bias_sign(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .movement
            .iter()
            .zip(x.iter().zip(self.anchor.iter()))
            .map(|(d, (x, a))| d * (x - a))
            .sum();
        if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    /// `f̃_k(x, ξᵏ)`; index 1 draws the step's noise, index 2 reuses it.
    pub fn query_value(&mut self, k: usize, x: &Point, point_index: usize) -> Result<f64> {
        self.lock_kind(QueryKind::Values)?;
        self.spec.geom.check_query(x)?;
        let base = self.current_loss(k)?.value(x);
        let noise = match point_index {
            1 => {
                let xi = self.noise_rng.sample::<f64, _>(StandardNormal);
                self.step_noise = Some(StepNoise { k, xi });
                self.step_noise.clone().unwrap()
            }
            2 => match &self.step_noise {
                Some(s) if s.k == k => s.clone(),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "second reading of step {k} requested before the first"
                    )))
                }
            },
            i => return Err(Error::InvalidConfig(format!("point index must be 1 or 2, got {i}"))),
        };
        let noisy = match self.spec.noise.stochastic {
            StochasticNoise::None => base,
            StochasticNoise::AdditiveGaussian { sd } => base + sd * noise.xi,
            StochasticNoise::Multiplicative { sd } => base * (1.0 + sd * noise.xi),
        };
        let delta = self.spec.noise.delta;
        let bias = match self.spec.noise.policy {
            BiasPolicy::Zero => 0.0,
            BiasPolicy::ConstantSign => delta,
            BiasPolicy::WorstDirection => delta * self.bias_sign(x),
        };
        self.max_bias = self.max_bias.max(bias.abs());
        Ok(noisy + bias)
    }

    /// Noisy gradient `∇f_k(x) + noise + bias` with `‖bias‖_* ≤ δ`.
    pub fn query_gradient(&mut self, k: usize, x: &Point) -> Result<DualVector> {
        self.lock_kind(QueryKind::Gradients)?;
        if !self.spec.geom.contains(x) {
            return Err(Error::InvalidPoint("gradient query outside the feasible set".into()));
        }
        let mut g = self.current_loss(k)?.gradient(x);
        match self.spec.noise.stochastic {
            StochasticNoise::None => {}
            StochasticNoise::AdditiveGaussian { sd } => {
                for v in g.iter_mut() {
                    *v += sd * self.noise_rng.sample::<f64, _>(StandardNormal);
                }
            }
            StochasticNoise::Multiplicative { sd } => {
                let xi = self.noise_rng.sample::<f64, _>(StandardNormal);
                g.iter_mut().for_each(|v| *v *= 1.0 + sd * xi);
            }
        }
        let delta = self.spec.noise.delta;
        let pattern: Option<Vec<f64>> = match self.spec.noise.policy {
            BiasPolicy::Zero => None,
            BiasPolicy::ConstantSign => Some(vec![1.0; g.len()]),
            BiasPolicy::WorstDirection => {
                let signs: Vec<f64> = self
                    .movement
                    .iter()
                    .map(|d| if *d > 0.0 { 1.0 } else if *d < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                Some(if signs.iter().all(|s| *s == 0.0) { vec![1.0; g.len()] } else { signs })
            }
        };
        if let Some(v) = pattern {
            if delta > 0.0 {
                let scale = delta / self.spec.geom.dual_norm(&v);
                g.iter_mut().zip(&v).for_each(|(g, v)| *g += scale * v);
                let bias: Vec<f64> = v.iter().map(|v| scale * v).collect();
                self.max_bias = self.max_bias.max(self.spec.geom.dual_norm(&bias));
            }
        }
        Ok(DualVector::new(g))
    }
}

impl ValueOracle for OnlineEnvironment {
    fn query_value(&mut self, k: usize, x: &Point, point_index: usize) -> Result<f64> {
        OnlineEnvironment::query_value(self, k, x, point_index)
    }
}

/// Monte-Carlo estimate of `E‖∇f̃‖_*²` from a fresh environment built with `seed`,
/// queried at random feasible points over `samples` steps.
pub fn estimate_gradient_second_moment(spec: &EnvironmentSpec, samples: usize, seed: u64) -> Result<f64> {
    let mut env = spec.build(seed);
    let mut rng = stream(derive_seed(seed, 1, SALT_LOSSES));
    let mut total = 0.0;
    let mut prev: Option<Point> = None;
    for k in 1..=samples {
        let x = spec.geom.sample_point(&mut rng);
        env.reveal(k, &History { current: &x, previous: prev.as_ref() })?;
        let g = env.query_gradient(k, &x)?;
        let norm = spec.geom.dual_norm(&g);
        total += norm * norm;
        prev = Some(x);
    }
    Ok(total / samples.max(1) as f64)
}

/// Parses a loss matrix: one step per line, whitespace-separated decimals, `#` comments.
pub fn parse_loss_script(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse { line: idx + 1, message: format!("{tok:?}: {e}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: idx + 1, message: "non-finite loss".into() });
        }
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, message: "loss script contains no rows".into() });
    }
    Ok(rows)
}

pub fn load_loss_script(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading loss script {}: {e}", path.display())))?;
    parse_loss_script(&text)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{sample_ball, VectorMoments, ScalarMoments};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simplex(n: usize, mu0: f64) -> GeometrySpec {
        GeometrySpec::simplex(n).unwrap().with_mu0(mu0).unwrap()
    }

    fn history(x: &Point) -> History<'_> {
        History { current: x, previous: None }
    }

    #[test]
    fn scripted_expert_losses() {
        let rows = vec![vec![0.2, -0.5], vec![1.0, 0.0]];
        let spec = EnvironmentSpec::new(
            Family::ExpertLinear { scale: 1.0, script: LossScript::Scripted(Arc::new(rows.clone())) },
            simplex(2, 0.0),
            NoiseModel::noiseless(),
        )
        .unwrap();
        let mut env = spec.build(1);
        let x = env.geom().start_point();
        for (k, row) in rows.iter().enumerate() {
            let f = env.reveal(k + 1, &history(&x)).unwrap();
            assert_eq!(*f, LossFn::Linear(row.clone()));
            assert!(row.iter().all(|l| l.abs() <= spec.constants().mr));
            assert_eq!(env.exact_value(k + 1, &[1.0, 0.0]).unwrap(), row[0]);
        }
        assert!(env.reveal(3, &history(&x)).is_err());
    }

    #[test]
    fn fixed_family_reveals_same_loss() {
        let spec = EnvironmentSpec::new(
            Family::FixedQuadratic { center: vec![0.1, 0.2], curvature: vec![1.0, 2.0] },
            GeometrySpec::euclidean_ball(2, 1.0).unwrap(),
            NoiseModel::noiseless(),
        )
        .unwrap();
        let mut env = spec.build(5);
        let x = Point::zeros(2);
        let a = env.reveal(1, &history(&x)).unwrap();
        let b = env.reveal(2, &history(&x)).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!((env.exact_value(2, &[0.0, 0.0]).unwrap() - (0.01 + 2.0 * 0.04)).abs() < 1e-15);
        let g = env.query_gradient(2, &x).unwrap();
        assert!((g[0] - -0.2).abs() < 1e-15 && (g[1] - -0.8).abs() < 1e-15);
    }

    #[test]
    fn adaptive_adversary_targets_heaviest_previous_coordinate() {
        let spec =
            EnvironmentSpec::new(Family::AdaptiveLinear { scale: 2.0 }, simplex(3, 0.0), NoiseModel::noiseless()).unwrap();
        let mut env = spec.build(9);
        let prev = Point::new(vec![0.2, 0.5, 0.3]);
        let cur = Point::new(vec![0.6, 0.2, 0.2]);
        let f = env.reveal(2, &History { current: &cur, previous: Some(&prev) }).unwrap();
        assert_eq!(*f, LossFn::Linear(vec![0.0, 2.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prev = spec.geom.start_point();
        for k in 3..200 {
            let cur = spec.geom.sample_point(&mut rng);
            let f = env.reveal(k, &History { current: &cur, previous: Some(&prev) }).unwrap();
            if let LossFn::Linear(l) = f.as_ref() {
                assert!(l.iter().all(|v| v.abs() <= 2.0));
            }
            prev = cur;
        }
    }

    #[test]
    fn noiseless_reading_is_exact() {
        let spec = EnvironmentSpec::new(
            Family::FixedConvex { center: vec![0.3, 0.7], weight: 1.0, softness: 0.5, offset: -0.2 },
            simplex(2, 0.1),
            NoiseModel::noiseless(),
        )
        .unwrap();
        let mut env = spec.build(1);
        let x = Point::new(vec![0.5, 0.5]);
        env.reveal(1, &history(&x)).unwrap();
        assert_eq!(env.query_value(1, &x, 1).unwrap(), env.exact_value(1, &x).unwrap());
    }

    #[test]
    fn multiplicative_reading_is_unbiased() {
        let spec = EnvironmentSpec::new(
            Family::FixedConvex { center: vec![0.3, 0.7], weight: 1.0, softness: 0.5, offset: 0.0 },
            simplex(2, 0.1),
            NoiseModel { stochastic: StochasticNoise::Multiplicative { sd: 1.0 }, delta: 0.0, policy: BiasPolicy::Zero },
        )
        .unwrap();
        let mut env = spec.build(2);
        let x = Point::new(vec![0.5, 0.5]);
        let probe = Point::new(vec![0.55, 0.52]);
        let mut acc = ScalarMoments::default();
        for k in 1..=100_000 {
            env.reveal(k, &history(&x)).unwrap();
            acc.push(env.query_value(k, &probe, 1).unwrap());
        }
        let truth = env.exact_value(100_000, &probe).unwrap();
        assert!((acc.mean() - truth).abs() <= 4.0 * acc.stderr());
    }

    #[test]
    fn constant_sign_bias_is_exact() {
        let spec = EnvironmentSpec::new(
            Family::FixedQuadratic { center: vec![0.0; 3], curvature: vec![1.0; 3] },
            GeometrySpec::euclidean_ball(3, 1.0).unwrap().with_mu0(0.2).unwrap(),
            NoiseModel { stochastic: StochasticNoise::None, delta: 0.01, policy: BiasPolicy::ConstantSign },
        )
        .unwrap();
        let mut env = spec.build(3);
        let x = Point::new(vec![0.1, 0.2, 0.3]);
        for k in 1..50 {
            env.reveal(k, &history(&x)).unwrap();
            let v = env.query_value(k, &x, 1).unwrap();
            assert!((v - env.exact_value(k, &x).unwrap() - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn second_reading_reuses_noise() {
        let spec = EnvironmentSpec::new(
            Family::FixedQuadratic { center: vec![0.0; 2], curvature: vec![1.0; 2] },
            GeometrySpec::euclidean_ball(2, 1.0).unwrap().with_mu0(0.5).unwrap(),
            NoiseModel { stochastic: StochasticNoise::AdditiveGaussian { sd: 3.0 }, delta: 0.0, policy: BiasPolicy::Zero },
        )
        .unwrap();
        let mut env = spec.build(4);
        let x = Point::new(vec![0.2, 0.1]);
        for k in 1..100 {
            env.reveal(k, &history(&x)).unwrap();
            let a = env.query_value(k, &x, 1).unwrap();
            let b = env.query_value(k, &x, 2).unwrap();
            assert_eq!(a, b);
        }
        env.reveal(100, &history(&x)).unwrap();
        assert!(env.query_value(100, &x, 2).is_err());
    }

    #[test]
    fn query_outside_neighbourhood_fails() {
        let spec = EnvironmentSpec::new(
            Family::ExpertLinear { scale: 1.0, script: LossScript::IidUniform },
            simplex(2, 0.05),
            NoiseModel::noiseless(),
        )
        .unwrap();
        let mut env = spec.build(1);
        let x = Point::new(vec![0.5, 0.5]);
        env.reveal(1, &history(&x)).unwrap();
        assert!(matches!(env.query_value(1, &Point::new(vec![0.7, 0.5]), 1), Err(Error::DomainViolation { .. })));
    }

    #[test]
    fn gradient_mode_lock() {
        let spec = EnvironmentSpec::new(Family::AdaptiveLinear { scale: 1.0 }, simplex(2, 0.1), NoiseModel::noiseless())
            .unwrap();
        let mut env = spec.build(1);
        let x = Point::new(vec![0.5, 0.5]);
        env.reveal(1, &history(&x)).unwrap();
        env.query_gradient(1, &x).unwrap();
        assert!(matches!(env.query_value(1, &x, 1), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn example_one_gradient_readings() {
        let n = 4;
        let rows = vec![vec![0.3, -0.2, 0.9, 0.0]; 100_000];
        let spec = EnvironmentSpec::new(
            Family::ExpertLinear { scale: 1.0, script: LossScript::Scripted(Arc::new(rows)) },
            simplex(n, 0.0),
            NoiseModel { stochastic: StochasticNoise::AdditiveGaussian { sd: 1.0 }, delta: 0.0, policy: BiasPolicy::Zero },
        )
        .unwrap();
        let mut env = spec.build(6);
        let x = env.geom().start_point();
        let mut acc = VectorMoments::new(n);
        for k in 1..=100_000 {
            env.reveal(k, &history(&x)).unwrap();
            acc.push(env.query_gradient(k, &x).unwrap().coords());
        }
        for ((m, se), l) in acc.mean().iter().zip(acc.stderr()).zip([0.3, -0.2, 0.9, 0.0]) {
            assert!((m - l).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn gradient_bias_bounded_in_dual_norm() {
        for policy in [BiasPolicy::ConstantSign, BiasPolicy::WorstDirection] {
            let spec = EnvironmentSpec::new(
                Family::ExpertLinear { scale: 1.0, script: LossScript::IidUniform },
                simplex(5, 0.0),
                NoiseModel { stochastic: StochasticNoise::None, delta: 0.3, policy },
            )
            .unwrap();
            let mut env = spec.build(8);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut prev = spec.geom.start_point();
            for k in 1..500 {
                let x = spec.geom.sample_point(&mut rng);
                let f = env.reveal(k, &History { current: &x, previous: Some(&prev) }).unwrap();
                let g = env.query_gradient(k, &x).unwrap();
                let exact = f.gradient(&x);
                let bias: Vec<f64> = g.iter().zip(&exact).map(|(a, b)| a - b).collect();
                assert!(spec.geom.dual_norm(&bias) <= 0.3 + 1e-15);
                prev = x;
            }
            assert!(env.max_bias() <= 0.3 + 1e-15);
        }
    }

    #[test]
    fn declared_constants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let specs = vec![
            EnvironmentSpec::new(
                Family::FixedConvex { center: vec![0.5, -0.2, 0.1], weight: 0.7, softness: 0.4, offset: -1.0 },
                GeometrySpec::euclidean_ball(3, 1.5).unwrap().with_mu0(0.3).unwrap(),
                NoiseModel::noiseless(),
            )
            .unwrap(),
            EnvironmentSpec::new(
                Family::FixedQuadratic { center: vec![0.2, 0.3, 0.5], curvature: vec![0.5, 1.0, 2.0] },
                GeometrySpec::simplex(3).unwrap().with_mu0(0.2).unwrap(),
                NoiseModel::noiseless(),
            )
            .unwrap(),
            EnvironmentSpec::new(
                Family::FixedQuadratic { center: vec![0.1, 0.0, -0.3], curvature: vec![1.0, 1.0, 3.0] },
                GeometrySpec::l1_ball(3).unwrap().with_mu0(0.1).unwrap(),
                NoiseModel::noiseless(),
            )
            .unwrap(),
        ];
        for spec in specs {
            let c = spec.constants();
            let f = spec.build(0).fixed.clone().unwrap();
            let mu0 = spec.geom.mu0();
            let sample = |rng: &mut ChaCha8Rng| {
                let p = spec.geom.sample_point(rng);
                let u = sample_ball(rng, 3);
                p.iter().zip(u).map(|(p, u)| p + mu0 * u).collect::<Vec<f64>>()
            };
            for _ in 0..10_000 {
                let x = sample(&mut rng);
                let y = sample(&mut rng);
                let d = dist_sq(&x, &y).sqrt();
                assert!((f.value(&x) - f.value(&y)).abs() <= c.m2 * d + 1e-12);
                let gx = f.gradient(&x);
                let gy = f.gradient(&y);
                assert!(dist_sq(&gx, &gy).sqrt() <= c.l2 * d + 1e-12);
                // strong convexity: f(y) ≥ f(x) + ⟨∇f(x), y − x⟩ + γ/2‖y − x‖²
                let lin: f64 = gx.iter().zip(y.iter().zip(&x)).map(|(g, (a, b))| g * (a - b)).sum();
                assert!(f.value(&y) >= f.value(&x) + lin + 0.5 * c.gamma2 * d * d - 1e-12);
                assert!(f.value(&x).abs() <= c.b + 1e-12);
            }
        }
    }

    #[test]
    fn reveal_ignores_noise_stream() {
        let spec = EnvironmentSpec::new(
            Family::ExpertLinear { scale: 1.0, script: LossScript::DriftingBest { gap: 0.3, period: 7 } },
            simplex(4, 0.2),
            NoiseModel { stochastic: StochasticNoise::AdditiveGaussian { sd: 1.0 }, delta: 0.01, policy: BiasPolicy::WorstDirection },
        )
        .unwrap();
        let mut a = spec.build(11);
        let mut b = spec.build(11);
        let x = spec.geom.start_point();
        for k in 1..100 {
            let fa = a.reveal(k, &history(&x)).unwrap();
            let fb = b.reveal(k, &history(&x)).unwrap();
            assert_eq!(fa, fb);
            // only `a` consumes noise
            for _ in 0..(k % 3) {
                a.query_value(k, &x, 1).unwrap();
            }
        }
    }

    #[test]
    fn worst_direction_two_point_bias_is_opposed() {
        let spec = EnvironmentSpec::new(
            Family::FixedQuadratic { center: vec![0.0; 2], curvature: vec![1.0; 2] },
            GeometrySpec::euclidean_ball(2, 1.0).unwrap().with_mu0(0.1).unwrap(),
            NoiseModel { stochastic: StochasticNoise::None, delta: 0.05, policy: BiasPolicy::WorstDirection },
        )
        .unwrap();
        let mut env = spec.build(1);
        let prev = Point::new(vec![0.0, 0.0]);
        let cur = Point::new(vec![0.1, 0.0]);
        env.reveal(2, &History { current: &cur, previous: Some(&prev) }).unwrap();
        let probe = Point::new(vec![0.15, 0.0]);
        let up = env.query_value(2, &probe, 1).unwrap() - env.exact_value(2, &probe).unwrap();
        let base = env.query_value(2, &cur, 2).unwrap() - env.exact_value(2, &cur).unwrap();
        assert!((up - 0.05).abs() < 1e-15 && base.abs() < 1e-15);
        let back = Point::new(vec![0.05, 0.0]);
        let down = env.query_value(2, &back, 1).unwrap() - env.exact_value(2, &back).unwrap();
        assert!((down + 0.05).abs() < 1e-15);
        assert_eq!(env.max_bias(), 0.05);
    }

    #[test]
    fn loss_script_parsing() {
        let rows = parse_loss_script("# header\n0.1 0.2\n\n-1 3e-1  # trailing\n").unwrap();
        assert_eq!(rows, vec![vec![0.1, 0.2], vec![-1.0, 0.3]]);
        assert!(matches!(parse_loss_script("0.1 0.2\n0.3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_loss_script("0.1 x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_loss_script("# only comments\n").is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let g = simplex(3, 0.0);
        assert!(EnvironmentSpec::new(Family::AdaptiveLinear { scale: -1.0 }, g.clone(), NoiseModel::noiseless()).is_err());
        assert!(EnvironmentSpec::new(
            Family::FixedQuadratic { center: vec![0.0; 2], curvature: vec![1.0; 3] },
            g.clone(),
            NoiseModel::noiseless()
        )
        .is_err());
        let bad_noise = NoiseModel { stochastic: StochasticNoise::None, delta: -0.1, policy: BiasPolicy::ConstantSign };
        assert!(EnvironmentSpec::new(Family::AdaptiveLinear { scale: 1.0 }, g, bad_noise).is_err());
    }
}
