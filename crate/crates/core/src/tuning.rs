//! Parameter selection for the bandit methods.
//!
//! Given a target accuracy `ε` and class constants, the chain picks the
//! smoothing radius `μ`, the admissible bias `δ`, a bound `M²` on the
//! estimator's second moment, the bias budget `σ`, the step size and the
//! horizon `N` so that the expected regret after `N` steps is at most `ε`:
//! `σ ≤ ε/4`, the optimization term `≤ ε/4`, and the smoothing error `≤ ε/2`.

use std::fmt;

use crate::environments::FunctionClassConstants;
use crate::error::{Error, Result};
use crate::estimators::QueryPoints;
use crate::geometry::GeometrySpec;
use crate::solver::StepSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Convex,
    StronglyConvex,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Convex => "convex",
            Regime::StronglyConvex => "strongly-convex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convex" => Ok(Regime::Convex),
            "strongly-convex" => Ok(Regime::StronglyConvex),
            other => Err(Error::InvalidConfig(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningInput {
    pub epsilon: f64,
    pub n: usize,
    /// Dual exponent.
    pub q: f64,
    pub m: QueryPoints,
    pub r2: f64,
    pub constants: FunctionClassConstants,
    pub regime: Regime,
    /// Upper cap on `μ` (the domain margin), if any.
    pub mu0: Option<f64>,
}

impl TuningInput {
    pub fn from_geometry(
        geom: &GeometrySpec,
        epsilon: f64,
        m: QueryPoints,
        constants: FunctionClassConstants,
        regime: Regime,
    ) -> Self {
        Self {
            epsilon,
            n: geom.n(),
            q: geom.q(),
            m,
            r2: geom.r2(),
            constants,
            regime,
            mu0: Some(geom.mu0()),
        }
    }

    pub fn r(&self) -> f64 {
        self.r2.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.constants;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        if !(self.q >= 2.0) {
            return Err(Error::InvalidConfig(format!("dual exponent q must be at least 2, got {}", self.q)));
        }
        if !(self.r2 > 0.0 && self.r2.is_finite()) {
            return Err(Error::InvalidConfig(format!("R2 must be positive, got {}", self.r2)));
        }
        c.validate()?;
        if let Some(mu0) = self.mu0 {
            if !(mu0 > 0.0) {
                return Err(Error::Untunable(format!("mu0 = {mu0} leaves no room for smoothing")));
            }
        }
        if c.m2.is_infinite() && c.l2.is_infinite() {
            return Err(Error::Untunable("both M2 and L2 are infinite".into()));
        }
        match self.m {
            QueryPoints::One => {
                if !c.b.is_finite() {
                    return Err(Error::Untunable("one-point feedback needs a finite B".into()));
                }
            }
            QueryPoints::Two => {
                if !(c.m2.is_finite() && c.l2.is_finite()) {
                    return Err(Error::Untunable("two-point feedback needs finite M2 and L2".into()));
                }
                if !(c.m2 > 0.0 && c.l2 > 0.0) {
                    return Err(Error::Untunable("two-point feedback needs positive M2 and L2".into()));
                }
                if !(self.q == 2.0 || self.q.is_infinite()) {
                    return Err(Error::UnsupportedCell(format!(
                        "two-point bounds are available for q = 2 and q = inf only, got q = {}",
                        self.q
                    )));
                }
            }
        }
        if self.regime == Regime::StronglyConvex {
            if !(c.gamma2 > 0.0) {
                return Err(Error::InvalidConfig("strongly convex regime needs gamma2 > 0".into()));
            }
            if self.q != 2.0 {
                return Err(Error::InvalidConfig("strongly convex regime needs q = 2".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningOutput {
    pub mu: f64,
    pub delta_max: f64,
    pub m2_bound: f64,
    /// Whether the simplified two-point bound was applicable.
    pub simplified: bool,
    pub sigma_budget: f64,
    pub schedule: StepSchedule,
    pub n_steps: usize,
    pub cell: TableOrder,
}

/// Complexity order of a table cell: `N = Õ(constants · n^{n_exponent} · ε^{eps_exponent})`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableOrder {
    pub table: u8,
    pub row: u8,
    pub conditions: &'static str,
    pub eps_exponent: f64,
    pub n_exponent: f64,
    pub formula: &'static str,
}

impl fmt::Display for TableOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "table {} row {} (conditions {}): N = O~({}), eps^{}, n^{}",
            self.table, self.row, self.conditions, self.formula, self.eps_exponent, self.n_exponent
        )
    }
}

fn smoothing_branch(inp: &TuningInput) -> f64 {
    let c = &inp.constants;
    let lipschitz = if c.m2.is_finite() && c.m2 > 0.0 { inp.epsilon / (2.0 * c.m2) } else { 0.0 };
    let smooth = if c.l2.is_finite() && c.l2 > 0.0 { (inp.epsilon / c.l2).sqrt() } else { 0.0 };
    // a zero constant means the corresponding error term vanishes for every μ
    if c.m2 == 0.0 || c.l2 == 0.0 {
        return f64::INFINITY;
    }
    lipschitz.max(smooth)
}

fn two_point_mu_cap(inp: &TuningInput) -> f64 {
    let c = &inp.constants;
    let n = inp.n as f64;
    if inp.q == 2.0 {
        c.m2 / c.l2 * (4.0 / (3.0 * n)).sqrt()
    } else {
        c.m2 / c.l2 * (1.0 / (6.0 * n)).sqrt()
    }
}

/// Largest admissible smoothing radius.
pub fn choose_mu(inp: &TuningInput) -> Result<f64> {
    inp.validate()?;
    let mut mu = smoothing_branch(inp);
    if inp.m == QueryPoints::Two {
        mu = mu.min(two_point_mu_cap(inp));
    }
    if let Some(mu0) = inp.mu0 {
        mu = mu.min(mu0);
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Untunable(format!("no finite positive smoothing radius (mu = {mu})")));
    }
    Ok(mu)
}

fn two_point_delta_cap(inp: &TuningInput, mu: f64) -> f64 {
    let n = inp.n as f64;
    if inp.q == 2.0 {
        inp.constants.m2 * mu / (12.0 * n).sqrt()
    } else {
        inp.constants.m2 * mu / (96.0 * n).sqrt()
    }
}

/// Largest admissible bias level at radius `mu`.
pub fn delta_max(inp: &TuningInput, mu: f64) -> f64 {
    let root_n = (inp.n as f64).sqrt();
    match inp.m {
        QueryPoints::One => inp.epsilon * mu / (8.0 * inp.r() * root_n),
        QueryPoints::Two => (inp.epsilon * mu / (16.0 * inp.r() * root_n)).min(two_point_delta_cap(inp, mu)),
    }
}

/// Whether the simplified two-point bound applies at `(mu, delta)`.
pub fn two_point_preconditions(inp: &TuningInput, mu: f64, delta: f64) -> bool {
    inp.m == QueryPoints::Two
        && inp.constants.l2.is_finite()
        && mu <= smoothing_branch(inp).min(two_point_mu_cap(inp)) * (1.0 + 1e-12)
        && delta <= two_point_delta_cap(inp, mu) * (1.0 + 1e-12)
}

/// Second-moment bound of the three-term two-point display (no preconditions).
pub fn two_point_general_bound(inp: &TuningInput, mu: f64, delta: f64) -> Result<f64> {
    let n = inp.n as f64;
    let c = &inp.constants;
    if inp.q == 2.0 {
        Ok(3.0 * n * c.m2 * c.m2 + 0.75 * n * n * c.l2 * c.l2 * mu * mu + 12.0 * delta * delta * n * n / (mu * mu))
    } else if inp.q.is_infinite() {
        let ln = n.ln();
        Ok(4.0 * ln * c.m2 * c.m2 + 3.0 * n * ln * c.l2 * c.l2 * mu * mu + 48.0 * delta * delta * n * ln / (mu * mu))
    } else {
        Err(Error::UnsupportedCell(format!("two-point bound for q = {}", inp.q)))
    }
}

/// `M²` bound for the estimator at `(mu, delta)`.
pub fn bound_m2(inp: &TuningInput, mu: f64, delta: f64) -> Result<f64> {
    let n = inp.n as f64;
    let q = inp.q;
    match inp.m {
        QueryPoints::One => {
            let b2 = inp.constants.b * inp.constants.b;
            let factor = if q == 2.0 {
                n * n
            } else if q <= 2.0 * n.ln() {
                (q - 1.0) * n.powf(1.0 + 2.0 / q)
            } else {
                4.0 * n * n.ln()
            };
            Ok(factor * b2 / (mu * mu))
        }
        QueryPoints::Two => {
            if two_point_preconditions(inp, mu, delta) {
                let m2 = inp.constants.m2 * inp.constants.m2;
                Ok(if q == 2.0 { 5.0 * n * m2 } else { 5.0 * n.ln() * m2 })
            } else {
                two_point_general_bound(inp, mu, delta)
            }
        }
    }
}

fn horizon_ok(inp: &TuningInput, m2_bound: f64, n: usize) -> bool {
    let nf = n as f64;
    match inp.regime {
        Regime::Convex => m2_bound.sqrt() * inp.r() * (2.0 / nf).sqrt() <= inp.epsilon / 4.0,
        Regime::StronglyConvex => {
            m2_bound / (2.0 * inp.constants.gamma2 * nf) * (1.0 + nf.ln()) <= inp.epsilon / 4.0
        }
    }
}

/// Smallest horizon meeting the optimization budget `ε/4`.
pub fn choose_n(inp: &TuningInput, m2_bound: f64) -> Result<usize> {
    if !(m2_bound >= 0.0 && m2_bound.is_finite()) {
        return Err(Error::Untunable(format!("second-moment bound must be finite, got {m2_bound}")));
    }
    if inp.regime == Regime::StronglyConvex && !(inp.constants.gamma2 > 0.0) {
        return Err(Error::InvalidConfig("strongly convex regime needs gamma2 > 0".into()));
    }
    const LIMIT: usize = 1 << 62;
    let mut hi = match inp.regime {
        Regime::Convex => {
            let guess = (32.0 * m2_bound * inp.r2 / (inp.epsilon * inp.epsilon)).ceil().max(1.0);
            if guess >= LIMIT as f64 {
                return Err(Error::Untunable(format!("horizon {guess:e} is not representable")));
            }
            guess as usize
        }
        Regime::StronglyConvex => 1,
    };
    while !horizon_ok(inp, m2_bound, hi) {
        if hi >= LIMIT {
            return Err(Error::Untunable("horizon search overflowed".into()));
        }
        hi *= 2;
    }
    // the left-hand sides are nonincreasing in N, so bisect for the first feasible N
    let mut lo = 0;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if horizon_ok(inp, m2_bound, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi.max(1))
}

/// Bound on the bias-induced regret term at `(mu, delta)`.
pub fn sigma_budget(inp: &TuningInput, mu: f64, delta: f64) -> f64 {
    let coeff = match inp.m {
        QueryPoints::One => 2.0,
        QueryPoints::Two => 4.0,
    };
    coeff * delta * inp.r() * (inp.n as f64).sqrt() / mu
}

/// Step schedule for horizon `n_steps` with second-moment bound `m2_bound`.
pub fn schedule(inp: &TuningInput, m2_bound: f64, n_steps: usize) -> Result<StepSchedule> {
    match inp.regime {
        Regime::Convex => StepSchedule::constant(inp.r(), m2_bound.sqrt(), n_steps),
        Regime::StronglyConvex => Ok(StepSchedule::StronglyConvex { gamma2: inp.constants.gamma2 }),
    }
}

/// Table cell matching the feedback, regime and the available conditions.
pub fn table_order(inp: &TuningInput) -> Result<TableOrder> {
    let c = &inp.constants;
    let strong = inp.regime == Regime::StronglyConvex;
    if strong && inp.q != 2.0 {
        return Err(Error::UnsupportedCell("strongly convex cells need q = 2".into()));
    }
    if c.m2.is_infinite() && c.l2.is_infinite() {
        return Err(Error::UnsupportedCell("neither condition 6 nor 7 holds".into()));
    }
    let q_term = if inp.q.is_infinite() { 0.0 } else { 2.0 / inp.q };
    let cell = match inp.m {
        QueryPoints::One => {
            let smooth = c.l2.is_finite()
                && (c.m2.is_infinite() || (inp.epsilon / c.l2).sqrt() >= inp.epsilon / (2.0 * c.m2));
            match (smooth, strong) {
                (false, false) => TableOrder {
                    table: 1,
                    row: 1,
                    conditions: "5,6",
                    eps_exponent: -4.0,
                    n_exponent: 1.0 + q_term,
                    formula: "B^2 M2^2 R^2 n^(1+2/q) / eps^4",
                },
                (false, true) => TableOrder {
                    table: 1,
                    row: 1,
                    conditions: "5,6",
                    eps_exponent: -3.0,
                    n_exponent: 2.0,
                    formula: "B^2 M2^2 n^2 / (gamma2 eps^3)",
                },
                (true, false) => TableOrder {
                    table: 1,
                    row: 2,
                    conditions: "5,7",
                    eps_exponent: -3.0,
                    n_exponent: 1.0 + q_term,
                    formula: "B^2 L2 R^2 n^(1+2/q) / eps^3",
                },
                (true, true) => TableOrder {
                    table: 1,
                    row: 2,
                    conditions: "5,7",
                    eps_exponent: -2.0,
                    n_exponent: 2.0,
                    formula: "B^2 L2 n^2 / (gamma2 eps^2)",
                },
            }
        }
        QueryPoints::Two => {
            if c.m2.is_infinite() {
                return Err(Error::UnsupportedCell("two-point cells need condition 6".into()));
            }
            match (c.l2.is_finite(), strong) {
                (false, false) => TableOrder {
                    table: 2,
                    row: 1,
                    conditions: "5,6",
                    eps_exponent: -2.0,
                    n_exponent: 2.0,
                    formula: "Mp^2 R^2 n^2 / eps^2",
                },
                (false, true) => TableOrder {
                    table: 2,
                    row: 1,
                    conditions: "5,6",
                    eps_exponent: -1.0,
                    n_exponent: 2.0,
                    formula: "M2^2 n^2 / (gamma2 eps)",
                },
                (true, false) => TableOrder {
                    table: 2,
                    row: 2,
                    conditions: "5,6,7",
                    eps_exponent: -2.0,
                    n_exponent: q_term,
                    formula: "M2^2 R^2 n^(2/q) / eps^2",
                },
                (true, true) => TableOrder {
                    table: 2,
                    row: 2,
                    conditions: "5,6,7",
                    eps_exponent: -1.0,
                    n_exponent: 1.0,
                    formula: "M2^2 n / (gamma2 eps)",
                },
            }
        }
    };
    Ok(cell)
}

/// Runs the whole chain.
pub fn tune(inp: &TuningInput) -> Result<TuningOutput> {
    let mu = choose_mu(inp)?;
    let delta = delta_max(inp, mu);
    let m2_bound = bound_m2(inp, mu, delta)?;
    let n_steps = choose_n(inp, m2_bound)?;
    Ok(TuningOutput {
        mu,
        delta_max: delta,
        m2_bound,
        simplified: two_point_preconditions(inp, mu, delta),
        sigma_budget: sigma_budget(inp, mu, delta),
        schedule: schedule(inp, m2_bound, n_steps)?,
        n_steps,
        cell: table_order(inp)?,
    })
}

/// Re-checks every inequality of the chain at `out`; returns the violated ones.
pub fn chain_violations(inp: &TuningInput, out: &TuningOutput) -> Vec<String> {
    let mut bad = Vec::new();
    let slack = 1.0 + 1e-12;
    let c = &inp.constants;
    let n = inp.n as f64;
    let root_n = n.sqrt();
    let r = inp.r();
    let eps = inp.epsilon;

    if !(out.mu > 0.0) || out.mu > smoothing_branch(inp) * slack {
        bad.push(format!("smoothing radius {} violates the smoothing-error condition", out.mu));
    }
    if let Some(mu0) = inp.mu0 {
        if out.mu > mu0 * slack {
            bad.push(format!("smoothing radius {} exceeds mu0 {mu0}", out.mu));
        }
    }
    let delta_cap = match inp.m {
        QueryPoints::One => eps * out.mu / (8.0 * r * root_n),
        QueryPoints::Two => eps * out.mu / (16.0 * r * root_n),
    };
    if out.delta_max > delta_cap * slack {
        bad.push(format!("delta {} exceeds the sigma-budget cap {delta_cap}", out.delta_max));
    }
    if out.sigma_budget > eps / 4.0 * slack {
        bad.push(format!("sigma {} exceeds eps/4", out.sigma_budget));
    }
    if inp.m == QueryPoints::Two && out.simplified {
        let cap = two_point_mu_cap(inp);
        if out.mu > cap * slack {
            bad.push(format!("mu {} exceeds the two-point cap {cap}", out.mu));
        }
        let dcap = two_point_delta_cap(inp, out.mu);
        if out.delta_max > dcap * slack {
            bad.push(format!("delta {} exceeds the two-point cap {dcap}", out.delta_max));
        }
    }
    match bound_m2(inp, out.mu, out.delta_max) {
        Ok(b) if (b - out.m2_bound).abs() <= 1e-12 * b.abs().max(1.0) => {}
        Ok(b) => bad.push(format!("M2 bound {} differs from {b}", out.m2_bound)),
        Err(e) => bad.push(e.to_string()),
    }
    let nf = out.n_steps as f64;
    let opt = match inp.regime {
        Regime::Convex => out.m2_bound.sqrt() * r * (2.0 / nf).sqrt(),
        Regime::StronglyConvex => out.m2_bound / (2.0 * c.gamma2 * nf) * (1.0 + nf.ln()),
    };
    if opt > eps / 4.0 {
        bad.push(format!("optimization term {opt} exceeds eps/4 at N = {}", out.n_steps));
    }
    if out.n_steps > 1 && horizon_ok(inp, out.m2_bound, out.n_steps - 1) {
        bad.push(format!("N = {} is not minimal", out.n_steps));
    }
    bad
}
