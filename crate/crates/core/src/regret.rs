//! Pseudo-regret measurement.
//!
//! `Regret_N = (1/N) Σ f_k(xᵏ) − min_{x∈Q} (1/N) Σ f_k(x)`, evaluated with the
//! exact losses recorded by the environment, never with noisy readings.

use rayon::prelude::*;

use crate::environments::{EnvironmentSpec, LossAggregate};
use crate::error::{Error, Result};
use crate::geometry::{lp_norm, GeometrySpec, Point};
use crate::rng::{derive_seed, stream, SALT_REPLICA, SALT_SOLVER};
use crate::solver::{average_iterate, run_online, RunRecord, SolverConfig};

/// Steps allowed to the numerical comparator search.
pub const HINDSIGHT_STEPS: usize = 100_000;
/// Frank-Wolfe gap that certifies the numerical comparator.
pub const HINDSIGHT_TOL: f64 = 1e-6;

/// Minimizer of the average loss over `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparator {
    pub point: Point,
    /// `(1/N) Σ f_k(x⋆)`.
    pub value: f64,
    /// Frank-Wolfe gap `max_{s∈Q} ⟨∇F(x⋆), x⋆ − s⟩ ≥ F(x⋆) − min F`.
    pub residual: f64,
    pub certified: bool,
}

fn fw_gap(agg: &LossAggregate, geom: &GeometrySpec, x: &[f64]) -> f64 {
    let g = agg.average_gradient(x);
    let s = geom.linear_minimizer(&g);
    g.iter().zip(x.iter().zip(s.iter())).map(|(g, (x, s))| g * (x - s)).sum::<f64>().max(0.0)
}

/// `argmin_{x∈Q} (1/N) Σ f_k(x)`: closed form for linear sequences, otherwise
/// projected gradient descent with step `1/L` certified by the Frank-Wolfe gap.
pub fn hindsight_optimum(agg: &LossAggregate, geom: &GeometrySpec) -> Result<Comparator> {
    if agg.dim() != geom.n() {
        return Err(Error::DimensionMismatch { expected: geom.n(), got: agg.dim() });
    }
    if agg.is_linear() {
        let point = geom.linear_minimizer(&agg.average_linear());
        let value = agg.average_loss(&point);
        return Ok(Comparator { point, value, residual: 0.0, certified: true });
    }
    let smooth = agg.smoothness();
    let step = if smooth > 0.0 { 1.0 / smooth } else { 1.0 };
    let mut x = geom.project(&geom.start_point());
    let mut gap = fw_gap(agg, geom, &x);
    for it in 0..HINDSIGHT_STEPS {
        if gap <= HINDSIGHT_TOL {
            break;
        }
        let g = agg.average_gradient(&x);
        let moved: Vec<f64> = x.iter().zip(&g).map(|(x, g)| x - step * g).collect();
        x = geom.project(&moved);
        if it % 16 == 15 {
            gap = fw_gap(agg, geom, &x);
        }
    }
    gap = fw_gap(agg, geom, &x);
    let value = agg.average_loss(&x);
    Ok(Comparator { point: x, value, residual: gap, certified: gap <= HINDSIGHT_TOL })
}

/// `(1/N) Σ f_k(xᵏ) − (1/N) Σ f_k(u)`.
pub fn pseudo_regret(run: &RunRecord, comparator: &Point) -> f64 {
    run.average_loss() - run.aggregate.average_loss(comparator)
}

/// `M R √(2/N) + σ`.
pub fn convex_bound(m: f64, r: f64, horizon: usize, sigma: f64) -> f64 {
    m * r * (2.0 / horizon as f64).sqrt() + sigma
}

/// `M²(1 + ln N)/(2γ₂N) + σ`.
pub fn strongly_convex_bound(m2: f64, gamma2: f64, horizon: usize, sigma: f64) -> f64 {
    let n = horizon as f64;
    m2 * (1.0 + n.ln()) / (2.0 * gamma2 * n) + sigma
}

/// One Monte-Carlo cell: an environment blueprint, a solver configuration and the bound to test.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub env: EnvironmentSpec,
    pub solver: SolverConfig,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaOutcome {
    pub index: usize,
    pub seed: u64,
    pub regret: f64,
    pub average_loss: f64,
    pub comparator: Comparator,
    /// `f̄(x̄^N) − f̄(x⋆)` for the averaged iterate.
    pub average_iterate_gap: f64,
    /// `‖x^N − x⋆‖₂`.
    pub last_distance: f64,
    /// `‖x̄^N − x⋆‖₂`.
    pub average_distance: f64,
    pub mean_sq_dual_norm: f64,
    pub max_bias: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    pub replicas: Vec<ReplicaOutcome>,
    pub mean: f64,
    pub stderr: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub bound: f64,
    /// `mean + 2·stderr ≤ bound`.
    pub bound_satisfied: bool,
}

impl RegretReport {
    pub fn all_certified(&self) -> bool {
        self.replicas.iter().all(|r| r.comparator.certified)
    }
}

/// Runs replica `index` of `spec` under `master_seed`.
pub fn run_replica(spec: &ExperimentSpec, index: usize, master_seed: u64) -> Result<ReplicaOutcome> {
    let seed = derive_seed(master_seed, index as u64, SALT_REPLICA);
    let env = spec.env.build(seed);
    let mut rng = stream(derive_seed(seed, 0, SALT_SOLVER));
    let run = run_online(env, &spec.solver, &mut rng)?;
    let comparator = hindsight_optimum(&run.aggregate, &spec.solver.geom)?;
    let avg = average_iterate(&run);
    let regret = pseudo_regret(&run, &comparator.point);
    let dist = |x: &[f64]| lp_norm(&x.iter().zip(comparator.point.iter()).map(|(a, b)| a - b).collect::<Vec<_>>(), 2.0);
    Ok(ReplicaOutcome {
        index,
        seed,
        regret,
        average_loss: run.average_loss(),
        average_iterate_gap: run.aggregate.average_loss(&avg) - comparator.value,
        last_distance: dist(&run.last_iterate),
        average_distance: dist(&avg),
        mean_sq_dual_norm: run.mean_sq_dual_norm,
        max_bias: run.max_bias,
        wall_ms: run.wall.as_secs_f64() * 1e3,
        comparator,
    })
}

/// Mean, standard error and quantiles of the pseudo-regret over `replicas` seeded runs.
/// Replicas run on a pool of `jobs` workers; results are ordered by replica index.
pub fn monte_carlo_regret(spec: &ExperimentSpec, replicas: usize, master_seed: u64, jobs: usize) -> Result<RegretReport> {
    if replicas < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 replicas, got {replicas}")));
    }
    spec.env.validate()?;
    spec.solver.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let outcomes: Vec<ReplicaOutcome> =
        pool.install(|| (0..replicas).into_par_iter().map(|i| run_replica(spec, i, master_seed)).collect::<Result<_>>())?;
    Ok(summarize(outcomes, spec.bound))
}

/// Aggregates replica outcomes (a deterministic fold in index order).
pub fn summarize(replicas: Vec<ReplicaOutcome>, bound: f64) -> RegretReport {
    let values: Vec<f64> = replicas.iter().map(|r| r.regret).collect();
    let (mean, stderr) = mean_stderr(&values);
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    RegretReport {
        q05: quantile(&sorted, 0.05),
        q50: quantile(&sorted, 0.50),
        q95: quantile(&sorted, 0.95),
        bound_satisfied: mean + 2.0 * stderr <= bound,
        replicas,
        mean,
        stderr,
        bound,
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares slope of `log y` on `log x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub used: usize,
    /// Points dropped because their regret was not positive.
    pub excluded: Vec<(f64, f64)>,
}

/// Ordinary least squares of `ys` on `xs`; returns `(slope, slope stderr, intercept)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if xs.len() > 2 {
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, stderr, intercept)
}

/// Log-log rate of `(N, mean regret)` pairs; needs ≥ 4 positive points spanning ≥ 2 decades.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    let (kept, excluded): (Vec<(f64, f64)>, Vec<(f64, f64)>) =
        points.iter().copied().partition(|(n, r)| *r > 0.0 && *n > 0.0 && r.is_finite());
    if kept.len() < 4 {
        return Err(Error::InvalidConfig(format!(
            "rate fit needs at least 4 positive points, got {} ({} excluded)",
            kept.len(),
            excluded.len()
        )));
    }
    let lo = kept.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = kept.iter().map(|p| p.0).fold(0.0, f64::max);
    if (hi / lo).log10() < 2.0 - 1e-9 {
        return Err(Error::InvalidConfig(format!("rate fit needs 2 decades of N, got [{lo}, {hi}]")));
    }
    let xs: Vec<f64> = kept.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.1.ln()).collect();
    let (slope, stderr, intercept) = least_squares(&xs, &ys);
    Ok(RateFit { slope, stderr, intercept, used: kept.len(), excluded })
}
