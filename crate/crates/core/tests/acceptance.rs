//! Acceptance criteria A1–A9. Runs as a plain binary (`harness = false`) so
//! that every criterion prints one PASS/FAIL line; exits nonzero on any failure.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zomd::environments::{
    estimate_gradient_second_moment, BiasPolicy, EnvironmentSpec, Family, FunctionClassConstants, History,
    NoiseModel, StochasticNoise,
};
use zomd::estimators::{estimate, sample_sphere, QueryPoints, SmoothingConfig, VectorMoments};
use zomd::geometry::{lp_norm, DualVector, GeometrySpec, Point};
use zomd::regret::{fit_rate, monte_carlo_regret, ExperimentSpec};
use zomd::solver::{Mode, SolverConfig, StepSchedule};
use zomd::tuning::{bound_m2, table_order, tune, two_point_preconditions, Regime, TuningInput};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// `argmin_y ⟨g, y⟩ + KL(y‖x)` over a `step`-grid of the 2-simplex.
fn entropy_step_by_grid(x: &[f64], g: &[f64], step: f64) -> [f64; 3] {
    let ticks = (1.0 / step).round() as usize;
    let xlogy = |y: f64, x: f64| if y > 0.0 { y * (y / x).ln() } else { 0.0 };
    let mut best = (f64::INFINITY, [0.0; 3]);
    for i in 0..=ticks {
        for j in 0..=ticks - i {
            let y = [i as f64 * step, j as f64 * step, (ticks - i - j) as f64 * step];
            let obj: f64 = (0..3).map(|t| g[t] * y[t] + xlogy(y[t], x[t])).sum();
            if obj < best.0 {
                best = (obj, y);
            }
        }
    }
    best.1
}

/// `∇(‖x‖_a² / (2(a−1)))`.
fn la_prox_gradient(x: &[f64], a: f64) -> Vec<f64> {
    let norm: f64 = x.iter().map(|v| v.abs().powf(a)).sum::<f64>().powf(1.0 / a);
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| norm.powf(2.0 - a) * v.signum() * v.abs().powf(a - 1.0) / (a - 1.0)).collect()
}

fn a1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let simplex = GeometrySpec::simplex(3).unwrap();
    let mut worst_l1 = 0.0_f64;
    for _ in 0..20 {
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let x: Vec<f64> = w.iter().map(|v| v / s).collect();
        let g: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let step = simplex.mirror_step(&Point::new(x.clone()), &DualVector::new(g.clone())).unwrap();
        let grid = entropy_step_by_grid(&x, &g, 1e-3);
        let l1: f64 = step.iter().zip(&grid).map(|(a, b)| (a - b).abs()).sum();
        worst_l1 = worst_l1.max(l1);
    }
    let mut worst_residual = 0.0_f64;
    for _ in 0..1000 {
        let n = rng.random_range(3..=30);
        let geom = GeometrySpec::l1_ball(n).unwrap();
        let a = geom.a().unwrap();
        let x = geom.sample_point(&mut rng);
        let scale = rng.random_range(0.01..5.0);
        let g: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let y = geom.mirror_step(&x, &DualVector::new(g.clone())).unwrap();
        // first-order optimality of y: ⟨g + ∇d(y) − ∇d(x), z − y⟩ ≥ 0 for all z in the ℓ₁-ball
        let dx = la_prox_gradient(&x, a);
        let dy = la_prox_gradient(&y, a);
        let h: Vec<f64> = (0..n).map(|i| g[i] + dy[i] - dx[i]).collect();
        let h_inf = h.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let h_dot_y: f64 = h.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let residual = (h_inf + h_dot_y).max(0.0);
        let feasible = lp_norm(&y, 1.0) <= 1.0 + 1e-12;
        worst_residual = worst_residual.max(if feasible { residual } else { f64::INFINITY });
    }
    verdict(
        worst_l1 <= 5e-3 && worst_residual <= 1e-6,
        format!("entropy vs grid max l1 = {worst_l1:.2e} (<= 5e-3); la residual max = {worst_residual:.2e} (<= 1e-6)"),
    )
}

fn a2() -> Verdict {
    let n = 10;
    let geom = GeometrySpec::simplex(n).unwrap();
    let env = EnvironmentSpec::new(
        Family::ExpertLinear { scale: 1.0, script: zomd::environments::LossScript::IidUniform },
        geom.clone(),
        NoiseModel { stochastic: StochasticNoise::AdditiveGaussian { sd: 1.0 }, delta: 0.0, policy: BiasPolicy::Zero },
    )
    .unwrap();
    let m = estimate_gradient_second_moment(&env, 100_000, 21).unwrap().sqrt();
    let r = (n as f64).ln().sqrt();
    let mut ok = true;
    let mut points = Vec::new();
    let mut detail = format!("M = {m:.4}, R = {r:.4};");
    for horizon in [100, 1_000, 10_000, 100_000] {
        let solver =
            SolverConfig::new(geom.clone(), StepSchedule::constant(r, m, horizon).unwrap(), horizon, Mode::FirstOrder, None)
                .unwrap();
        let bound = m * r * (2.0 / horizon as f64).sqrt();
        let spec = ExperimentSpec { env: env.clone(), solver, bound };
        let rep = monte_carlo_regret(&spec, 50, 2024 + horizon as u64, jobs()).unwrap();
        let within = rep.mean <= bound + 2.0 * rep.stderr;
        ok &= within;
        detail.push_str(&format!(" N={horizon}: {:.3e} <= {:.3e}{};", rep.mean, bound, if within { "" } else { " FAIL" }));
        points.push((horizon as f64, rep.mean));
    }
    let fit = fit_rate(&points).unwrap();
    ok &= (fit.slope + 0.5).abs() <= 0.1;
    detail.push_str(&format!(" slope = {:.3} (-0.5 +- 0.1)", fit.slope));
    verdict(ok, detail)
}

fn a3() -> Verdict {
    let n = 5;
    let geom = GeometrySpec::euclidean_ball(n, 1.0).unwrap();
    let env = EnvironmentSpec::new(
        Family::FixedQuadratic { center: vec![0.2; n], curvature: vec![1.0; n] },
        geom.clone(),
        NoiseModel { stochastic: StochasticNoise::AdditiveGaussian { sd: 1.0 }, delta: 0.0, policy: BiasPolicy::Zero },
    )
    .unwrap();
    let gamma2 = 2.0;
    let m2 = env.gradient_moment_bound();
    let mut ok = true;
    let mut points = Vec::new();
    let mut detail = format!("M^2 = {m2:.3}, gamma2 = {gamma2};");
    for horizon in [100, 1_000, 10_000, 100_000] {
        let solver =
            SolverConfig::new(geom.clone(), StepSchedule::StronglyConvex { gamma2 }, horizon, Mode::FirstOrder, None)
                .unwrap();
        let nf = horizon as f64;
        let bound = m2 * (1.0 + nf.ln()) / (2.0 * gamma2 * nf);
        let spec = ExperimentSpec { env: env.clone(), solver, bound };
        let rep = monte_carlo_regret(&spec, 100, 7 + horizon as u64, jobs()).unwrap();
        let within = rep.mean <= bound + 2.0 * rep.stderr;
        ok &= within;
        detail.push_str(&format!(" N={horizon}: {:.3e} <= {:.3e}{};", rep.mean, bound, if within { "" } else { " FAIL" }));
        points.push((nf, rep.mean));
    }
    let fit = fit_rate(&points).unwrap();
    ok &= fit.slope <= -0.85;
    detail.push_str(&format!(" slope = {:.3} (<= -0.85)", fit.slope));
    verdict(ok, detail)
}

/// Ball of radius 1 in R⁵ and `f(x) = ‖x − c‖₂²` with additive reading noise.
fn quadratic_env(geom: GeometrySpec, center: Vec<f64>, sd: f64) -> EnvironmentSpec {
    let n = geom.n();
    EnvironmentSpec::new(
        Family::FixedQuadratic { center, curvature: vec![1.0; n] },
        geom,
        NoiseModel { stochastic: StochasticNoise::AdditiveGaussian { sd }, delta: 0.0, policy: BiasPolicy::Zero },
    )
    .unwrap()
}

/// Empirical mean and mean squared dual norm of the estimator at `x`.
fn sample_estimator(env: &EnvironmentSpec, x: &Point, mu: f64, m: QueryPoints, samples: usize, seed: u64) -> (VectorMoments, f64) {
    let geom = &env.geom;
    let cfg = SmoothingConfig::new(geom, mu, m).unwrap();
    let mut oracle = env.build(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut moments = VectorMoments::new(geom.n());
    let mut sq = 0.0;
    for k in 1..=samples {
        oracle.reveal(k, &History { current: x, previous: None }).unwrap();
        let e = sample_sphere(&mut rng, geom.n());
        let est = estimate(&mut oracle, k, x, &cfg, &e).unwrap();
        moments.push(est.g.coords());
        let d = geom.dual_norm(&est.g);
        sq += d * d;
    }
    (moments, sq / samples as f64)
}

fn a4() -> Verdict {
    let n = 5;
    let mu = 0.1;
    let center = vec![0.3, -0.2, 0.1, 0.0, 0.25];
    let geom = GeometrySpec::euclidean_ball(n, 1.0).unwrap().with_mu0(mu).unwrap();
    let env = quadratic_env(geom, center.clone(), 0.1);
    let x = Point::new(vec![-0.1, 0.4, 0.2, -0.3, 0.1]);
    let grad: Vec<f64> = x.iter().zip(&center).map(|(x, c)| 2.0 * (x - c)).collect();
    let mut ok = true;
    let mut detail = String::new();
    for (m, seed) in [(QueryPoints::One, 41), (QueryPoints::Two, 42)] {
        let (moments, _) = sample_estimator(&env, &x, mu, m, 200_000, seed);
        let mean = moments.mean();
        let diff = lp_norm(&mean.iter().zip(&grad).map(|(a, b)| a - b).collect::<Vec<_>>(), 2.0);
        let tol = 4.0 * moments.stderr_norm();
        ok &= diff <= tol;
        detail.push_str(&format!(" m={}: |mean - grad| = {diff:.3e} <= {tol:.3e};", m.count()));
    }
    verdict(ok, detail.trim().to_string())
}

fn a5() -> Verdict {
    let n = 5;
    let nf = n as f64;
    let mu = 0.1;
    let sd = 0.1;
    let mut ok = true;
    let mut detail = String::new();

    // q = 2: unit ball, c = 0.2·1, queries reach radius 1 + μ
    let ball = GeometrySpec::euclidean_ball(n, 1.0).unwrap().with_mu0(mu).unwrap();
    let c_ball = vec![0.2; n];
    let d_ball = lp_norm(&c_ball, 2.0) + 1.0 + mu;
    // q = ∞: simplex, c at the barycentre; farthest point of Q is a vertex
    let simplex = GeometrySpec::simplex(n).unwrap().with_mu0(mu).unwrap();
    let c_simplex = vec![1.0 / nf; n];
    let d_simplex = (1.0 - 1.0 / nf).sqrt() + mu;

    for (geom, center, d, label) in [(ball, c_ball, d_ball, "q=2"), (simplex, c_simplex, d_simplex, "q=inf")] {
        let q = geom.q();
        let b = (d.powi(4) + sd * sd).sqrt();
        let m2 = 2.0 * d;
        let l2 = 2.0;
        let x = geom.start_point();
        let env = quadratic_env(geom.clone(), center, sd);
        let declared = FunctionClassConstants { m2, mr: m2, r: 2.0, l2, gamma2: 2.0, b };
        let derived = env.constants();
        ok &= derived.b <= b * (1.0 + 1e-12) && derived.m2 <= m2 * (1.0 + 1e-12);

        let one_point = if q == 2.0 { nf * nf * b * b / (mu * mu) } else { 4.0 * nf * nf.ln() * b * b / (mu * mu) };
        let two_point = if q == 2.0 { 5.0 * nf * m2 * m2 } else { 5.0 * nf.ln() * m2 * m2 };
        for (m, reference, seed) in [(QueryPoints::One, one_point, 51), (QueryPoints::Two, two_point, 52)] {
            let inp = TuningInput {
                epsilon: 0.5,
                n,
                q,
                m,
                r2: geom.r2(),
                constants: declared,
                regime: Regime::Convex,
                mu0: Some(mu),
            };
            if m == QueryPoints::Two && !two_point_preconditions(&inp, mu, 0.0) {
                ok = false;
                detail.push_str(&format!(" {label} m=2: precondition fails;"));
                continue;
            }
            let library = bound_m2(&inp, mu, 0.0).unwrap();
            let agree = (library - reference).abs() <= 1e-9 * reference;
            let (_, second) = sample_estimator(&env, &x, mu, m, 100_000, seed);
            let within = second <= 1.1 * reference;
            ok &= agree && within;
            detail.push_str(&format!(
                " {label} m={}: E|g|^2 = {second:.3e} <= 1.1 x {reference:.3e}{};",
                m.count(),
                if agree { "" } else { " (library bound disagrees)" }
            ));
        }
    }
    verdict(ok, detail.trim().to_string())
}

/// Tuned bandit run against the worst-direction adversary at `δ = δ_max`.
fn bias_budget_cell(m: QueryPoints, epsilon: f64, declared: FunctionClassConstants) -> (bool, String) {
    let n = 5;
    let r2 = (n as f64).ln();
    let radius = (2.0 * r2).sqrt();
    let inp = TuningInput { epsilon, n, q: 2.0, m, r2, constants: declared, regime: Regime::Convex, mu0: None };
    let out = tune(&inp).unwrap();
    let geom = GeometrySpec::euclidean_ball(n, radius).unwrap().with_mu0(out.mu).unwrap();
    let env = EnvironmentSpec::new(
        Family::FixedConvex { center: vec![0.2; n], weight: 0.6, softness: 0.6, offset: -1.0 },
        geom.clone(),
        NoiseModel {
            stochastic: StochasticNoise::AdditiveGaussian { sd: 0.5 },
            delta: out.delta_max,
            policy: BiasPolicy::WorstDirection,
        },
    )
    .unwrap();
    // the environment must belong to the declared class on Q_{μ₀}
    let actual = env.constants();
    let mut in_class = actual.m2 <= declared.m2 && actual.l2 <= declared.l2;
    if m == QueryPoints::One {
        in_class &= actual.b <= declared.b;
    }
    let smoothing = SmoothingConfig::new(&geom, out.mu, m).unwrap();
    let solver = SolverConfig::new(geom, out.schedule, out.n_steps, Mode::Bandit(m), Some(smoothing)).unwrap();
    let spec = ExperimentSpec { env, solver, bound: epsilon };
    let rep = monte_carlo_regret(&spec, 20, 606 + m.count() as u64, jobs()).unwrap();
    let hits = rep.replicas.iter().filter(|r| r.regret <= epsilon).count();
    let worst = rep.replicas.iter().map(|r| r.regret).fold(f64::NEG_INFINITY, f64::max);
    let ok = in_class && hits >= 18;
    (
        ok,
        format!(
            "m={} eps={epsilon}: mu={:.4} delta={:.3e} N={} {hits}/20 <= eps (worst {worst:.3e}){};",
            m.count(),
            out.mu,
            out.delta_max,
            out.n_steps,
            if in_class { "" } else { " environment outside declared class" }
        ),
    )
}

fn a6() -> Verdict {
    let one = FunctionClassConstants { m2: 1.0, mr: 1.0, r: 2.0, l2: f64::INFINITY, gamma2: 0.0, b: 1.0 };
    let two = FunctionClassConstants { m2: 1.0, mr: 1.0, r: 2.0, l2: 1.0, gamma2: 0.0, b: 1.0 };
    let (ok1, d1) = bias_budget_cell(QueryPoints::One, 0.5, one);
    let (ok2, d2) = bias_budget_cell(QueryPoints::Two, 0.25, two);
    verdict(ok1 && ok2, format!("{d1} {d2}"))
}

fn a7() -> Verdict {
    let n = 5;
    let r2 = (n as f64).ln();
    let nonsmooth = FunctionClassConstants { m2: 1.0, mr: 1.0, r: 2.0, l2: f64::INFINITY, gamma2: 1.0, b: 1.0 };
    let smooth = FunctionClassConstants { l2: 1.0, ..nonsmooth };
    // (m, regime, constants, expected ε-exponent of N)
    let cells = [
        (QueryPoints::One, Regime::Convex, nonsmooth, -4.0),
        (QueryPoints::One, Regime::StronglyConvex, nonsmooth, -3.0),
        (QueryPoints::Two, Regime::Convex, smooth, -2.0),
        (QueryPoints::Two, Regime::StronglyConvex, smooth, -1.0),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (m, regime, constants, expected) in cells {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut raw = Vec::new();
        let mut cell_ok = true;
        for j in 1..=5 {
            let epsilon = 2f64.powi(-j);
            let inp = TuningInput { epsilon, n, q: 2.0, m, r2, constants, regime, mu0: None };
            let cell = table_order(&inp).unwrap();
            cell_ok &= cell.eps_exponent == expected;
            let steps = tune(&inp).unwrap().n_steps as f64;
            xs.push(epsilon.ln());
            raw.push(steps.ln());
            // the strongly convex horizons carry the (1 + ln N) factor that the Õ-order hides
            ys.push(match regime {
                Regime::Convex => steps.ln(),
                Regime::StronglyConvex => (steps / (1.0 + steps.ln())).ln(),
            });
        }
        let slope = zomd::regret::least_squares(&xs, &ys).0;
        let raw_slope = zomd::regret::least_squares(&xs, &raw).0;
        cell_ok &= (slope - expected).abs() <= 0.15;
        ok &= cell_ok;
        detail.push_str(&format!(
            " m={} {}: {slope:.3} vs {expected} (raw {raw_slope:.3}){};",
            m.count(),
            regime.name(),
            if cell_ok { "" } else { " FAIL" }
        ));
    }
    verdict(ok, detail.trim().to_string())
}

fn a8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut ok = true;
    let mut detail = String::new();
    for n in [5, 50, 500] {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = lp_norm(&r, 2.0);
        let samples = 100_000;
        let mut total = 0.0;
        for _ in 0..samples {
            let e = sample_sphere(&mut rng, n);
            total += e.coords().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>().abs();
        }
        let mean = total / samples as f64;
        let limit = 1.05 * norm / (n as f64).sqrt();
        ok &= mean <= limit;
        detail.push_str(&format!(" n={n}: {mean:.4e} <= {limit:.4e};"));
    }
    verdict(ok, detail.trim().to_string())
}

fn zomd(args: &[&str], out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_zomd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .status()
        .expect("spawn zomd");
    assert!(status.success(), "zomd {args:?} failed");
    std::fs::read(out).unwrap()
}

fn a9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg,
        "family = fixed-convex\ngeometry = ball\nn = 4\ncenter = 0.3\nweight = 0.5\nsoftness = 0.5\n\
         mode = bandit-2pt\nnoise = additive\nnoise_sd = 0.3\nbias = worst-direction\ndelta = max\n\
         epsilon = 0.5\nreplicas = 6\nsweep = epsilon\nvalues = 0.5, 0.7\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for cmd in ["run", "sweep"] {
        let first = zomd(&[cmd, "--config", cfg, "--seed", "17", "--jobs", "1"], &dir.path().join("a.csv"));
        let second = zomd(&[cmd, "--config", cfg, "--seed", "17", "--jobs", "3"], &dir.path().join("b.csv"));
        let other = zomd(&[cmd, "--config", cfg, "--seed", "18", "--jobs", "1"], &dir.path().join("c.csv"));
        let same = first == second && !first.is_empty();
        ok &= same && first != other;
        detail.push_str(&format!(" {cmd}: {} bytes, identical = {same};", first.len()));
    }
    verdict(ok, detail.trim().to_string())
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] =
        [("A1", a1), ("A2", a2), ("A3", a3), ("A4", a4), ("A5", a5), ("A6", a6), ("A7", a7), ("A8", a8), ("A9", a9)];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == name) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        println!("{name} {} [{secs:.1}s] {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
