//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sysrisk_core::oracle::bruteforce_supconv;
use sysrisk_core::studies::instances::{instance_rng, random_instance, random_map, random_utility};
use sysrisk_core::studies::{
    default_stability_setup, run_law_invariance_study, run_reduction_study, run_stability_study,
    InstanceStatus,
};
use sysrisk_core::supconv::SupConvolution;
use sysrisk_core::{
    solve_supconv, systemic_risk, AggregationMap, ScenarioSet, SolverConfig, UtilityFamily,
    UtilityModel,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

fn family(rng: &mut impl Rng) -> UtilityFamily {
    if rng.random_bool(0.5) {
        UtilityFamily::ExpSum
    } else {
        UtilityFamily::ExpSumCoupled
    }
}

fn reduction_identity() -> Outcome {
    let start = Instant::now();
    let report = run_reduction_study(50, 7, &cfg());
    let secs = start.elapsed().as_secs_f64();
    let gap = report.max_metric("gap").unwrap_or(f64::INFINITY);
    let errors = report.count(InstanceStatus::Error);
    let families = ["exp-sum ", "exp-sum-coupled"].iter().all(|f| {
        report
            .instances
            .iter()
            .any(|r| format!("{} ", r.label).contains(f))
    });
    let passed = errors == 0 && gap <= 1e-5 && secs < 60.0 && families;
    outcome(
        passed,
        format!("max relative gap {gap:.2e}, {errors} errors, {secs:.1} s"),
    )
}

fn allocation_formula() -> Outcome {
    let report = run_reduction_study(50, 7, &cfg());
    let errors = report.count(InstanceStatus::Error);
    let alloc = report.max_metric("allocation_gap").unwrap_or(f64::INFINITY);
    let budget = report.max_metric("budget_check").unwrap_or(f64::INFINITY);
    let slack = report
        .instances
        .iter()
        .filter_map(|r| r.metrics.get("expected_utility_slack").copied())
        .fold(f64::INFINITY, f64::min);
    let passed = errors == 0 && alloc <= 1e-4 && slack >= -1e-8 && budget <= 1e-9;
    outcome(
        passed,
        format!("allocation gap {alloc:.2e}, min slack {slack:.2e}, budget check {budget:.2e}"),
    )
}

fn closed_forms() -> Outcome {
    let u = UtilityModel::symmetric(2);
    let sum = AggregationMap::sum(2);
    let mut grid_err = 0.0_f64;
    for i in 0..=100 {
        let y = -5.0 + 0.1 * i as f64;
        let v = solve_supconv(&u, &sum, &DVector::from_element(1, y), &cfg()).map(|s| s.value);
        grid_err = grid_err.max(v.map_or(f64::INFINITY, |v| {
            (v - 2.0 * (1.0 - (-y / 2.0).exp())).abs()
        }));
    }
    let two = ScenarioSet::uniform(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]))
        .and_then(|s| systemic_risk(&s, &u, &sum, &cfg()))
        .map_or(f64::INFINITY, |r| (r.rho - 2.0 * 0.5f64.cosh().ln()).abs());
    let det = ScenarioSet::deterministic(&[1.0, 2.0])
        .and_then(|s| systemic_risk(&s, &u, &sum, &cfg()))
        .map_or(f64::INFINITY, |r| (r.rho + 3.0).abs());
    let passed = grid_err <= 1e-10 && two <= 1e-8 && det <= 1e-10;
    outcome(
        passed,
        format!("grid {grid_err:.2e}, two-scenario {two:.2e}, deterministic {det:.2e}"),
    )
}

/// `sup_y <y, z> + □U(y)` by damped Newton on `z + λ(y) = 0`.
fn conjugate_by_maximization(solver: &SupConvolution, z: &DVector<f64>) -> Option<f64> {
    let objective = |y: &DVector<f64>| solver.solve(y).ok().map(|s| (y.dot(z) + s.value, s));
    let mut y = DVector::zeros(z.len());
    let (mut h, mut sol) = objective(&y)?;
    for _ in 0..200 {
        let grad = z + &sol.multiplier;
        if grad.amax() <= 1e-13 {
            return Some(h);
        }
        let step = solver.multiplier_jacobian(&sol).lu().solve(&(-&grad))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &y + &step * t;
            if let Some((ht, st)) = objective(&trial) {
                if ht >= h - 1e-15 * h.abs().max(1.0) {
                    (y, h, sol, moved) = (trial, ht, st, true);
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            return (grad.amax() <= 1e-9).then_some(h);
        }
    }
    None
}

fn calculus_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut fd_err = 0.0_f64;
    let mut inverse_err = 0.0_f64;
    let mut conj_err = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=4);
        let m = rng.random_range(1..=2);
        let fam = family(&mut rng);
        let u = random_utility(&mut rng, n, fam);
        let map = random_map(&mut rng, n, m);
        let solver = SupConvolution::new(&u, &map, &cfg()).expect("dimensions match");

        let y = DVector::from_fn(m, |_, _| rng.random_range(-2.0..=2.0));
        let h = 1e-6;
        match solver.solve(&y) {
            Ok(sol) => {
                for i in 0..m {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[i] += h;
                    ym[i] -= h;
                    let fd = match (solver.solve(&yp), solver.solve(&ym)) {
                        (Ok(p), Ok(q)) => (p.value - q.value) / (2.0 * h),
                        _ => f64::INFINITY,
                    };
                    fd_err = fd_err.max((fd - sol.multiplier[i]).abs());
                }
            }
            Err(_) => fd_err = f64::INFINITY,
        }

        let w = DVector::from_fn(n, |_, _| -rng.random_range(0.05..=3.0));
        match u.conjugate_grad(&w) {
            Ok(x) => inverse_err = inverse_err.max((-u.gradient(&x) - &w).amax()),
            Err(_) => inverse_err = f64::INFINITY,
        }

        let z = DVector::from_fn(m, |_, _| -rng.random_range(0.2..=2.5));
        let closed = solver.conjugate(&z);
        let numeric = conjugate_by_maximization(&solver, &z);
        conj_err = conj_err.max(match (closed, numeric) {
            (Ok(a), Some(b)) => (a - b).abs(),
            _ => f64::INFINITY,
        });
    }
    let passed = fd_err <= 1e-6 && inverse_err <= 1e-10 && conj_err <= 1e-8;
    outcome(
        passed,
        format!("gradient vs FD {fd_err:.2e}, round trip {inverse_err:.2e}, conjugate identity {conj_err:.2e}"),
    )
}

fn risk_axioms() -> Outcome {
    let rho = |set: &ScenarioSet, u: &UtilityModel, map: &AggregationMap| {
        systemic_risk(set, u, map, &cfg()).map_or(f64::NAN, |r| r.rho)
    };
    let (mut mono, mut convex, mut cash) = (0, 0, 0);
    let mut cash_err = 0.0_f64;
    for trial in 0..100 {
        let mut rng = instance_rng(99, trial);
        let inst = random_instance(&mut rng);
        let (u, map, set) = (&inst.utility, &inst.map, &inst.scenarios);
        let (k, n) = (set.len(), set.dim());
        let base = rho(set, u, map);

        let bump = DMatrix::from_fn(k, n, |_, _| rng.random_range(0.0..=1.0));
        let better = set.with_positions(set.positions() + bump).expect("finite");
        if base >= rho(&better, u, map) - 1e-8 {
            mono += 1;
        }

        let other = set
            .with_positions(DMatrix::from_fn(k, n, |_, _| rng.random_range(-3.0..=3.0)))
            .expect("finite");
        let mid = set
            .with_positions((set.positions() + other.positions()) * 0.5)
            .expect("finite");
        if rho(&mid, u, map) <= 0.5 * (base + rho(&other, u, map)) + 1e-8 {
            convex += 1;
        }

        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let spent: f64 = (map.matrix() * DVector::from_row_slice(&w)).sum();
        let err = (rho(&set.shifted(&w).expect("finite"), u, map) - (base - spent)).abs();
        cash_err = cash_err.max(if err.is_nan() { f64::INFINITY } else { err });
        if err <= 1e-8 {
            cash += 1;
        }
    }
    outcome(
        mono == 100 && convex == 100 && cash == 100,
        format!("monotone {mono}/100, convex {convex}/100, cash additive {cash}/100 (max err {cash_err:.2e})"),
    )
}

fn law_invariance() -> Outcome {
    let report = run_law_invariance_study(40, 11, &cfg());
    let matched = report.summary["matched_pairs"];
    let diff = report.summary["max_diff"];
    let perm = report.summary["max_permutation_diff"];
    outcome(
        report.passed && matched >= 50.0 && diff <= 1e-8 && perm == 0.0,
        format!("{matched} matched pairs, max diff {diff:.2e}, permutation diff {perm:e}"),
    )
}

fn stability() -> Outcome {
    let report = match run_stability_study(
        &default_stability_setup(),
        &[100, 1_000, 10_000],
        20,
        3,
        &cfg(),
    ) {
        Ok(r) => r,
        Err(err) => return outcome(false, format!("study failed: {err}")),
    };
    let s = &report.series;
    let strictly = |f: fn(&sysrisk_core::studies::SeriesPoint) -> f64| {
        s.windows(2).all(|w| f(&w[1]) < f(&w[0]))
    };
    let errors_down = strictly(|p| p.median_error);
    let gaps_down = strictly(|p| p.median_allocation_gap);
    let last = s.last().map_or(f64::INFINITY, |p| p.median_error);
    let medians: Vec<String> = s
        .iter()
        .map(|p| {
            format!(
                "n={} err {:.2e} gap {:.2e}",
                p.n, p.median_error, p.median_allocation_gap
            )
        })
        .collect();
    outcome(
        s.len() == 3 && errors_down && gaps_down && last < 0.05,
        medians.join("; "),
    )
}

fn solver_hygiene() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max_kkt = 0.0_f64;
    let mut min_multiplier = f64::INFINITY;
    let mut dominance = f64::NEG_INFINITY;
    let mut solves = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=4);
        let m = rng.random_range(1..=2);
        let fam = family(&mut rng);
        let u = random_utility(&mut rng, n, fam);
        let map = random_map(&mut rng, n, m);
        let y = DVector::from_fn(m, |_, _| rng.random_range(-4.0..=4.0));
        match solve_supconv(&u, &map, &y, &cfg()) {
            Ok(sol) => {
                solves += 1;
                max_kkt = max_kkt.max(sol.kkt_residual);
                min_multiplier = min_multiplier.min(sol.multiplier.min());
            }
            Err(_) => max_kkt = f64::INFINITY,
        }
    }
    for i in 0..12 {
        let n = 2 + i % 2;
        let m = 1 + (i / 2) % 2;
        let fam = family(&mut rng);
        let u = random_utility(&mut rng, n, fam);
        let map = random_map(&mut rng, n, m);
        let y = DVector::from_fn(m, |_, _| rng.random_range(-1.5..=1.5));
        let step = if n - m == 2 { 0.02 } else { 0.002 };
        match (
            solve_supconv(&u, &map, &y, &cfg()),
            bruteforce_supconv(&u, &map, &y, step, 6.0),
        ) {
            (Ok(sol), Ok(grid)) => dominance = dominance.max(grid - sol.value),
            _ => dominance = f64::INFINITY,
        }
    }
    let passed = max_kkt <= 1e-8 && min_multiplier >= 0.0 && dominance <= 1e-9;
    outcome(
        passed,
        format!(
            "{solves} solves, max KKT residual {max_kkt:.2e}, min multiplier {min_multiplier:.2e}, \
             grid excess {dominance:.2e}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("reduction identity", reduction_identity),
        ("allocation formula", allocation_formula),
        ("closed forms", closed_forms),
        ("calculus checks", calculus_checks),
        ("risk-measure axioms", risk_axioms),
        ("law invariance", law_invariance),
        ("stability", stability),
        ("solver hygiene", solver_hygiene),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        let tag = if result.passed { "PASS" } else { "FAIL" };
        println!("criterion {} [{tag}] {name}: {}", i + 1, result.detail);
        if !result.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
