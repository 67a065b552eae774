use std::time::Instant;

use rayon::prelude::*;

use super::instances::{instance_rng, random_instance};
use super::{elapsed_ms, InstanceRecord, InstanceStatus, StudyKind, StudyReport};
use crate::oracle::direct_primal_solve;
use crate::shortfall::{systemic_risk, SolverConfig};

/// Relative tolerance `|ρ_direct - ρ_reduced| / (1 + |ρ|)`.
pub const REDUCTION_TOL: f64 = 1e-5;
/// Sup-norm tolerance between the oracle and closed-form allocations.
pub const ALLOCATION_TOL: f64 = 1e-4;
const FEASIBILITY_TOL: f64 = 1e-8;
const BUDGET_TOL: f64 = 1e-9;

fn run_one(seed: u64, id: usize, cfg: &SolverConfig) -> InstanceRecord {
    let inst = random_instance(&mut instance_rng(seed, id));
    let mut rec = InstanceRecord::new(id, inst.label());
    let start = Instant::now();
    let reduced = match systemic_risk(&inst.scenarios, &inst.utility, &inst.map, cfg) {
        Ok(r) => r,
        Err(err) => {
            rec.fail(format!("reduced solver: {err}"));
            return rec;
        }
    };
    let reduced_ms = elapsed_ms(start);
    let start = Instant::now();
    let direct = match direct_primal_solve(&inst.scenarios, &inst.utility, &inst.map, cfg) {
        Ok(d) => d,
        Err(err) => {
            rec.fail(format!("direct solver: {err}"));
            return rec;
        }
    };
    let direct_ms = elapsed_ms(start);

    let gap = (direct.value - reduced.rho).abs() / (1.0 + reduced.rho.abs());
    let allocation_gap = (&direct.allocation - &reduced.allocation).amax();
    let budget = reduced.budget_check.amax();
    rec.metric("rho_reduced", reduced.rho)
        .metric("rho_direct", direct.value)
        .metric("gap", gap)
        .metric("allocation_gap", allocation_gap)
        .metric("expected_utility_slack", reduced.expected_utility_slack)
        .metric("budget_check", budget)
        .metric("max_kkt_residual", reduced.diagnostics.max_kkt_residual)
        .metric("oracle_kkt_residual", direct.kkt_residual)
        .metric("reduced_ms", reduced_ms)
        .metric("direct_ms", direct_ms);
    rec.wall_time_ms = Some(reduced_ms + direct_ms);
    if gap > REDUCTION_TOL
        || allocation_gap > ALLOCATION_TOL
        || reduced.expected_utility_slack < -FEASIBILITY_TOL
        || budget > BUDGET_TOL
    {
        rec.status = InstanceStatus::Violation;
    }
    rec
}

/// Solves `count` random instances with both the reduced and the direct
/// solver and compares values and allocations.
pub fn run_reduction_study(count: usize, seed: u64, cfg: &SolverConfig) -> StudyReport {
    let mut report = StudyReport::new(StudyKind::Reduction, seed, *cfg);
    report.instances = (0..count)
        .into_par_iter()
        .map(|id| run_one(seed, id, cfg))
        .collect();

    let deterministic_gap = report
        .instances
        .iter()
        .filter(|r| r.label.contains(" K=1 "))
        .filter_map(|r| r.metrics.get("gap").copied())
        .fold(0.0_f64, f64::max);
    let summary = [
        ("instances", count as f64),
        ("violations", report.count(InstanceStatus::Violation) as f64),
        ("errors", report.count(InstanceStatus::Error) as f64),
        ("max_gap", report.max_metric("gap").unwrap_or(0.0)),
        ("max_gap_deterministic", deterministic_gap),
        (
            "max_allocation_gap",
            report.max_metric("allocation_gap").unwrap_or(0.0),
        ),
        (
            "max_budget_check",
            report.max_metric("budget_check").unwrap_or(0.0),
        ),
        (
            "max_kkt_residual",
            report.max_metric("max_kkt_residual").unwrap_or(0.0),
        ),
    ];
    report.summary = summary
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    report.passed = report
        .instances
        .iter()
        .all(|r| r.status == InstanceStatus::Ok);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_study() {
        let r = run_reduction_study(0, 7, &SolverConfig::default());
        assert!(r.passed && r.instances.is_empty());
    }

    #[test]
    fn small_batch_passes_and_is_reproducible() {
        let cfg = SolverConfig::default();
        let a = run_reduction_study(8, 11, &cfg);
        assert!(a.passed, "{}", a.to_json_pretty());
        let b = run_reduction_study(8, 11, &cfg);
        assert_eq!(a.without_timings(), b.without_timings());
    }
}
