use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;

use super::instances::instance_rng;
use super::{InstanceRecord, InstanceStatus, SeriesPoint, StudyKind, StudyReport};
use crate::aggregation::AggregationMap;
use crate::numeric::median;
use crate::scenario::{
    aggregate_positions, empirical_from_samples, law_fingerprint, BoundedSampler, DiscreteLaw,
    ScenarioSet,
};
use crate::shortfall::{budget_of_distribution, SolverConfig};
use crate::supconv::SupConvolution;
use crate::utility::UtilityModel;
use crate::Result;

/// Base law and model of a stability study.
pub struct StabilitySetup {
    pub sampler: Box<dyn BoundedSampler>,
    pub utility: UtilityModel,
    pub map: AggregationMap,
    /// Points per coordinate of the grid on which allocation maps are compared.
    pub grid_points: usize,
}

/// Two equally likely positions `(1, 0)` and `(-1, 0)` under the sum map and
/// `U(x) = Σ (1 - exp(-x_i))`. The reference risk is `2 ln cosh(1/2)`.
pub fn default_stability_setup() -> StabilitySetup {
    StabilitySetup {
        sampler: Box::new(
            DiscreteLaw::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.5, 0.5])
                .expect("valid law"),
        ),
        utility: UtilityModel::symmetric(2),
        map: AggregationMap::sum(2),
        grid_points: 11,
    }
}

fn budget(setup: &StabilitySetup, set: &ScenarioSet, cfg: &SolverConfig) -> Result<DVector<f64>> {
    let z = aggregate_positions(set, &setup.map)?;
    let law = law_fingerprint(&z, set.probs())?;
    budget_of_distribution(&law, &setup.utility, &setup.map, cfg)
}

/// Grid on `[-r, r]^N`, `r` the sampler radius.
fn grid(setup: &StabilitySetup) -> Vec<DVector<f64>> {
    let n = setup.sampler.dim();
    let g = setup.grid_points.max(2);
    let r = setup.sampler.radius().max(1.0);
    (0..g.pow(n as u32))
        .map(|idx| {
            DVector::from_fn(n, |c, _| {
                let i = (idx / g.pow(c as u32)) % g;
                -r + 2.0 * r * i as f64 / (g - 1) as f64
            })
        })
        .collect()
}

/// Allocations `Θ(A x + α)` on the grid; the `-x` part cancels in gaps.
fn allocation_map(
    solver: &SupConvolution,
    grid: &[DVector<f64>],
    alpha: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    grid.iter()
        .map(|x| solver.theta(&(solver.map().matrix() * x + alpha)))
        .collect()
}

/// Compares the risk and allocation map of empirical measures of `n` draws
/// against those of the sampler's reference discretization, over `seeds`
/// independent draws for each `n` in `sizes`.
pub fn run_stability_study(
    setup: &StabilitySetup,
    sizes: &[usize],
    seeds: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<StudyReport> {
    let mut report = StudyReport::new(StudyKind::Stability, seed, *cfg);
    let solver = SupConvolution::new(&setup.utility, &setup.map, cfg)?;
    let alpha_ref = budget(setup, &setup.sampler.reference(), cfg)?;
    let rho_ref = alpha_ref.sum();
    let points = grid(setup);
    let reference_map = allocation_map(&solver, &points, &alpha_ref)?;

    let jobs: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&n| (0..seeds).map(move |s| (n, s)))
        .collect();
    report.instances = jobs
        .par_iter()
        .enumerate()
        .map(|(id, &(n, s))| {
            let mut rec = InstanceRecord::new(id, format!("n={n} draw={s}"));
            let draw_seed = instance_rng(seed, id).next_u64();
            let outcome = empirical_from_samples(setup.sampler.as_ref(), n, draw_seed)
                .and_then(|set| budget(setup, &set, cfg))
                .and_then(|alpha| Ok((alpha.sum(), allocation_map(&solver, &points, &alpha)?)));
            match outcome {
                Ok((rho, map)) => {
                    let gap = map
                        .iter()
                        .zip(&reference_map)
                        .map(|(a, b)| (a - b).amax())
                        .fold(0.0_f64, f64::max);
                    rec.metric("n", n as f64)
                        .metric("rho", rho)
                        .metric("error", (rho - rho_ref).abs())
                        .metric("allocation_gap", gap);
                }
                Err(err) => {
                    rec.fail(err);
                }
            }
            rec
        })
        .collect();

    for &n in sizes {
        let select = |key: &str| -> Vec<f64> {
            report
                .instances
                .iter()
                .filter(|r| r.metrics.get("n") == Some(&(n as f64)))
                .filter_map(|r| r.metrics.get(key).copied())
                .collect()
        };
        report.series.push(SeriesPoint {
            n,
            median_error: median(&select("error")).unwrap_or(f64::INFINITY),
            median_allocation_gap: median(&select("allocation_gap")).unwrap_or(f64::INFINITY),
        });
    }
    let decreasing = |f: fn(&SeriesPoint) -> f64| {
        report
            .series
            .windows(2)
            .all(|w| f(&w[1]) < f(&w[0]) || (f(&w[0]) == 0.0 && f(&w[1]) == 0.0))
    };
    let errors_decrease = decreasing(|p| p.median_error);
    let gaps_decrease = decreasing(|p| p.median_allocation_gap);
    report.summary = [
        ("reference_rho", rho_ref),
        ("errors", report.count(InstanceStatus::Error) as f64),
        (
            "median_error_decreasing",
            f64::from(u8::from(errors_decrease)),
        ),
        (
            "allocation_gap_decreasing",
            f64::from(u8::from(gaps_decrease)),
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    report.passed = errors_decrease && gaps_decrease && report.count(InstanceStatus::Error) == 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_has_no_error() {
        let setup = StabilitySetup {
            sampler: Box::new(DiscreteLaw::point_mass(vec![0.5, -1.0]).unwrap()),
            ..default_stability_setup()
        };
        let r = run_stability_study(&setup, &[10, 100], 3, 1, &SolverConfig::default()).unwrap();
        assert!(r.passed, "{}", r.to_json_pretty());
        assert!(r
            .series
            .iter()
            .all(|p| p.median_error == 0.0 && p.median_allocation_gap == 0.0));
    }

    #[test]
    fn reference_risk_of_default_setup() {
        let r = run_stability_study(
            &default_stability_setup(),
            &[],
            0,
            1,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!((r.summary["reference_rho"] - 2.0 * 0.5f64.cosh().ln()).abs() < 1e-12);
    }

    #[test]
    fn errors_shrink_with_sample_size() {
        let r = run_stability_study(
            &default_stability_setup(),
            &[100, 10_000],
            9,
            5,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.series);
    }
}
