use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::instances::{instance_rng, random_scenarios, random_utility};
use super::{InstanceRecord, InstanceStatus, StudyKind, StudyReport};
use crate::aggregation::AggregationMap;
use crate::scenario::{aggregate_positions, law_fingerprint, ScenarioSet};
use crate::shortfall::{systemic_risk, SolverConfig};
use crate::utility::{UtilityFamily, UtilityModel};

pub const LAW_INVARIANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
enum PairKind {
    Permutation,
    ComponentSwap,
    NullShift,
}

impl PairKind {
    const ALL: [PairKind; 3] = [
        PairKind::Permutation,
        PairKind::ComponentSwap,
        PairKind::NullShift,
    ];

    fn name(self) -> &'static str {
        match self {
            PairKind::Permutation => "permutation",
            PairKind::ComponentSwap => "component-swap",
            PairKind::NullShift => "null-shift",
        }
    }
}

struct Base {
    utility: UtilityModel,
    map: AggregationMap,
    scenarios: ScenarioSet,
}

/// Half the maps use unit weights, so swaps inside a group keep the aggregate.
fn base_instance(rng: &mut impl Rng) -> Base {
    let n = rng.random_range(2..=4);
    let m = rng.random_range(1..=2usize).min(n);
    let k = rng.random_range(2..=5);
    let family = if rng.random_bool(0.5) {
        UtilityFamily::ExpSum
    } else {
        UtilityFamily::ExpSumCoupled
    };
    let utility = random_utility(rng, n, family);
    let unit = rng.random_bool(0.5);
    let mut firms: Vec<usize> = (0..n).collect();
    firms.shuffle(rng);
    let split = if m == 1 { n } else { rng.random_range(1..n) };
    let mut matrix = DMatrix::zeros(m, n);
    for (pos, &firm) in firms.iter().enumerate() {
        let row = usize::from(pos >= split);
        matrix[(row, firm)] = if unit {
            1.0
        } else {
            rng.random_range(0.5..=1.5)
        };
    }
    Base {
        utility,
        map: AggregationMap::new(matrix).expect("grouping is valid"),
        scenarios: random_scenarios(rng, n, k),
    }
}

fn partner(base: &Base, kind: PairKind, rng: &mut impl Rng) -> Option<ScenarioSet> {
    let set = &base.scenarios;
    let (k, n) = (set.len(), set.dim());
    match kind {
        PairKind::Permutation => {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(rng);
            set.permuted(&perm).ok()
        }
        PairKind::ComponentSwap => {
            // prefer two firms sharing an aggregate
            let a = base.map.matrix();
            let row = rng.random_range(0..a.nrows());
            let mut members: Vec<usize> = (0..n).filter(|&j| a[(row, j)] > 0.0).collect();
            if members.len() < 2 {
                members = (0..n).collect();
            }
            members.shuffle(rng);
            let (i, j) = (members[0], members[1]);
            let mut positions = set.positions().clone();
            positions.swap_columns(i, j);
            set.with_positions(positions).ok()
        }
        PairKind::NullShift => {
            let a = base.map.matrix();
            if a.nrows() == n {
                return None;
            }
            let gram_inv = (a * a.transpose()).try_inverse()?;
            let projector = DMatrix::identity(n, n) - a.transpose() * gram_inv * a;
            let mut positions = set.positions().clone();
            for r in 0..k {
                let noise = DVector::from_fn(n, |_, _| rng.random_range(-2.0..=2.0));
                let shift = &projector * noise;
                for c in 0..n {
                    positions[(r, c)] += shift[c];
                }
            }
            set.with_positions(positions).ok()
        }
    }
}

fn run_pair(seed: u64, id: usize, cfg: &SolverConfig) -> Vec<InstanceRecord> {
    let mut rng = instance_rng(seed, id);
    let base = base_instance(&mut rng);
    let rho = systemic_risk(&base.scenarios, &base.utility, &base.map, cfg).map(|r| r.rho);
    let base_law = aggregate_positions(&base.scenarios, &base.map)
        .and_then(|z| law_fingerprint(&z, base.scenarios.probs()));

    PairKind::ALL
        .iter()
        .enumerate()
        .map(|(j, &kind)| {
            let label = format!(
                "{} N={} M={} K={} {}",
                kind.name(),
                base.scenarios.dim(),
                base.map.rows(),
                base.scenarios.len(),
                base.utility.family().name()
            );
            let mut rec = InstanceRecord::new(3 * id + j, label);
            let Some(other) = partner(&base, kind, &mut rng) else {
                rec.status = InstanceStatus::Excluded;
                return rec;
            };
            let same = match (&base_law, aggregate_positions(&other, &base.map)) {
                (Ok(law), Ok(z)) => law_fingerprint(&z, other.probs())
                    .map(|o| law.same_law(&o))
                    .map_err(|e| e.to_string()),
                (Err(e), _) => Err(e.to_string()),
                (_, Err(e)) => Err(e.to_string()),
            };
            match same {
                Ok(false) => {
                    rec.status = InstanceStatus::Excluded;
                    return rec;
                }
                Err(err) => {
                    rec.fail(err);
                    return rec;
                }
                Ok(true) => {}
            }
            let pair = systemic_risk(&other, &base.utility, &base.map, cfg).map(|r| r.rho);
            match (&rho, pair) {
                (Ok(a), Ok(b)) => {
                    let diff = (a - b).abs();
                    rec.metric("rho", *a)
                        .metric("rho_pair", b)
                        .metric("diff", diff);
                    let exact = matches!(kind, PairKind::Permutation);
                    if (exact && diff != 0.0) || diff > LAW_INVARIANCE_TOL {
                        rec.status = InstanceStatus::Violation;
                    }
                }
                (Err(err), _) => {
                    rec.fail(err);
                }
                (_, Err(err)) => {
                    rec.fail(err);
                }
            }
            rec
        })
        .collect()
}

/// Builds `3·count` pairs of positions whose aggregates share a law
/// (scenario permutations, firm swaps, shifts in `ker A`) and compares risks.
/// Pairs whose aggregated laws differ are excluded, not compared.
pub fn run_law_invariance_study(count: usize, seed: u64, cfg: &SolverConfig) -> StudyReport {
    let mut report = StudyReport::new(StudyKind::LawInvariance, seed, *cfg);
    report.instances = (0..count)
        .into_par_iter()
        .flat_map_iter(|id| run_pair(seed, id, cfg))
        .collect();
    let permutation_diff = report
        .instances
        .iter()
        .filter(|r| r.label.starts_with("permutation"))
        .filter_map(|r| r.metrics.get("diff").copied())
        .fold(0.0_f64, f64::max);
    let summary = [
        (
            "matched_pairs",
            report
                .instances
                .iter()
                .filter(|r| r.metrics.contains_key("diff"))
                .count() as f64,
        ),
        (
            "excluded_pairs",
            report.count(InstanceStatus::Excluded) as f64,
        ),
        ("violations", report.count(InstanceStatus::Violation) as f64),
        ("errors", report.count(InstanceStatus::Error) as f64),
        ("max_diff", report.max_metric("diff").unwrap_or(0.0)),
        ("max_permutation_diff", permutation_diff),
    ];
    report.summary = summary
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    report.passed = report
        .instances
        .iter()
        .all(|r| matches!(r.status, InstanceStatus::Ok | InstanceStatus::Excluded));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_agree_and_swaps_under_weights_get_filtered() {
        let r = run_law_invariance_study(12, 3, &SolverConfig::default());
        assert!(r.passed, "{}", r.to_json_pretty());
        assert_eq!(r.summary["max_permutation_diff"], 0.0);
        assert!(r.summary["matched_pairs"] >= 12.0);
    }

    #[test]
    fn asymmetric_swap_is_excluded() {
        let base = Base {
            utility: UtilityModel::exp_sum(vec![1.0, 2.0], vec![1.0, 0.5], 0.0).unwrap(),
            map: AggregationMap::from_rows(&[vec![1.0, 0.5]]).unwrap(),
            scenarios: ScenarioSet::uniform(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 2.0]))
                .unwrap(),
        };
        let other = partner(&base, PairKind::ComponentSwap, &mut instance_rng(0, 0)).unwrap();
        let law = |s: &ScenarioSet| {
            law_fingerprint(&aggregate_positions(s, &base.map).unwrap(), s.probs()).unwrap()
        };
        assert!(!law(&base.scenarios).same_law(&law(&other)));
    }
}
