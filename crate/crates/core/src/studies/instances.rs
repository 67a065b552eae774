//! Random problem instances.
//!
//! Parameter ranges: `c_i, α_i ∈ [0.5, 2]`, `u0 ∈ [0, 1]`, `γ ∈ [0, 0.5]`,
//! `β ∈ [0.5, 1.5]`, positions in `[-3, 3]`, aggregation weights in
//! `[0.5, 1.5]`. Scenario weights are uniform draws in `[0.2, 1]`, normalized.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::AggregationMap;
use crate::scenario::ScenarioSet;
use crate::utility::{UtilityFamily, UtilityModel};

#[derive(Debug, Clone)]
pub struct Instance {
    pub utility: UtilityModel,
    pub map: AggregationMap,
    pub scenarios: ScenarioSet,
}

impl Instance {
    pub fn label(&self) -> String {
        format!(
            "N={} M={} K={} {}",
            self.scenarios.dim(),
            self.map.rows(),
            self.scenarios.len(),
            self.utility.family().name()
        )
    }
}

/// Independent stream `index` under `seed`.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn random_utility(rng: &mut impl Rng, n: usize, family: UtilityFamily) -> UtilityModel {
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..=2.0)).collect();
    let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..=2.0)).collect();
    let u0 = rng.random_range(0.0..=1.0);
    let model = match family {
        UtilityFamily::ExpSum => UtilityModel::exp_sum(c, alpha, u0),
        UtilityFamily::ExpSumCoupled => {
            let gamma = rng.random_range(0.0..=0.5);
            let beta = rng.random_range(0.5..=1.5);
            UtilityModel::exp_sum_coupled(c, alpha, u0, gamma, beta)
        }
    };
    model.expect("sampled parameters are valid")
}

/// Weighted sum map for `m = 1`, otherwise a weighted grouping of shuffled
/// firms into `m` nonempty groups.
pub fn random_map(rng: &mut impl Rng, n: usize, m: usize) -> AggregationMap {
    assert!(1 <= m && m <= n);
    let mut firms: Vec<usize> = (0..n).collect();
    firms.shuffle(rng);
    // cut points split the shuffled firms into m nonempty runs
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(m - 1).collect();
    cuts.sort_unstable();
    let mut matrix = DMatrix::zeros(m, n);
    let mut group = 0;
    for (pos, &firm) in firms.iter().enumerate() {
        if group < cuts.len() && pos == cuts[group] {
            group += 1;
        }
        matrix[(group, firm)] = rng.random_range(0.5..=1.5);
    }
    AggregationMap::new(matrix).expect("weighted grouping is valid")
}

pub fn random_scenarios(rng: &mut impl Rng, n: usize, k: usize) -> ScenarioSet {
    let positions = DMatrix::from_fn(k, n, |_, _| rng.random_range(-3.0..=3.0));
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..=1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs = raw.iter().map(|p| p / total).collect();
    ScenarioSet::new(positions, probs).expect("sampled scenarios are valid")
}

/// Instance with the given shape.
pub fn instance_with(
    rng: &mut impl Rng,
    n: usize,
    m: usize,
    k: usize,
    family: UtilityFamily,
) -> Instance {
    let utility = random_utility(rng, n, family);
    let map = random_map(rng, n, m);
    let scenarios = random_scenarios(rng, n, k);
    Instance {
        utility,
        map,
        scenarios,
    }
}

/// `N ∈ {2,3,4}`, `M ∈ {1,2}`, `K ∈ {1..5}`, either family.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let n = rng.random_range(2..=4);
    let m = rng.random_range(1..=2);
    let k = rng.random_range(1..=5);
    let family = if rng.random_bool(0.5) {
        UtilityFamily::ExpSum
    } else {
        UtilityFamily::ExpSumCoupled
    };
    instance_with(rng, n, m, k, family)
}
