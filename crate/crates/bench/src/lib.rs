//! Fixtures shared by the solver benchmarks.

use sysrisk_core::studies::instances::{instance_rng, instance_with, Instance};
use sysrisk_core::UtilityFamily;

/// Shapes `(N, M, K)` benchmarked by default, all within the direct solver's
/// size guard.
pub const SHAPES: [(usize, usize, usize); 5] =
    [(2, 1, 1), (3, 1, 5), (4, 1, 5), (4, 2, 5), (4, 2, 20)];

/// Coupled-utility instance of the given shape, reproducible from `seed`.
pub fn fixture(n: usize, m: usize, k: usize, seed: u64) -> Instance {
    instance_with(
        &mut instance_rng(seed, 0),
        n,
        m,
        k,
        UtilityFamily::ExpSumCoupled,
    )
}

pub fn shape_label(n: usize, m: usize, k: usize) -> String {
    format!("N{n}_M{m}_K{k}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        for (n, m, k) in SHAPES {
            let a = fixture(n, m, k, 3);
            let b = fixture(n, m, k, 3);
            assert_eq!(a.scenarios, b.scenarios);
            assert_eq!(a.map.matrix(), b.map.matrix());
            assert_eq!(
                (a.scenarios.dim(), a.map.rows(), a.scenarios.len()),
                (n, m, k)
            );
        }
    }
}
