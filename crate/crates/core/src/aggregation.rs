//! Linear aggregation maps `π(X) = A X`.
//!
//! A valid map has nonnegative entries, full row rank `M <= N`, and maps the
//! nonnegative orthant of `R^N` onto that of `R^M`. The last property is
//! certified by exhibiting, for every unit vector `e^m`, a nonnegative `x`
//! with `A x = e^m`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::{Error, Result};

/// Pivots below this fraction of the largest pivot count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Residual infeasibility accepted by the phase-1 solve.
const FEASIBILITY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;
const SIMPLEX_MAX_PIVOTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapValidation {
    pub rows: usize,
    pub cols: usize,
    pub nonnegative: bool,
    pub rank: usize,
    pub full_rank: bool,
    /// Every `e^m` has a nonnegative preimage.
    pub cone_surjective: bool,
    /// Every firm enters at least one aggregate. Without it the inner
    /// sup-convolution has no maximizer for strictly increasing utilities.
    pub columns_covered: bool,
    /// Nonnegative preimages of the unit vectors, when found.
    pub preimages: Vec<Option<Vec<f64>>>,
    pub issues: Vec<String>,
}

impl MapValidation {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks shape, sign, rank, cone surjectivity and column coverage of `matrix`.
pub fn validate_map(matrix: &DMatrix<f64>) -> MapValidation {
    let (rows, cols) = matrix.shape();
    let mut issues = Vec::new();
    if rows == 0 || cols == 0 {
        issues.push("empty aggregation matrix".to_string());
    }
    if rows > cols {
        issues.push(format!("more aggregates ({rows}) than firms ({cols})"));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        issues.push("non-finite entry".to_string());
    }
    let negative = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .find(|&(i, j)| matrix[(i, j)] < 0.0);
    if let Some((i, j)) = negative {
        issues.push(format!(
            "negative entry {} at row {}, column {}",
            matrix[(i, j)],
            i + 1,
            j + 1
        ));
    }
    let rank = numerical_rank(matrix);
    let full_rank = rows > 0 && rank == rows;
    if !full_rank {
        issues.push(format!("rank {rank} < M = {rows}"));
    }
    let columns_covered = (0..cols).all(|j| matrix.column(j).iter().any(|v| *v > 0.0));
    if !columns_covered && rows > 0 {
        issues.push("some firm has an all-zero column".to_string());
    }
    let preimages: Vec<Option<Vec<f64>>> = (0..rows)
        .map(|m| {
            let mut e = DVector::zeros(rows);
            e[m] = 1.0;
            nonnegative_solution(matrix, &e).map(|x| x.as_slice().to_vec())
        })
        .collect();
    let cone_surjective = rows > 0 && preimages.iter().all(Option::is_some);
    if !cone_surjective && rows > 0 {
        let missing: Vec<String> = preimages
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_none())
            .map(|(m, _)| format!("e{}", m + 1))
            .collect();
        issues.push(format!(
            "not cone surjective: no nonnegative preimage of {}",
            missing.join(", ")
        ));
    }
    MapValidation {
        rows,
        cols,
        nonnegative: negative.is_none(),
        rank,
        full_rank,
        cone_surjective,
        columns_covered,
        preimages,
        issues,
    }
}

/// Rank by Gaussian elimination with full pivoting.
pub fn numerical_rank(matrix: &DMatrix<f64>) -> usize {
    let mut a = matrix.clone();
    let (rows, cols) = a.shape();
    let mut rank = 0;
    let mut first_pivot = None;
    while rank < rows.min(cols) {
        let mut best = (rank, rank, 0.0_f64);
        for i in rank..rows {
            for j in rank..cols {
                if a[(i, j)].abs() > best.2 {
                    best = (i, j, a[(i, j)].abs());
                }
            }
        }
        let scale = *first_pivot.get_or_insert(best.2);
        if best.2 == 0.0 || best.2 <= RANK_TOL * scale {
            break;
        }
        a.swap_rows(rank, best.0);
        a.swap_columns(rank, best.1);
        let pivot = a[(rank, rank)];
        for i in rank + 1..rows {
            let factor = a[(i, rank)] / pivot;
            if factor != 0.0 {
                for j in rank..cols {
                    let delta = factor * a[(rank, j)];
                    a[(i, j)] -= delta;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Phase-1 simplex: finds `x >= 0` with `A x = b` for `b >= 0`, if one exists.
pub fn nonnegative_solution(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    if b.len() != m || b.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return None;
    }
    let width = n + m + 1;
    let rhs = width - 1;
    let mut t = DMatrix::<f64>::zeros(m + 1, width);
    for i in 0..m {
        for j in 0..n {
            t[(i, j)] = a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, rhs)] = b[i];
    }
    // reduced costs of the phase-1 objective Σ artificials
    for j in 0..width {
        let col_sum: f64 = (0..m).map(|i| t[(i, j)]).sum();
        let cost = if (n..n + m).contains(&j) { 1.0 } else { 0.0 };
        t[(m, j)] = if j == rhs { -col_sum } else { cost - col_sum };
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    for _ in 0..SIMPLEX_MAX_PIVOTS {
        // Bland's rule: lowest index with negative reduced cost
        let Some(enter) = (0..n + m).find(|&j| t[(m, j)] < -PIVOT_TOL) else {
            break;
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let coef = t[(i, enter)];
            if coef > PIVOT_TOL {
                let ratio = t[(i, rhs)] / coef;
                leave = match leave {
                    Some((r, best)) if ratio > best || (ratio == best && basis[r] < basis[i]) => {
                        Some((r, best))
                    }
                    _ => Some((i, ratio)),
                };
            }
        }
        let (row, _) = leave?;
        let pivot = t[(row, enter)];
        for j in 0..width {
            t[(row, j)] /= pivot;
        }
        for i in 0..=m {
            if i != row {
                let factor = t[(i, enter)];
                if factor != 0.0 {
                    for j in 0..width {
                        let delta = factor * t[(row, j)];
                        t[(i, j)] -= delta;
                    }
                }
            }
        }
        basis[row] = enter;
    }

    let mut x = DVector::zeros(n);
    let mut artificial = 0.0;
    for (i, &j) in basis.iter().enumerate() {
        let value = t[(i, rhs)].max(0.0);
        if j < n {
            x[j] = value;
        } else {
            artificial += value;
        }
    }
    let residual = (a * &x - b).amax();
    (artificial <= FEASIBILITY_TOL && residual <= FEASIBILITY_TOL).then_some(x)
}

/// A validated aggregation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMap {
    matrix: DMatrix<f64>,
    preimages: Vec<DVector<f64>>,
}

impl AggregationMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let report = validate_map(&matrix);
        if !report.is_valid() {
            return Err(Error::invalid(format!(
                "invalid aggregation map: {}",
                report.issues.join("; ")
            )));
        }
        let preimages = report
            .preimages
            .into_iter()
            .map(|p| DVector::from_vec(p.expect("validated map has all preimages")))
            .collect();
        Ok(Self { matrix, preimages })
    }

    /// The `1 × N` map summing all positions.
    pub fn sum(n: usize) -> Self {
        Self::new(DMatrix::from_element(1, n, 1.0)).expect("sum map is valid")
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity map is valid")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("aggregation rows must have equal length"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(m, n, &flat))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Number of aggregates `M`.
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of firms `N`.
    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Nonnegative `x` with `A x = e^m`.
    pub fn unit_preimage(&self, m: usize) -> &DVector<f64> {
        &self.preimages[m]
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.cols(),
                got: x.len(),
                context: "aggregation input",
            });
        }
        Ok(&self.matrix * x)
    }

    pub fn transpose_apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.rows(),
                got: z.len(),
                context: "transposed aggregation input",
            });
        }
        Ok(self.matrix.tr_mul(z))
    }
}

/// 0/1 map of a partition of the firms `{0, ..., N-1}` into groups.
pub fn grouping_map(partition: &[Vec<usize>]) -> Result<AggregationMap> {
    let n: usize = partition.iter().map(Vec::len).sum();
    if partition.is_empty() || partition.iter().any(Vec::is_empty) {
        return Err(Error::invalid("partition groups must be nonempty"));
    }
    let mut owner = vec![None; n];
    for (m, group) in partition.iter().enumerate() {
        for &idx in group {
            match owner.get_mut(idx) {
                None => {
                    return Err(Error::invalid(format!(
                        "partition does not cover 0..{n}: index {idx} out of range"
                    )))
                }
                Some(Some(prev)) => {
                    return Err(Error::invalid(format!(
                        "firm {idx} appears in groups {prev} and {m}"
                    )))
                }
                Some(slot) => *slot = Some(m),
            }
        }
    }
    let mut matrix = DMatrix::zeros(partition.len(), n);
    for (idx, m) in owner.into_iter().enumerate() {
        matrix[(m.expect("every index assigned"), idx)] = 1.0;
    }
    AggregationMap::new(matrix)
}

/// Same as [`grouping_map`] with 1-based firm indices, as used in config files.
pub fn grouping_map_one_based(groups: &[Vec<usize>]) -> Result<AggregationMap> {
    let zero_based = groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|&i| {
                    i.checked_sub(1)
                        .ok_or_else(|| Error::invalid("group indices are 1-based"))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    grouping_map(&zero_based)
}
