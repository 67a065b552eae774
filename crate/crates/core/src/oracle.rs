//! Brute-force solvers for the unreduced problem, used to certify the
//! reduction on small instances.
//!
//! [`direct_primal_solve`] minimizes `Σ α` over allocations with
//! `A Y_k = α` in every scenario and `E[U(X + Y)] >= 0`. The equality
//! constraints are removed by writing `Y_k = B α + N w_k`, with
//! `B = Aᵀ(AAᵀ)⁻¹` and `N` an orthonormal basis of `ker A`. The remaining
//! program is solved by a log barrier on the utility constraint,
//! `Σ α - μ ln E[U(X + Y)]`, with damped Newton steps along a decreasing
//! schedule of `μ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::aggregation::AggregationMap;
use crate::numeric::{inf_norm, solve_spd, CompensatedSum};
use crate::scenario::ScenarioSet;
use crate::shortfall::SolverConfig;
use crate::utility::UtilityModel;
use crate::{Error, Result};

/// Largest `K·N` accepted by [`direct_primal_solve`].
pub const MAX_PRIMAL_SIZE: usize = 200;

const BARRIER_SCHEDULE: [f64; 9] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
const NEWTON_ITER_PER_STAGE: usize = 200;
const LINE_SEARCH_HALVINGS: usize = 60;
const DECREMENT_TOL: f64 = 1e-15;
const STALL_DECREMENT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimalSolution {
    /// `Σ α`.
    pub value: f64,
    /// `K×N`, row `k` is `Y_k`.
    pub allocation: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// Max of the barrier gradient norm and the final `μ`.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Orthonormal basis of `ker A`, as columns, by Gram-Schmidt against the row space.
fn null_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    let orthonormalize = |v: DVector<f64>, basis: &mut Vec<DVector<f64>>| -> Option<DVector<f64>> {
        let mut v = v;
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for q in basis.iter() {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        (norm > 1e-8).then(|| v / norm)
    };
    for row in a.row_iter() {
        if let Some(q) = orthonormalize(row.transpose(), &mut basis) {
            basis.push(q);
        }
    }
    let row_rank = basis.len();
    for j in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        if let Some(q) = orthonormalize(e, &mut basis) {
            basis.push(q);
        }
    }
    if row_rank == n {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&basis[row_rank..])
}

struct Barrier<'a> {
    utility: &'a UtilityModel,
    positions: Vec<DVector<f64>>,
    probs: &'a [f64],
    /// `N×M`, maps a budget to the minimum-norm allocation achieving it.
    lift: DMatrix<f64>,
    /// `N×(N-M)`.
    null: DMatrix<f64>,
}

struct BarrierEval {
    g: f64,
    grad_g: DVector<f64>,
    hess_g: Option<DMatrix<f64>>,
}

impl Barrier<'_> {
    fn m(&self) -> usize {
        self.lift.ncols()
    }

    fn d(&self) -> usize {
        self.null.ncols()
    }

    fn allocation(&self, v: &DVector<f64>, k: usize) -> DVector<f64> {
        let (m, d) = (self.m(), self.d());
        let alpha = v.rows(0, m);
        let w = v.rows(m + k * d, d);
        &self.lift * alpha + &self.null * w
    }

    fn eval(&self, v: &DVector<f64>, with_hessian: bool) -> BarrierEval {
        let (m, d) = (self.m(), self.d());
        let dim = v.len();
        let mut g = CompensatedSum::new();
        let mut grad = DVector::zeros(dim);
        let mut hess = with_hessian.then(|| DMatrix::zeros(dim, dim));
        for (k, (x, &p)) in self.positions.iter().zip(self.probs).enumerate() {
            let z = x + self.allocation(v, k);
            g.add(p * self.utility.value(&z));
            let gu = self.utility.gradient(&z) * p;
            let off = m + k * d;
            grad.rows_mut(0, m).axpy(1.0, &self.lift.tr_mul(&gu), 1.0);
            grad.rows_mut(off, d).copy_from(&self.null.tr_mul(&gu));
            if let Some(h) = hess.as_mut() {
                let hu = self.utility.hessian(&z) * p;
                let lh = self.lift.transpose() * &hu;
                let aa = &lh * &self.lift;
                let aw = &lh * &self.null;
                let ww = self.null.transpose() * &hu * &self.null;
                let mut block = h.view_mut((0, 0), (m, m));
                block += aa;
                h.view_mut((0, off), (m, d)).copy_from(&aw);
                h.view_mut((off, 0), (d, m)).copy_from(&aw.transpose());
                h.view_mut((off, off), (d, d)).copy_from(&ww);
            }
        }
        BarrierEval {
            g: g.value(),
            grad_g: grad,
            hess_g: hess,
        }
    }

    fn objective(&self, v: &DVector<f64>, mu: f64, g: f64) -> f64 {
        v.rows(0, self.m()).sum() - mu * g.ln()
    }

    fn gradient(&self, e: &BarrierEval, mu: f64) -> DVector<f64> {
        let mut grad = -&e.grad_g * (mu / e.g);
        grad.rows_mut(0, self.m()).add_scalar_mut(1.0);
        grad
    }
}

/// Solves the unreduced systemic risk problem directly. Requires `K·N <= 200`.
pub fn direct_primal_solve(
    scenarios: &ScenarioSet,
    utility: &UtilityModel,
    map: &AggregationMap,
    cfg: &SolverConfig,
) -> Result<PrimalSolution> {
    cfg.validate()?;
    let (k, n) = (scenarios.len(), scenarios.dim());
    if k * n > MAX_PRIMAL_SIZE {
        return Err(Error::invalid(format!(
            "direct solve is limited to K·N <= {MAX_PRIMAL_SIZE}, got {}",
            k * n
        )));
    }
    if utility.dim() != n || map.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if utility.dim() != n {
                utility.dim()
            } else {
                map.cols()
            },
            context: "direct solve dimensions",
        });
    }
    let a = map.matrix();
    let gram = a * a.transpose();
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::invalid("aggregation map is rank deficient"))?;
    let barrier = Barrier {
        utility,
        positions: (0..k).map(|i| scenarios.position(i)).collect(),
        probs: scenarios.probs(),
        lift: a.transpose() * gram_inv,
        null: null_space_basis(a),
    };
    let (m, d) = (barrier.m(), barrier.d());

    // strictly feasible start: the same cash t·1 for every firm in every scenario
    let mut t = 0.0;
    let start = |t: f64| {
        let y = DVector::from_element(n, t);
        let mut v = DVector::zeros(m + k * d);
        v.rows_mut(0, m).copy_from(&(a * &y));
        let w = barrier.null.tr_mul(&y);
        for i in 0..k {
            v.rows_mut(m + i * d, d).copy_from(&w);
        }
        v
    };
    let mut v = start(t);
    let mut found = false;
    for _ in 0..80 {
        if barrier.eval(&v, false).g > 0.0 {
            found = true;
            break;
        }
        t = if t == 0.0 { 1.0 } else { 2.0 * t };
        v = start(t);
    }
    if !found {
        return Err(Error::Infeasible(
            "no strictly feasible allocation found".into(),
        ));
    }

    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for &mu in &BARRIER_SCHEDULE {
        for it in 0..=NEWTON_ITER_PER_STAGE {
            let e = barrier.eval(&v, true);
            let grad = barrier.gradient(&e, mu);
            grad_norm = inf_norm(&grad);
            let hg = e.hess_g.as_ref().expect("hessian requested");
            let hess = (&e.grad_g * e.grad_g.transpose()) * (mu / (e.g * e.g)) - hg * (mu / e.g);
            let step = solve_spd(&hess, &(-&grad)).ok_or(Error::NoConvergence {
                solver: "barrier Newton (singular Hessian)",
                iterations,
                residual: grad_norm,
            })?;
            let decrement = -grad.dot(&step);
            let phi = barrier.objective(&v, mu, e.g);
            // the objective can no longer resolve progress: finish with a pure Newton step
            if decrement <= DECREMENT_TOL * (1.0 + phi.abs()) {
                let trial = &v + &step;
                if barrier.eval(&trial, false).g > 0.0 {
                    v = trial;
                    grad_norm = inf_norm(&barrier.gradient(&barrier.eval(&v, false), mu));
                }
                break;
            }
            if it == NEWTON_ITER_PER_STAGE {
                return Err(Error::NoConvergence {
                    solver: "barrier Newton",
                    iterations,
                    residual: grad_norm,
                });
            }
            iterations += 1;
            let mut s = 1.0;
            let mut accepted = false;
            for _ in 0..LINE_SEARCH_HALVINGS {
                let trial = &v + &step * s;
                let g = barrier.eval(&trial, false).g;
                if g > 0.0 && barrier.objective(&trial, mu, g) <= phi - 1e-4 * s * decrement {
                    v = trial;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                if decrement <= STALL_DECREMENT {
                    break;
                }
                return Err(Error::NoConvergence {
                    solver: "barrier Newton (line search)",
                    iterations,
                    residual: grad_norm,
                });
            }
        }
    }

    let mu = BARRIER_SCHEDULE[BARRIER_SCHEDULE.len() - 1];
    let eta = mu / barrier.eval(&v, false).g;
    let mut kkt_residual = grad_norm.max(mu);
    if let Some((polished, residual, extra)) = polish(&barrier, v.clone(), eta) {
        if residual < kkt_residual {
            v = polished;
            kkt_residual = residual;
            iterations += extra;
        }
    }

    let alpha: DVector<f64> = v.rows(0, m).into_owned();
    let allocation = DMatrix::from_fn(k, n, |i, j| barrier.allocation(&v, i)[j]);
    Ok(PrimalSolution {
        value: alpha.sum(),
        allocation,
        alpha,
        kkt_residual,
        iterations,
    })
}

/// KKT residual `(c - η∇G, G)` with `c` the cost gradient.
fn kkt_system(
    barrier: &Barrier,
    v: &DVector<f64>,
    eta: f64,
    with_jacobian: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let e = barrier.eval(v, with_jacobian);
    let dim = v.len();
    let mut f = DVector::zeros(dim + 1);
    f.rows_mut(0, dim).copy_from(&(-&e.grad_g * eta));
    f.rows_mut(0, barrier.m()).add_scalar_mut(1.0);
    f[dim] = e.g;
    let jac = e.hess_g.map(|h| {
        let mut j = DMatrix::zeros(dim + 1, dim + 1);
        j.view_mut((0, 0), (dim, dim)).copy_from(&(-h * eta));
        j.view_mut((0, dim), (dim, 1)).copy_from(&(-&e.grad_g));
        j.view_mut((dim, 0), (1, dim))
            .copy_from(&e.grad_g.transpose());
        j
    });
    (f, jac)
}

/// Newton on the KKT system from the last barrier point, removing the `O(μ)` barrier bias.
fn polish(
    barrier: &Barrier,
    mut v: DVector<f64>,
    mut eta: f64,
) -> Option<(DVector<f64>, f64, usize)> {
    let dim = v.len();
    let (mut f, mut jac) = kkt_system(barrier, &v, eta, true);
    let mut norm = inf_norm(&f);
    let mut iterations = 0;
    while iterations < 20 && norm > 1e-14 {
        let step = jac.expect("jacobian requested").lu().solve(&(-&f))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial_v = &v + step.rows(0, dim) * t;
            let trial_eta = eta + step[dim] * t;
            let (tf, tj) = kkt_system(barrier, &trial_v, trial_eta, true);
            if trial_eta > 0.0 && inf_norm(&tf) < norm {
                accepted = Some((trial_v, trial_eta, tf, tj));
                break;
            }
            t *= 0.5;
        }
        let Some((nv, ne, nf, nj)) = accepted else {
            break;
        };
        iterations += 1;
        (v, eta, f, jac) = (nv, ne, nf, nj);
        norm = inf_norm(&f);
    }
    Some((v, norm, iterations))
}

/// Grid lower bound of `□U(y)`: the best utility over grid points of the box
/// `[-half_width, half_width]^N` lying on the slice `A x = y`. Requires `N <= 3`.
pub fn bruteforce_supconv(
    utility: &UtilityModel,
    map: &AggregationMap,
    y: &DVector<f64>,
    grid_step: f64,
    half_width: f64,
) -> Result<f64> {
    let (m, n) = (map.rows(), map.cols());
    if n > 3 {
        return Err(Error::invalid("brute-force sup-convolution needs N <= 3"));
    }
    if y.len() != m || utility.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: y.len(),
            context: "brute-force sup-convolution target",
        });
    }
    if !(grid_step > 0.0 && half_width > 0.0) {
        return Err(Error::invalid(
            "grid step and box half-width must be positive",
        ));
    }
    let a = map.matrix();

    // basic columns: the M-subset with the best-conditioned square block
    let subsets: Vec<Vec<usize>> = (0..1usize << n)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| (0..n).filter(|j| mask >> j & 1 == 1).collect())
        .collect();
    let basic = subsets
        .into_iter()
        .max_by(|s, t| {
            let det = |cols: &Vec<usize>| a.select_columns(cols.iter()).determinant().abs();
            det(s).total_cmp(&det(t))
        })
        .expect("M <= N");
    let free: Vec<usize> = (0..n).filter(|j| !basic.contains(j)).collect();
    let block_inv = a
        .select_columns(basic.iter())
        .try_inverse()
        .ok_or_else(|| Error::invalid("aggregation map is rank deficient"))?;

    let steps = (2.0 * half_width / grid_step + 1e-9).floor() as usize;
    let grid = |i: usize| -half_width + i as f64 * grid_step;
    let slack = 1e-12 * half_width.max(1.0);
    let mut best = f64::NEG_INFINITY;
    let mut index = vec![0usize; free.len()];
    loop {
        let mut x = DVector::zeros(n);
        let mut rhs = y.clone();
        for (slot, &j) in index.iter().zip(&free) {
            x[j] = grid(*slot);
            rhs.axpy(-x[j], &a.column(j), 1.0);
        }
        let xb = &block_inv * rhs;
        if xb.iter().all(|v| v.abs() <= half_width + slack) {
            for (v, &j) in xb.iter().zip(&basic) {
                x[j] = *v;
            }
            best = best.max(utility.value(&x));
        }
        // odometer over the free coordinates
        let mut pos = 0;
        while pos < index.len() {
            index[pos] += 1;
            if index[pos] <= steps {
                break;
            }
            index[pos] = 0;
            pos += 1;
        }
        if pos == index.len() {
            break;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Infeasible(format!(
            "no grid point of the box meets A x = {:?}",
            y.as_slice()
        )));
    }
    Ok(best)
}
