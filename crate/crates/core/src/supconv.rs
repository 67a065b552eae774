//! The sup-convolution `□U(y) = sup { U(x) : A x = y }`.
//!
//! The maximizer is characterized by the KKT system
//!
//! ```text
//! ∇U(x) = Aᵀλ,   A x = y,
//! ```
//!
//! and the multiplier `λ(y) >= 0` is the gradient of `□U` at `y`. Working with
//! the convex `f = -U`, `x = ∇f*(-Aᵀλ)`, so `λ` minimizes the smooth dual
//!
//! ```text
//! D(λ) = <λ, y> + f*(-Aᵀλ),   ∇D = y - A x(λ),   ∇²D = A ∇²f*(-Aᵀλ) Aᵀ,
//! ```
//!
//! which is solved by damped Newton. The image function `□^A f` of convex
//! analysis equals `-□U`; its gradient is `-λ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::aggregation::AggregationMap;
use crate::numeric::{inf_norm, solve_spd};
use crate::shortfall::SolverConfig;
use crate::utility::UtilityModel;
use crate::{Error, Result};

/// Step halvings allowed per dual Newton iteration.
pub const MAX_HALVINGS: usize = 60;
/// Residual below which a warm start is used without trying the closed-form one.
const WARM_ACCEPT: f64 = 1e-3;
/// Relative residual at which the final Newton step would gain nothing.
const POLISHED: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupConvSolution {
    pub y: DVector<f64>,
    /// `□U(y) = U(optimizer)`.
    pub value: f64,
    pub optimizer: DVector<f64>,
    /// `λ(y) = ∇□U(y)`, componentwise nonnegative.
    pub multiplier: DVector<f64>,
    /// Max of `|Ax - y|∞` and `|∇U(x) - Aᵀλ|∞ / max(1, |Aᵀλ|∞)`.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Reusable solver bound to one utility and aggregation map.
#[derive(Debug, Clone, Copy)]
pub struct SupConvolution<'a> {
    utility: &'a UtilityModel,
    map: &'a AggregationMap,
    kkt_tol: f64,
    max_iter: usize,
}

struct DualPoint {
    lambda: DVector<f64>,
    x: DVector<f64>,
    dual: f64,
    residual: DVector<f64>,
}

impl<'a> SupConvolution<'a> {
    pub fn new(
        utility: &'a UtilityModel,
        map: &'a AggregationMap,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        if utility.dim() != map.cols() {
            return Err(Error::DimensionMismatch {
                expected: map.cols(),
                got: utility.dim(),
                context: "utility dimension vs aggregation columns",
            });
        }
        Ok(Self {
            utility,
            map,
            kkt_tol: cfg.kkt_tol,
            max_iter: cfg.max_iter,
        })
    }

    pub fn utility(&self) -> &'a UtilityModel {
        self.utility
    }

    pub fn map(&self) -> &'a AggregationMap {
        self.map
    }

    /// Row-wise closed form of the separable exponential part: exact for
    /// exp-sum utilities under maps with one nonzero per column.
    pub fn initial_multiplier(&self, y: &DVector<f64>) -> DVector<f64> {
        let a = self.map.matrix();
        let c = self.utility.weights();
        let rates = self.utility.decay_rates();
        DVector::from_iterator(
            a.nrows(),
            (0..a.nrows()).map(|m| {
                let (mut s, mut t) = (0.0, 0.0);
                for n in 0..a.ncols() {
                    let w = a[(m, n)];
                    if w > 0.0 {
                        s += w / rates[n];
                        t += w / rates[n] * (w / (c[n] * rates[n])).ln();
                    }
                }
                (-(y[m] + t) / s).clamp(-700.0, 700.0).exp()
            }),
        )
    }

    fn in_domain(&self, lambda: &DVector<f64>) -> bool {
        self.map
            .matrix()
            .tr_mul(lambda)
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    fn evaluate(&self, lambda: DVector<f64>, y: &DVector<f64>) -> Result<DualPoint> {
        let z = -self.map.matrix().tr_mul(&lambda);
        let x = self.utility.conjugate_grad(&z)?;
        let dual = lambda.dot(y) + x.dot(&z) + self.utility.value(&x);
        let residual = self.map.matrix() * &x - y;
        Ok(DualPoint {
            lambda,
            x,
            dual,
            residual,
        })
    }

    fn kkt_residual(&self, point: &DualPoint) -> f64 {
        let pull = self.map.matrix().tr_mul(&point.lambda);
        let stationarity =
            inf_norm(&(self.utility.gradient(&point.x) - &pull)) / inf_norm(&pull).max(1.0);
        inf_norm(&point.residual).max(stationarity)
    }

    /// `∇²D = A ∇²f* Aᵀ` at the primal point `x`.
    fn dual_hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let a = self.map.matrix();
        let (v, k) = self.utility.conjugate_hessian_parts(x);
        let av = a * &v;
        DMatrix::from_fn(a.nrows(), a.nrows(), |i, j| {
            let diag: f64 = (0..a.ncols()).map(|n| a[(i, n)] * v[n] * a[(j, n)]).sum();
            diag - k * av[i] * av[j]
        })
    }

    fn newton_step(&self, point: &DualPoint) -> Option<DVector<f64>> {
        solve_spd(&self.dual_hessian(&point.x), &point.residual)
    }

    pub fn solve(&self, y: &DVector<f64>) -> Result<SupConvSolution> {
        self.solve_from(y, None)
    }

    /// Solves at `y`, starting from `start` when it lies in the dual domain and
    /// fits better than the closed-form estimate.
    pub fn solve_from(
        &self,
        y: &DVector<f64>,
        start: Option<&DVector<f64>>,
    ) -> Result<SupConvSolution> {
        if y.len() != self.map.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.map.rows(),
                got: y.len(),
                context: "sup-convolution target",
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sup-convolution target must be finite"));
        }
        let warm = start
            .filter(|s| s.len() == y.len() && self.in_domain(s))
            .and_then(|s| self.evaluate(s.clone(), y).ok());
        let mut point = match warm {
            Some(w) if inf_norm(&w.residual) <= WARM_ACCEPT => w,
            Some(w) => {
                let cold = self.evaluate(self.initial_multiplier(y), y)?;
                if inf_norm(&w.residual) < inf_norm(&cold.residual) {
                    w
                } else {
                    cold
                }
            }
            None => self.evaluate(self.initial_multiplier(y), y)?,
        };
        let mut iterations = 0;
        loop {
            let res_norm = inf_norm(&point.residual);
            if res_norm <= self.kkt_tol {
                // one extra full step squares the residual at negligible cost
                let polished = res_norm <= POLISHED * inf_norm(y).max(1.0);
                if let Some(step) = self.newton_step(&point).filter(|_| !polished) {
                    let trial = &point.lambda + step;
                    if self.in_domain(&trial) {
                        if let Ok(cand) = self.evaluate(trial, y) {
                            if inf_norm(&cand.residual) < res_norm {
                                point = cand;
                            }
                        }
                    }
                }
                // stationarity holds to the gradient-inversion tolerance by construction
                let kkt_residual = self.kkt_residual(&point);
                return Ok(SupConvSolution {
                    y: y.clone(),
                    value: self.utility.value(&point.x),
                    optimizer: point.x,
                    multiplier: point.lambda,
                    kkt_residual,
                    iterations,
                });
            }
            if iterations >= self.max_iter {
                return Err(Error::NoConvergence {
                    solver: "sup-convolution dual Newton",
                    iterations,
                    residual: res_norm,
                });
            }
            iterations += 1;
            let step = self.newton_step(&point).ok_or(Error::NoConvergence {
                solver: "sup-convolution dual Newton (singular Hessian)",
                iterations,
                residual: res_norm,
            })?;
            let slope = -point.residual.dot(&step);
            let mut t = 1.0;
            let mut next = None;
            for _ in 0..=MAX_HALVINGS {
                let trial = &point.lambda + &step * t;
                if self.in_domain(&trial) {
                    if let Ok(cand) = self.evaluate(trial, y) {
                        let decreased = cand.dual <= point.dual + 1e-4 * t * slope;
                        if cand.dual.is_finite()
                            && (decreased || inf_norm(&cand.residual) < res_norm)
                        {
                            next = Some(cand);
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            match next {
                Some(cand) => point = cand,
                None => {
                    return Err(Error::NoConvergence {
                        solver: "sup-convolution dual Newton (line search)",
                        iterations,
                        residual: res_norm,
                    })
                }
            }
        }
    }

    /// `dλ/dy = ∇²□U(y) = -(A ∇²f* Aᵀ)⁻¹`, negative definite.
    pub fn multiplier_jacobian(&self, solution: &SupConvSolution) -> DMatrix<f64> {
        let hess = self.dual_hessian(&solution.optimizer);
        let m = hess.nrows();
        let inv = hess
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| hess.try_inverse())
            .unwrap_or_else(|| DMatrix::from_element(m, m, f64::NAN));
        -inv
    }

    /// `Θ(y) = ∇f*(-Aᵀ λ(y))`, the maximizer expressed through the multiplier.
    pub fn theta(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let sol = self.solve(y)?;
        self.utility
            .conjugate_grad(&-self.map.matrix().tr_mul(&sol.multiplier))
    }

    /// `(□^A f)*(z) = f*(Aᵀz)`, defined when every coordinate of `Aᵀz` is negative.
    pub fn conjugate(&self, z: &DVector<f64>) -> Result<f64> {
        let pulled = self.map.transpose_apply(z)?;
        self.utility.conjugate(&pulled)
    }
}

pub fn solve_supconv(
    utility: &UtilityModel,
    map: &AggregationMap,
    y: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SupConvSolution> {
    SupConvolution::new(utility, map, cfg)?.solve(y)
}

/// Value and gradient of `□U` at `y`; the gradient is the KKT multiplier.
pub fn supconv_value_grad(
    utility: &UtilityModel,
    map: &AggregationMap,
    y: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<(f64, DVector<f64>)> {
    let sol = solve_supconv(utility, map, y, cfg)?;
    Ok((sol.value, sol.multiplier))
}

pub fn theta(
    utility: &UtilityModel,
    map: &AggregationMap,
    y: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    SupConvolution::new(utility, map, cfg)?.theta(y)
}

pub fn supconv_conjugate(
    utility: &UtilityModel,
    map: &AggregationMap,
    z: &DVector<f64>,
) -> Result<f64> {
    SupConvolution::new(utility, map, &SolverConfig::default())?.conjugate(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::grouping_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn coupled3() -> UtilityModel {
        UtilityModel::exp_sum_coupled(vec![1.0, 1.5, 0.7], vec![1.2, 0.6, 1.9], 0.3, 0.4, 0.8)
            .unwrap()
    }

    #[test]
    fn symmetric_sum_at_zero() {
        let sol = solve_supconv(
            &UtilityModel::symmetric(2),
            &AggregationMap::sum(2),
            &v(&[0.0]),
            &cfg(),
        )
        .unwrap();
        assert!(sol.optimizer.amax() < 1e-14);
        assert!((sol.multiplier[0] - 1.0).abs() < 1e-14);
        assert!(sol.value.abs() < 1e-14);
    }

    #[test]
    fn symmetric_sum_closed_form_on_grid() {
        let u = UtilityModel::symmetric(2);
        let a = AggregationMap::sum(2);
        for i in 0..=20 {
            let y = -5.0 + 0.5 * i as f64;
            let sol = solve_supconv(&u, &a, &v(&[y]), &cfg()).unwrap();
            assert!((sol.value - 2.0 * (1.0 - (-y / 2.0).exp())).abs() < 1e-12);
            assert!((sol.optimizer[0] - y / 2.0).abs() < 1e-12);
            assert!((sol.optimizer[1] - y / 2.0).abs() < 1e-12);
            assert!((sol.multiplier[0] - (-y / 2.0).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_hand_solved_case() {
        let u = UtilityModel::exp_sum(vec![1.0, 1.0], vec![1.0, 2.0], 0.0).unwrap();
        let y = -(2.0_f64.ln());
        let sol = solve_supconv(&u, &AggregationMap::sum(2), &v(&[y]), &cfg()).unwrap();
        assert!((sol.optimizer[0] + 2.0_f64.ln()).abs() < 1e-12);
        assert!(sol.optimizer[1].abs() < 1e-12);
        assert!((sol.multiplier[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn value_grad_examples() {
        let u = UtilityModel::symmetric(2);
        let a = AggregationMap::sum(2);
        let (value, grad) = supconv_value_grad(&u, &a, &v(&[0.0]), &cfg()).unwrap();
        assert!(value.abs() < 1e-14 && (grad[0] - 1.0).abs() < 1e-14);
        let (_, g5) = supconv_value_grad(&u, &a, &v(&[5.0]), &cfg()).unwrap();
        assert!(g5[0] < grad[0]);
    }

    #[test]
    fn theta_examples() {
        let u = UtilityModel::symmetric(2);
        let t = theta(&u, &AggregationMap::sum(2), &v(&[3.0]), &cfg()).unwrap();
        assert!((t - v(&[1.5, 1.5])).amax() < 1e-12);

        let g = grouping_map(&[vec![0, 1], vec![2]]).unwrap();
        let t = theta(&UtilityModel::symmetric(3), &g, &v(&[0.0, 4.0]), &cfg()).unwrap();
        assert!((t - v(&[0.0, 0.0, 4.0])).amax() < 1e-12);

        let y = v(&[0.3, -1.7, 2.2]);
        for util in [UtilityModel::symmetric(3), coupled3()] {
            let t = theta(&util, &AggregationMap::identity(3), &y, &cfg()).unwrap();
            assert!((t - &y).amax() < 1e-9);
        }
    }

    #[test]
    fn conjugate_examples() {
        let u = UtilityModel::symmetric(2);
        let a = AggregationMap::sum(2);
        assert!(supconv_conjugate(&u, &a, &v(&[-1.0])).unwrap().abs() < 1e-15);
        assert!(matches!(
            supconv_conjugate(&u, &a, &v(&[0.1])),
            Err(Error::Domain(_))
        ));
        let z = v(&[-1.0, -0.5]);
        let direct = u.conjugate(&z).unwrap();
        assert_eq!(
            supconv_conjugate(&u, &AggregationMap::identity(2), &z).unwrap(),
            direct
        );
    }

    #[test]
    fn dimension_errors() {
        let u = UtilityModel::symmetric(3);
        assert!(solve_supconv(&u, &AggregationMap::sum(2), &v(&[0.0]), &cfg()).is_err());
        assert!(solve_supconv(&u, &AggregationMap::sum(3), &v(&[0.0, 1.0]), &cfg()).is_err());
        assert!(solve_supconv(&u, &AggregationMap::sum(3), &v(&[f64::NAN]), &cfg()).is_err());
    }

    #[test]
    fn coupled_solutions_satisfy_invariants() {
        let u = coupled3();
        let g = AggregationMap::from_rows(&[vec![0.5, 1.0, 0.0], vec![0.0, 0.0, 1.3]]).unwrap();
        let sc = SupConvolution::new(&u, &g, &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let y = v(&[rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)]);
            let sol = sc.solve(&y).unwrap();
            assert!(sol.kkt_residual <= 1e-10, "{}", sol.kkt_residual);
            assert!(sol.multiplier.iter().all(|l| *l >= 0.0));
            assert!((g.matrix() * &sol.optimizer - &y).amax() <= 1e-10);
            assert_eq!(sol.value, u.value(&sol.optimizer));
            let th = sc.theta(&y).unwrap();
            assert!((th - &sol.optimizer).amax() <= 1e-9);
        }
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let u = coupled3();
        let a = AggregationMap::sum(3);
        let sc = SupConvolution::new(&u, &a, &cfg()).unwrap();
        let cold = sc.solve(&v(&[1.0])).unwrap();
        let warm = sc.solve_from(&v(&[1.0]), Some(&v(&[0.9]))).unwrap();
        assert!((cold.value - warm.value).abs() < 1e-12);
        // a start outside the dual domain falls back to the default
        let fallback = sc.solve_from(&v(&[1.0]), Some(&v(&[-1.0]))).unwrap();
        assert!((cold.value - fallback.value).abs() < 1e-12);
    }

    #[test]
    fn multiplier_jacobian_matches_differences() {
        let u = coupled3();
        let g = AggregationMap::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let sc = SupConvolution::new(&u, &g, &cfg()).unwrap();
        let y = v(&[0.4, -0.8]);
        let jac = sc.multiplier_jacobian(&sc.solve(&y).unwrap());
        let h = 1e-5;
        for j in 0..2 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let fd =
                (sc.solve(&yp).unwrap().multiplier - sc.solve(&ym).unwrap().multiplier) / (2.0 * h);
            assert!((fd - jac.column(j)).amax() < 1e-6);
        }
    }
}
