//! Reduced shortfall solvers and the systemic risk result.
//!
//! With `Z = A X` the aggregated position, the systemic risk is
//!
//! ```text
//! ρ(X) = inf { Σ_m α_m : E[□U(Z + α)] >= 0 },
//! ```
//!
//! and the optimal allocation in scenario `k` is `Y_k = -X_k + Θ(Z_k + α̂)`.
//! For `M = 1` the optimal budget is the root of the increasing map
//! `α ↦ E[□U(Z + α)]`. For `M >= 2` it solves the stationarity system
//! `E[□U(Z + α)] = 0`, `E[λ_m(Z + α)] = E[λ_1(Z + α)]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMap;
use crate::numeric::{compensated_sum, inf_norm, CompensatedSum, CompensatedVecSum};
use crate::scenario::{aggregate_positions, law_fingerprint, LawFingerprint, ScenarioSet};
use crate::supconv::{SupConvSolution, SupConvolution};
use crate::utility::UtilityModel;
use crate::{Error, Result};

/// Perturbation used by the a-posteriori optimality probes for `M >= 2`.
pub const PROBE_STEP: f64 = 1e-4;

const MAX_BRACKET_EXPANSIONS: usize = 40;
const MULTIPLIER_BLOWUP: f64 = 1e12;
const PARALLEL_THRESHOLD: usize = 512;
/// Acceptance residual at which the diagonal start hands over to the joint Newton.
const DIAGONAL_START_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Feasibility tolerance of every sup-convolution solve.
    pub kkt_tol: f64,
    /// Tolerance on `E[□U(Z + α̂)]` at the reported optimum.
    pub root_tol: f64,
    /// Tolerance on equal expected marginals for `M >= 2`.
    pub budget_tol: f64,
    pub max_iter: usize,
    pub bracket_growth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-10,
            root_tol: 1e-12,
            budget_tol: 1e-10,
            max_iter: 100,
            bracket_growth: 4.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let tols = [self.kkt_tol, self.root_tol, self.budget_tol];
        if tols.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::invalid("solver tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.bracket_growth >= 2.0 && self.bracket_growth.is_finite()) {
            return Err(Error::invalid("bracket_growth must be at least 2"));
        }
        Ok(())
    }

    /// Same config with every tolerance set to `tol`.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.kkt_tol = tol;
        self.root_tol = tol;
        self.budget_tol = tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskStatus {
    Converged,
    Infeasible,
    UnboundedBelow,
}

impl RiskStatus {
    pub fn of_error(err: &Error) -> Option<Self> {
        match err {
            Error::Infeasible(_) => Some(RiskStatus::Infeasible),
            Error::UnboundedBelow(_) => Some(RiskStatus::UnboundedBelow),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Outer iterations of the budget solver (bracketing plus Newton).
    pub iterations: usize,
    /// Distinct atoms of the aggregated law.
    pub atoms: usize,
    /// Largest KKT residual over the final sup-convolution solves.
    pub max_kkt_residual: f64,
    /// Outcome of the perturbation probes (`M >= 2` only).
    pub probes_passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemicRiskResult {
    pub status: RiskStatus,
    /// `Σ_m α̂_m`.
    pub rho: f64,
    pub alpha_hat: DVector<f64>,
    /// `K×N`, row `k` is the allocation `Y_k`.
    pub allocation: DMatrix<f64>,
    /// `E[U(X + Y)]`.
    pub expected_utility_slack: f64,
    /// `max_k |(A Y_k)_m - α̂_m|` for each `m`.
    pub budget_check: DVector<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct ResultJson<'a> {
    status: RiskStatus,
    rho: f64,
    alpha_hat: Vec<f64>,
    allocation: Vec<Vec<f64>>,
    diagnostics: DiagnosticsJson<'a>,
}

#[derive(Serialize)]
struct DiagnosticsJson<'a> {
    expected_utility_slack: f64,
    budget_check: Vec<f64>,
    #[serde(flatten)]
    solver: &'a Diagnostics,
}

impl SystemicRiskResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ResultJson {
            status: self.status,
            rho: self.rho,
            alpha_hat: self.alpha_hat.iter().copied().collect(),
            allocation: self
                .allocation
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            diagnostics: DiagnosticsJson {
                expected_utility_slack: self.expected_utility_slack,
                budget_check: self.budget_check.iter().copied().collect(),
                solver: &self.diagnostics,
            },
        })
        .expect("result is serializable")
    }
}

struct ReducedEval {
    /// `E[□U(Z + α)]`
    value: f64,
    /// `E[λ(Z + α)]`
    marginal: DVector<f64>,
    /// `E[∇λ(Z + α)]`, when requested
    jacobian: Option<DMatrix<f64>>,
}

/// Last solve of one atom, used to predict the next multiplier.
struct WarmStart {
    y: DVector<f64>,
    multiplier: DVector<f64>,
    jacobian: DMatrix<f64>,
}

impl WarmStart {
    /// First-order prediction `λ + J (y' - y)`, or `λ` when that leaves the
    /// positive orthant.
    fn predict(&self, y: &DVector<f64>) -> DVector<f64> {
        let guess = &self.multiplier + &self.jacobian * (y - &self.y);
        if guess.iter().all(|l| *l > 0.0 && l.is_finite()) {
            guess
        } else {
            self.multiplier.clone()
        }
    }
}

/// The reduced `M`-dimensional shortfall problem over a discrete law of
/// aggregated values.
struct ReducedProblem<'a> {
    supconv: SupConvolution<'a>,
    values: Vec<DVector<f64>>,
    probs: Vec<f64>,
    warm: Vec<Option<WarmStart>>,
    sup: f64,
    cfg: SolverConfig,
}

impl<'a> ReducedProblem<'a> {
    fn new(
        utility: &'a UtilityModel,
        map: &'a AggregationMap,
        values: &DMatrix<f64>,
        probs: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if utility.supremum() <= 0.0 {
            return Err(Error::Infeasible(format!(
                "sup U = {} is not positive; no budget is acceptable",
                utility.supremum()
            )));
        }
        let supconv = SupConvolution::new(utility, map, cfg)?;
        if values.ncols() != map.rows() {
            return Err(Error::DimensionMismatch {
                expected: map.rows(),
                got: values.ncols(),
                context: "aggregated values vs aggregation rows",
            });
        }
        if values.nrows() == 0 || probs.len() != values.nrows() {
            return Err(Error::DimensionMismatch {
                expected: values.nrows(),
                got: probs.len(),
                context: "probabilities per aggregated scenario",
            });
        }
        if values.iter().any(|v| !v.is_finite()) || probs.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::invalid(
                "aggregated values must be finite and weights positive",
            ));
        }
        Ok(Self {
            supconv,
            values: values.row_iter().map(|r| r.transpose()).collect(),
            probs: probs.to_vec(),
            warm: (0..values.nrows()).map(|_| None).collect(),
            sup: utility.supremum(),
            cfg: *cfg,
        })
    }

    fn dim(&self) -> usize {
        self.supconv.map().rows()
    }

    fn mean_value(&self) -> DVector<f64> {
        let mut acc = CompensatedVecSum::zeros(self.dim());
        for (z, p) in self.values.iter().zip(&self.probs) {
            acc.add_scaled(*p, z);
        }
        acc.value()
    }

    fn evaluate(&mut self, alpha: &DVector<f64>, with_jacobian: bool) -> Result<ReducedEval> {
        let m = self.dim();
        let mut value = CompensatedSum::new();
        let mut marginal = CompensatedVecSum::zeros(m);
        let mut jac = with_jacobian.then(|| vec![CompensatedSum::new(); m * m]);
        for k in 0..self.values.len() {
            let y = &self.values[k] + alpha;
            let start = self.warm[k].as_ref().map(|w| w.predict(&y));
            let sol = self.supconv.solve_from(&y, start.as_ref())?;
            let p = self.probs[k];
            value.add(p * sol.value);
            marginal.add_scaled(p, &sol.multiplier);
            // also kept for the next warm start
            let h = self.supconv.multiplier_jacobian(&sol);
            if let Some(acc) = jac.as_mut() {
                for (slot, hv) in acc.iter_mut().zip(h.iter()) {
                    slot.add(p * hv);
                }
            }
            self.warm[k] = Some(WarmStart {
                y,
                multiplier: sol.multiplier,
                jacobian: h,
            });
        }
        let marginal = marginal.value();
        if marginal
            .iter()
            .any(|l| !l.is_finite() || *l > MULTIPLIER_BLOWUP)
        {
            return Err(Error::Infeasible(format!(
                "expected multipliers blew up at alpha = {:?}",
                alpha.as_slice()
            )));
        }
        Ok(ReducedEval {
            value: value.value(),
            marginal,
            jacobian: jac
                .map(|acc| DMatrix::from_iterator(m, m, acc.iter().map(CompensatedSum::value))),
        })
    }

    /// Root of `s ↦ E[□U(Z + base + s·1)]`, which is increasing in `s`.
    /// Returns `(s, iterations)`.
    fn root_along_diagonal(&mut self, base: &DVector<f64>) -> Result<(f64, usize)> {
        let ones = DVector::from_element(self.dim(), 1.0);
        let tol = self.cfg.root_tol;
        let growth = self.cfg.bracket_growth;
        let phi = |this: &mut Self, s: f64| -> Result<(f64, f64)> {
            let e = this.evaluate(&(base + &ones * s), false)?;
            Ok((e.value, e.marginal.sum()))
        };

        let mut iterations = 0;
        let (mut s, mut f, mut slope) = {
            let (f0, d0) = phi(self, 0.0)?;
            (0.0, f0, d0)
        };
        let mut step = self
            .values
            .iter()
            .flat_map(|z| z.iter().copied())
            .fold(1.0_f64, |acc, v| acc.max(v.abs()));

        // bracket: phi(lo) < 0 <= phi(hi)
        let (mut lo, mut hi) = if f >= 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (0.0, f64::INFINITY)
        };
        while lo == f64::NEG_INFINITY || hi == f64::INFINITY {
            if f.abs() <= tol {
                return Ok((s, iterations));
            }
            if iterations >= MAX_BRACKET_EXPANSIONS {
                let msg = format!("expected sup-convolution is {f} at budget shift {s}");
                return Err(if f >= 0.0 {
                    Error::UnboundedBelow(msg)
                } else {
                    Error::Infeasible(format!("{msg}; sup U may not be positive"))
                });
            }
            iterations += 1;
            let probe = if f >= 0.0 { -step } else { step };
            (f, slope) = phi(self, probe)?;
            s = probe;
            if f >= 0.0 {
                hi = probe;
            } else {
                lo = probe;
            }
            step *= growth;
        }

        // Newton, safeguarded by the bracket and by bisection on poor progress
        let mut bisect = false;
        for _ in 0..self.cfg.max_iter {
            if f.abs() <= tol {
                return Ok((s, iterations));
            }
            if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
                return Ok((hi, iterations));
            }
            iterations += 1;
            let newton = s - f / slope;
            let next = if !bisect && slope > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let (fn_, dn) = phi(self, next)?;
            bisect = fn_.abs() > 0.5 * f.abs();
            if fn_ < 0.0 {
                lo = next;
            } else {
                hi = next;
            }
            (s, f, slope) = (next, fn_, dn);
        }
        Err(Error::NoConvergence {
            solver: "shortfall root finder",
            iterations,
            residual: f.abs(),
        })
    }

    fn solve_univariate(&mut self) -> Result<(DVector<f64>, usize)> {
        let base = -self.mean_value();
        let (s, iterations) = self.root_along_diagonal(&base)?;
        Ok((base + DVector::from_element(1, s), iterations))
    }

    /// Acceptance equation in log-gap form (see `diagonal_newton`) and the
    /// marginal differences, with the scale of the first row's derivative.
    fn stationarity(&self, eval: &ReducedEval) -> (DVector<f64>, f64) {
        let m = eval.marginal.len();
        let gap = self.sup - eval.value;
        let (head, scale) = if gap > 0.0 {
            (gap.ln() - self.sup.ln(), -1.0 / gap)
        } else {
            (eval.value, 1.0)
        };
        let r = DVector::from_iterator(
            m,
            std::iter::once(head).chain((1..m).map(|i| eval.marginal[i] - eval.marginal[0])),
        );
        (r, scale)
    }

    fn converged(&self, eval: &ReducedEval) -> bool {
        let m = eval.marginal.len();
        eval.value.abs() <= self.cfg.root_tol
            && (1..m).all(|i| (eval.marginal[i] - eval.marginal[0]).abs() <= self.cfg.budget_tol)
    }

    /// Root of the increasing `s ↦ E[□U(Z + base + s·1)]`. Below `sup U` the
    /// gap `sup U - E[□U]` decays roughly like a mixture of exponentials, so
    /// Newton runs on its logarithm, which is then nearly linear. Returns the
    /// shift, the evaluation there (with Jacobian) and the iteration count.
    fn diagonal_newton(
        &mut self,
        base: &DVector<f64>,
        tol: f64,
    ) -> Result<(f64, ReducedEval, usize)> {
        let ones = DVector::from_element(self.dim(), 1.0);
        let mut s = 0.0;
        let mut eval = self.evaluate(base, true)?;
        for iterations in 0..self.cfg.max_iter {
            let slope = eval.marginal.sum();
            if eval.value.abs() <= tol {
                return Ok((s, eval, iterations));
            }
            if !(slope > 0.0 && slope.is_finite()) {
                break;
            }
            let gap = self.sup - eval.value;
            let step = if gap > 0.0 {
                (gap.ln() - self.sup.ln()) * gap / slope
            } else {
                -eval.value / slope
            };
            if step.abs() <= 4.0 * f64::EPSILON * s.abs().max(1.0) {
                return Ok((s, eval, iterations));
            }
            let mut t = 1.0;
            let mut next = None;
            for _ in 0..=crate::supconv::MAX_HALVINGS {
                match self.evaluate(&(base + &ones * (s + t * step)), true) {
                    Ok(e) => {
                        next = Some(e);
                        break;
                    }
                    Err(Error::NoConvergence { .. } | Error::Domain(_) | Error::Infeasible(_)) => {
                        t *= 0.5
                    }
                    Err(err) => return Err(err),
                }
            }
            let Some(e) = next else { break };
            s += t * step;
            eval = e;
        }
        Err(Error::NoConvergence {
            solver: "diagonal budget Newton",
            iterations: self.cfg.max_iter,
            residual: eval.value.abs(),
        })
    }

    fn solve_multivariate(&mut self) -> Result<(DVector<f64>, usize, bool)> {
        let m = self.dim();
        let mean = -self.mean_value();
        // a rough diagonal root is enough to start the stationarity Newton
        let start_tol = self.cfg.root_tol.max(DIAGONAL_START_TOL);
        let (mut alpha, mut eval, mut iterations) = match self.diagonal_newton(&mean, start_tol) {
            Ok((s, eval, it)) => (&mean + DVector::from_element(m, s), eval, it),
            Err(_) => {
                let (s, it) = self.root_along_diagonal(&mean)?;
                let alpha = &mean + DVector::from_element(m, s);
                let eval = self.evaluate(&alpha, true)?;
                (alpha, eval, it)
            }
        };
        let (mut residual, mut scale) = self.stationarity(&eval);

        let mut done = self.converged(&eval);
        for _ in 0..self.cfg.max_iter {
            if done {
                break;
            }
            iterations += 1;
            let jac_lambda = eval.jacobian.as_ref().expect("jacobian requested");
            let mut jac = DMatrix::zeros(m, m);
            for j in 0..m {
                jac[(0, j)] = scale * eval.marginal[j];
                for i in 1..m {
                    jac[(i, j)] = jac_lambda[(i, j)] - jac_lambda[(0, j)];
                }
            }
            let step = jac.lu().solve(&(-&residual)).ok_or_else(|| {
                Error::Infeasible(
                    "singular stationarity Jacobian; optimal budget may not exist".into(),
                )
            })?;
            if !step.iter().all(|v| v.is_finite()) {
                return Err(Error::Infeasible(
                    "non-finite Newton step for the budget".into(),
                ));
            }
            let norm = residual.norm();
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=crate::supconv::MAX_HALVINGS {
                let trial = &alpha + &step * t;
                match self.evaluate(&trial, true) {
                    Ok(e) => {
                        let (r, sc) = self.stationarity(&e);
                        if r.norm() < (1.0 - 1e-4 * t) * norm || self.converged(&e) {
                            accepted = Some((trial, e, r, sc));
                            break;
                        }
                    }
                    // overshooting into a region where inner solves fail or
                    // multipliers explode: shorten the step
                    Err(Error::NoConvergence { .. } | Error::Domain(_) | Error::Infeasible(_)) => {}
                    Err(err) => return Err(err),
                }
                t *= 0.5;
            }
            let Some((next, e, r, sc)) = accepted else {
                return Err(Error::Infeasible(format!(
                    "budget Newton stalled with stationarity residual {:e}",
                    inf_norm(&residual)
                )));
            };
            alpha = next;
            eval = e;
            residual = r;
            scale = sc;
            done = self.converged(&eval);
        }
        if !done {
            return Err(Error::Infeasible(format!(
                "budget Newton did not reach stationarity (residual {:e}); \
                 the infimum may not be attained",
                inf_norm(&residual)
            )));
        }
        let probes = self.probe(&alpha, eval.value)?;
        Ok((alpha, iterations, probes))
    }

    /// `2M + 1` probes: cost-neutral moves `±δ(e_m - 1/M)` must not raise the
    /// expected utility, and the cheaper diagonal move `-δ/M·1` must break it.
    fn probe(&mut self, alpha: &DVector<f64>, base: f64) -> Result<bool> {
        let m = self.dim();
        let slack = 1e-12 + 1e-9 * self.cfg.budget_tol.max(self.cfg.root_tol);
        let mut seen: Vec<DVector<f64>> = Vec::with_capacity(2 * m);
        for i in 0..m {
            for sign in [-1.0, 1.0] {
                let mut d = DVector::from_element(m, -1.0 / m as f64);
                d[i] += 1.0;
                let trial = alpha + d * (sign * PROBE_STEP);
                // for M = 2 the moves of the two coordinates coincide
                if seen.contains(&trial) {
                    continue;
                }
                if self.evaluate(&trial, false)?.value > base + slack {
                    return Ok(false);
                }
                seen.push(trial);
            }
        }
        let cheaper = alpha - DVector::from_element(m, PROBE_STEP / m as f64);
        Ok(self.evaluate(&cheaper, false)?.value < 0.0)
    }

    fn solve(&mut self) -> Result<(DVector<f64>, usize, Option<bool>)> {
        if self.dim() == 1 {
            let (alpha, it) = self.solve_univariate()?;
            Ok((alpha, it, None))
        } else {
            let (alpha, it, probes) = self.solve_multivariate()?;
            if !probes {
                return Err(Error::Infeasible(
                    "perturbation probes found a cheaper acceptable budget".into(),
                ));
            }
            Ok((alpha, it, Some(true)))
        }
    }
}

/// Optimal budget for a single aggregate (`M = 1`).
pub fn shortfall_univariate(
    utility: &UtilityModel,
    map: &AggregationMap,
    values: &DMatrix<f64>,
    probs: &[f64],
    cfg: &SolverConfig,
) -> Result<f64> {
    if map.rows() != 1 {
        return Err(Error::invalid(
            "univariate shortfall needs a single aggregate",
        ));
    }
    let mut problem = ReducedProblem::new(utility, map, values, probs, cfg)?;
    Ok(problem.solve_univariate()?.0[0])
}

/// Optimal budget vector for `M >= 2` aggregates.
pub fn shortfall_multivariate(
    utility: &UtilityModel,
    map: &AggregationMap,
    values: &DMatrix<f64>,
    probs: &[f64],
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    if map.rows() < 2 {
        return Err(Error::invalid(
            "multivariate shortfall needs at least two aggregates",
        ));
    }
    let mut problem = ReducedProblem::new(utility, map, values, probs, cfg)?;
    let (alpha, _, _) = problem.solve()?;
    Ok(alpha)
}

/// Optimal budget of the reduced problem over a canonical law of aggregates.
fn reduced_budget(
    utility: &UtilityModel,
    map: &AggregationMap,
    law: &LawFingerprint,
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, usize, Option<bool>)> {
    let (values, probs) = law.to_values();
    ReducedProblem::new(utility, map, &values, &probs, cfg)?.solve()
}

/// Systemic risk, optimal budget and optimal allocation of `scenarios`.
pub fn systemic_risk(
    scenarios: &ScenarioSet,
    utility: &UtilityModel,
    map: &AggregationMap,
    cfg: &SolverConfig,
) -> Result<SystemicRiskResult> {
    cfg.validate()?;
    if utility.dim() != scenarios.dim() {
        return Err(Error::DimensionMismatch {
            expected: scenarios.dim(),
            got: utility.dim(),
            context: "utility dimension vs firms",
        });
    }
    let aggregated = aggregate_positions(scenarios, map)?;
    let law = law_fingerprint(&aggregated, scenarios.probs())?;
    let (alpha_hat, iterations, probes) = reduced_budget(utility, map, &law, cfg)?;

    let supconv = SupConvolution::new(utility, map, cfg)?;
    let k = scenarios.len();
    let solve_row = |i: usize| -> Result<SupConvSolution> {
        let y = aggregated.row(i).transpose() + &alpha_hat;
        supconv.solve(&y)
    };
    let solutions: Vec<SupConvSolution> = if k >= PARALLEL_THRESHOLD {
        (0..k)
            .into_par_iter()
            .map(solve_row)
            .collect::<Result<_>>()?
    } else {
        (0..k).map(solve_row).collect::<Result<_>>()?
    };

    let n = scenarios.dim();
    let allocation = DMatrix::from_fn(k, n, |i, j| {
        solutions[i].optimizer[j] - scenarios.positions()[(i, j)]
    });
    let expected_utility_slack = compensated_sum((0..k).map(|i| {
        let total = scenarios.position(i) + allocation.row(i).transpose();
        scenarios.probs()[i] * utility.value(&total)
    }));
    let mut budget_check = DVector::zeros(map.rows());
    for i in 0..k {
        let spent = map.matrix() * allocation.row(i).transpose() - &alpha_hat;
        for (slot, v) in budget_check.iter_mut().zip(spent.iter()) {
            *slot = f64::max(*slot, v.abs());
        }
    }
    let max_kkt_residual = solutions.iter().fold(0.0_f64, |m, s| m.max(s.kkt_residual));
    Ok(SystemicRiskResult {
        status: RiskStatus::Converged,
        rho: compensated_sum(alpha_hat.iter().copied()),
        alpha_hat,
        allocation,
        expected_utility_slack,
        budget_check,
        diagnostics: Diagnostics {
            iterations,
            atoms: law.atoms().len(),
            max_kkt_residual,
            probes_passed: probes,
        },
    })
}

/// Optimal budget `α̂` for an aggregated law given directly by its fingerprint.
pub fn budget_of_distribution(
    law: &LawFingerprint,
    utility: &UtilityModel,
    map: &AggregationMap,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    if law.dim() != map.rows() {
        return Err(Error::DimensionMismatch {
            expected: map.rows(),
            got: law.dim(),
            context: "law dimension vs aggregation rows",
        });
    }
    Ok(reduced_budget(utility, map, law, cfg)?.0)
}

/// Risk of an aggregated law given directly by its fingerprint.
pub fn risk_of_distribution(
    law: &LawFingerprint,
    utility: &UtilityModel,
    map: &AggregationMap,
    cfg: &SolverConfig,
) -> Result<f64> {
    let alpha = budget_of_distribution(law, utility, map, cfg)?;
    Ok(compensated_sum(alpha.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::grouping_map;
    use crate::oracle::direct_primal_solve;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn grouping() -> AggregationMap {
        grouping_map(&[vec![0, 1], vec![2]]).unwrap()
    }

    #[test]
    fn deterministic_sum_map() {
        let u = UtilityModel::symmetric(2);
        let set = ScenarioSet::deterministic(&[1.0, 2.0]).unwrap();
        let r = systemic_risk(&set, &u, &AggregationMap::sum(2), &cfg()).unwrap();
        assert_abs_diff_eq!(r.rho, -3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.allocation[(0, 0)], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.allocation[(0, 1)], -2.0, epsilon = 1e-10);
        assert!(r.expected_utility_slack.abs() <= 1e-10);
    }

    #[test]
    fn two_scenario_closed_form() {
        let u = UtilityModel::symmetric(2);
        let values = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let a = shortfall_univariate(&u, &AggregationMap::sum(2), &values, &[0.5, 0.5], &cfg())
            .unwrap();
        assert_abs_diff_eq!(a, 2.0 * 0.5f64.cosh().ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_position_is_free() {
        let u = UtilityModel::symmetric(2);
        let values = DMatrix::zeros(1, 1);
        let a = shortfall_univariate(&u, &AggregationMap::sum(2), &values, &[1.0], &cfg()).unwrap();
        assert!(a.abs() <= 1e-12);
    }

    #[test]
    fn grouping_examples() {
        let u = UtilityModel::symmetric(3);
        let map = grouping();
        for x in [[0.0, 0.0, 0.0], [1.0, -1.0, 0.0]] {
            let set = ScenarioSet::deterministic(&x).unwrap();
            let r = systemic_risk(&set, &u, &map, &cfg()).unwrap();
            assert!(r.alpha_hat.amax() <= 1e-9, "{x:?}: {:?}", r.alpha_hat);
            assert_eq!(r.diagnostics.probes_passed, Some(true));
        }
        let set = ScenarioSet::deterministic(&[1.0, -1.0, 0.0]).unwrap();
        let r = systemic_risk(&set, &u, &map, &cfg()).unwrap();
        let y: Vec<f64> = r.allocation.row(0).iter().copied().collect();
        for (got, want) in y.iter().zip([-1.0, 1.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn grouping_with_third_firm_surplus() {
        let u = UtilityModel::symmetric(3);
        for t in [0.5, 1.0, 2.5] {
            let values = DMatrix::from_row_slice(1, 2, &[0.0, t]);
            let a = shortfall_multivariate(&u, &grouping(), &values, &[1.0], &cfg()).unwrap();
            assert_abs_diff_eq!(a[0], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(a[1], -t, epsilon = 1e-9);
        }
    }

    #[test]
    fn distribution_interface() {
        let u = UtilityModel::symmetric(2);
        let map = AggregationMap::sum(2);
        let law = law_fingerprint(&DMatrix::zeros(1, 1), &[1.0]).unwrap();
        assert!(risk_of_distribution(&law, &u, &map, &cfg()).unwrap().abs() <= 1e-12);
        let a =
            law_fingerprint(&DMatrix::from_column_slice(2, 1, &[1.0, -1.0]), &[0.5, 0.5]).unwrap();
        let b =
            law_fingerprint(&DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]), &[0.5, 0.5]).unwrap();
        let ra = risk_of_distribution(&a, &u, &map, &cfg()).unwrap();
        assert_abs_diff_eq!(ra, 2.0 * 0.5f64.cosh().ln(), epsilon = 1e-10);
        assert_eq!(ra, risk_of_distribution(&b, &u, &map, &cfg()).unwrap());
    }

    #[test]
    fn result_json_shape() {
        let u = UtilityModel::symmetric(2);
        let set = ScenarioSet::deterministic(&[1.0, 2.0]).unwrap();
        let json = systemic_risk(&set, &u, &AggregationMap::sum(2), &cfg())
            .unwrap()
            .to_json();
        assert_eq!(json["status"], "converged");
        assert!(json["rho"].is_number());
        assert_eq!(json["allocation"].as_array().unwrap().len(), 1);
        assert!(json["diagnostics"]["expected_utility_slack"].is_number());
        assert!(json["diagnostics"]["iterations"].is_number());
    }

    #[test]
    fn infeasible_when_sup_is_not_positive() {
        let u = UtilityModel::exp_sum(vec![1.0, 1.0], vec![1.0, 1.0], -3.0).unwrap();
        let set = ScenarioSet::deterministic(&[0.0, 0.0]).unwrap();
        let err = systemic_risk(&set, &u, &AggregationMap::sum(2), &cfg()).unwrap_err();
        assert_eq!(RiskStatus::of_error(&err), Some(RiskStatus::Infeasible));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig {
            bracket_growth: 1.5,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            kkt_tol: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert_eq!(cfg().with_tolerance(1e-8).root_tol, 1e-8);
    }

    #[test]
    fn reduction_matches_oracle_on_coupled_grouping() {
        let u =
            UtilityModel::exp_sum_coupled(vec![1.0, 0.7, 1.4], vec![0.9, 1.6, 0.6], 0.2, 0.3, 1.1)
                .unwrap();
        let map = AggregationMap::from_rows(&[vec![1.0, 0.6, 0.0], vec![0.0, 0.0, 1.3]]).unwrap();
        let positions =
            DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 0.5, -0.3, 2.2, -1.0, 0.0, 0.4, 1.7]);
        let set = ScenarioSet::new(positions, vec![0.2, 0.5, 0.3]).unwrap();
        let r = systemic_risk(&set, &u, &map, &cfg()).unwrap();
        let o = direct_primal_solve(&set, &u, &map, &cfg()).unwrap();
        assert!((r.rho - o.value).abs() <= 1e-5 * (1.0 + r.rho.abs()));
        assert!((&r.allocation - &o.allocation).amax() <= 1e-4);
        assert!(r.budget_check.amax() <= 1e-9);
    }

    #[test]
    fn newton_overshoot_into_blowup_is_damped() {
        let u = UtilityModel::exp_sum(
            vec![0.7101730803309786, 1.1528446732938273],
            vec![1.7241286797296036, 1.7428670749189004],
            0.7653402941235952,
        )
        .unwrap();
        let map = AggregationMap::from_rows(&[
            vec![0.0, 1.1792753730837289],
            vec![1.2103782490842467, 0.0],
        ])
        .unwrap();
        let positions = DMatrix::from_row_slice(
            5,
            2,
            &[
                -2.364540687252727,
                -2.987853989220177,
                -2.2387721999118564,
                0.8686538915276794,
                2.0524640882305496,
                -1.5532495534239303,
                -2.6531450652957913,
                1.709490121268482,
                -1.74699072865964,
                2.9082735488624065,
            ],
        );
        let set = ScenarioSet::new(
            positions,
            vec![
                0.1903526292975268,
                0.2501301104569834,
                0.07324825296582418,
                0.22967071163008276,
                0.2565982956495828,
            ],
        )
        .unwrap();
        let r = systemic_risk(&set, &u, &map, &cfg()).unwrap();
        let o = direct_primal_solve(&set, &u, &map, &cfg()).unwrap();
        assert!((r.rho - o.value).abs() <= 1e-5 * (1.0 + r.rho.abs()));
    }

    fn positions(k: usize, n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-3.0..3.0f64, k * n)
            .prop_map(move |v| DMatrix::from_row_slice(k, n, &v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cash_additivity(x in positions(3, 3), w in prop::collection::vec(-2.0..2.0f64, 3)) {
            let u = UtilityModel::symmetric(3);
            let map = grouping();
            let set = ScenarioSet::uniform(x).unwrap();
            let base = systemic_risk(&set, &u, &map, &cfg()).unwrap().rho;
            let moved = systemic_risk(&set.shifted(&w).unwrap(), &u, &map, &cfg()).unwrap().rho;
            let spent: f64 = (map.matrix() * DVector::from_vec(w)).sum();
            prop_assert!((moved - (base - spent)).abs() <= 1e-8);
        }

        #[test]
        fn monotone(x in positions(4, 2), bump in prop::collection::vec(0.0..1.0f64, 8)) {
            let u = UtilityModel::exp_sum(vec![1.0, 2.0], vec![0.5, 1.5], 0.1).unwrap();
            let map = AggregationMap::sum(2);
            let set = ScenarioSet::uniform(x.clone()).unwrap();
            let better = set.with_positions(x + DMatrix::from_row_slice(4, 2, &bump)).unwrap();
            let r = systemic_risk(&set, &u, &map, &cfg()).unwrap().rho;
            let r_better = systemic_risk(&better, &u, &map, &cfg()).unwrap().rho;
            prop_assert!(r >= r_better - 1e-8);
        }

        #[test]
        fn convex(x in positions(3, 3), x2 in positions(3, 3), t in 0.01..0.99f64) {
            let u = UtilityModel::symmetric(3);
            let map = grouping();
            let a = ScenarioSet::uniform(x.clone()).unwrap();
            let b = a.with_positions(x2.clone()).unwrap();
            let mix = a.with_positions(x * t + x2 * (1.0 - t)).unwrap();
            let rho = |s: &ScenarioSet| systemic_risk(s, &u, &map, &cfg()).unwrap().rho;
            prop_assert!(rho(&mix) <= t * rho(&a) + (1.0 - t) * rho(&b) + 1e-8);
        }

        #[test]
        fn allocation_is_optimal_and_feasible(x in positions(4, 3)) {
            let u = UtilityModel::exp_sum_coupled(vec![1.0, 1.5, 0.8], vec![1.0, 0.7, 1.2], 0.0, 0.3, 0.8).unwrap();
            let map = AggregationMap::sum(3);
            let set = ScenarioSet::uniform(x).unwrap();
            let r = systemic_risk(&set, &u, &map, &cfg()).unwrap();
            prop_assert!(r.expected_utility_slack.abs() <= 1e-10);
            prop_assert!(r.budget_check.amax() <= 1e-9);
            for i in 0..set.len() {
                let spent = (map.matrix() * r.allocation.row(i).transpose()).sum();
                prop_assert!((spent - r.rho).abs() <= 1e-9);
            }
        }

        #[test]
        fn permutation_gives_identical_result(x in positions(5, 2), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let u = UtilityModel::exp_sum(vec![1.0, 2.0], vec![0.5, 1.5], 0.1).unwrap();
            let map = AggregationMap::sum(2);
            let set = ScenarioSet::new(x, vec![0.1, 0.3, 0.2, 0.25, 0.15]).unwrap();
            let r1 = systemic_risk(&set, &u, &map, &cfg()).unwrap();
            let r2 = systemic_risk(&set.permuted(&perm).unwrap(), &u, &map, &cfg()).unwrap();
            prop_assert_eq!(r1.rho, r2.rho);
        }
    }
}
