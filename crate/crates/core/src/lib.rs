//! Shortfall systemic risk measures on finite scenario sets.
//!
//! A system of `N` firms holds random positions `X`. Capital is allocated
//! scenario by scenario, subject to the constraint that the aggregated
//! allocation `A·Y` is deterministic. The minimal total cost of making the
//! system acceptable, `E[U(X + Y)] >= 0`, reduces to an `M`-dimensional
//! shortfall problem for the aggregated position `A·X` under the
//! sup-convolution utility
//!
//! ```text
//! □U(y) = sup { U(x) : A x = y }.
//! ```
//!
//! The optimal allocation is recovered in closed form from the KKT
//! multiplier of that inner problem: `Y = -X + Θ(A X + α̂)`.
//!
//! Modules, bottom up:
//!
//! * [`scenario`]: finite probability spaces and law fingerprints.
//! * [`utility`]: parametric utilities with conjugates.
//! * [`aggregation`]: aggregation matrices and their validation.
//! * [`supconv`]: the sup-convolution, its gradient and the allocation map.
//! * [`shortfall`]: reduced shortfall solvers and the systemic risk result.
//! * [`oracle`]: brute-force primal solver used for certification.
//! * [`studies`]: experiment harness behind the CLI.

pub mod aggregation;
pub mod config;
mod error;
pub mod numeric;
pub mod oracle;
pub mod scenario;
pub mod shortfall;
pub mod studies;
pub mod supconv;
pub mod utility;

pub use aggregation::{grouping_map, validate_map, AggregationMap, MapValidation};
pub use error::{Error, Result};
pub use scenario::{LawFingerprint, ScenarioSet};
pub use shortfall::{
    budget_of_distribution, risk_of_distribution, shortfall_multivariate, shortfall_univariate,
    systemic_risk, RiskStatus, SolverConfig, SystemicRiskResult,
};
pub use supconv::{solve_supconv, supconv_conjugate, supconv_value_grad, theta, SupConvSolution};
pub use utility::{AssumptionReport, UtilityFamily, UtilityModel};

pub use nalgebra::{DMatrix, DVector};
