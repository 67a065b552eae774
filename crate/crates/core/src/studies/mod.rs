//! Experiment harness: reduction-equivalence batches, law invariance,
//! empirical stability and the direct-vs-reduced benchmark.
//!
//! Every study is reproducible bit for bit from its arguments and seed.
//! Instance `i` draws from its own ChaCha stream `i` under the study seed, so
//! results do not depend on how the parallel pool schedules work. Wall times
//! are the only nondeterministic fields; [`StudyReport::without_timings`]
//! strips them.

mod benchmark;
pub mod instances;
mod law_invariance;
mod reduction;
mod stability;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::shortfall::SolverConfig;

pub use benchmark::{run_benchmark, BenchSize};
pub use law_invariance::{run_law_invariance_study, LAW_INVARIANCE_TOL};
pub use reduction::{run_reduction_study, ALLOCATION_TOL, REDUCTION_TOL};
pub use stability::{default_stability_setup, run_stability_study, StabilitySetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Reduction,
    LawInvariance,
    Stability,
    Benchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Ok,
    Violation,
    Excluded,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    /// Short description, e.g. `N=3 M=2 K=4 exp-sum`.
    pub label: String,
    pub status: InstanceStatus,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

impl InstanceRecord {
    fn new(id: usize, label: impl Into<String>) -> Self {
        Self {
            id,
            label: label.into(),
            status: InstanceStatus::Ok,
            metrics: BTreeMap::new(),
            error: None,
            wall_time_ms: None,
        }
    }

    fn metric(&mut self, key: &str, value: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    fn fail(&mut self, err: impl ToString) -> &mut Self {
        self.status = InstanceStatus::Error;
        self.error = Some(err.to_string());
        self
    }
}

/// One point of a convergence series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub n: usize,
    pub median_error: f64,
    pub median_allocation_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub seed: u64,
    pub solver: SolverConfig,
    pub passed: bool,
    pub instances: Vec<InstanceRecord>,
    pub summary: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<SeriesPoint>,
}

impl StudyReport {
    fn new(kind: StudyKind, seed: u64, solver: SolverConfig) -> Self {
        Self {
            kind,
            seed,
            solver,
            passed: true,
            instances: Vec::new(),
            summary: BTreeMap::new(),
            series: Vec::new(),
        }
    }

    pub fn count(&self, status: InstanceStatus) -> usize {
        self.instances.iter().filter(|r| r.status == status).count()
    }

    /// Largest value of `metric` over instances that report it.
    pub fn max_metric(&self, metric: &str) -> Option<f64> {
        self.instances
            .iter()
            .filter_map(|r| r.metrics.get(metric).copied())
            .reduce(f64::max)
    }

    /// The report with every wall time removed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.instances {
            r.wall_time_ms = None;
            r.metrics.retain(|k, _| !k.ends_with("_ms"));
        }
        out.summary.retain(|k, _| !k.ends_with("_ms"));
        out
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_json_round_trips() {
        let mut report = StudyReport::new(StudyKind::Reduction, 7, SolverConfig::default());
        let mut rec = InstanceRecord::new(0, "N=2 M=1 K=1 exp-sum");
        rec.metric("gap", 0.1 + 0.2).metric("direct_ms", 1.5);
        rec.wall_time_ms = Some(3.0);
        report.instances.push(rec);
        report.summary.insert("max_gap".into(), 1.0 / 3.0);
        let text = report.to_json_pretty();
        let back: StudyReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        let stripped = report.without_timings();
        assert!(stripped.instances[0].wall_time_ms.is_none());
        assert!(!stripped.instances[0].metrics.contains_key("direct_ms"));
        assert!(text.contains("\"kind\": \"reduction\""));
    }
}
