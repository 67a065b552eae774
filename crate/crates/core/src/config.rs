//! Run configuration files.
//!
//! ```json
//! {
//!   "utility": {"family": "exp-sum", "c": [1, 1], "alpha": [1, 1]},
//!   "aggregation": {"matrix": [[1, 1]]},
//!   "solver": {"kkt_tol": 1e-10},
//!   "scenarios": "scenarios.csv"
//! }
//! ```
//!
//! `aggregation` is either `{"matrix": [[...]]}` or `{"groups": [[1, 2], [3]]}`
//! with 1-based firm indices. `scenarios` is a path, resolved against the
//! config file's directory, or an inline `{"probs": [...], "positions": [[...]]}`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::aggregation::{grouping_map_one_based, validate_map, AggregationMap, MapValidation};
use crate::scenario::{load_scenarios, ScenarioFormat, ScenarioJson, ScenarioSet};
use crate::shortfall::SolverConfig;
use crate::utility::UtilityModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum AggregationSpec {
    Matrix { matrix: Vec<Vec<f64>> },
    Groups { groups: Vec<Vec<usize>> },
}

impl AggregationSpec {
    /// The raw matrix, before validation.
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            AggregationSpec::Matrix { matrix } => {
                let m = matrix.len();
                let n = matrix.first().map_or(0, Vec::len);
                if m == 0 || n == 0 || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid(
                        "aggregation matrix must be a nonempty rectangle",
                    ));
                }
                let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
                Ok(DMatrix::from_row_slice(m, n, &flat))
            }
            AggregationSpec::Groups { groups } => {
                Ok(grouping_map_one_based(groups)?.matrix().clone())
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScenarioSpec {
    Path(PathBuf),
    Inline(ScenarioJson),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    utility: UtilityModel,
    aggregation: AggregationSpec,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    scenarios: Option<ScenarioSpec>,
}

/// A parsed configuration. The aggregation matrix is kept unvalidated so that
/// invalid maps can still be reported on.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub utility: UtilityModel,
    pub aggregation: DMatrix<f64>,
    pub solver: SolverConfig,
    pub scenarios: Option<ScenarioSet>,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let scenarios = match raw.scenarios {
            None => None,
            Some(ScenarioSpec::Inline(json)) => Some(json.into_set()?),
            Some(ScenarioSpec::Path(p)) => {
                let path = if p.is_absolute() { p } else { base_dir.join(p) };
                Some(load_scenarios(&path, ScenarioFormat::from_path(&path))?)
            }
        };
        Ok(Self {
            utility: raw.utility,
            aggregation: raw.aggregation.matrix()?,
            solver: raw.solver,
            scenarios,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, dir)
    }

    pub fn validation(&self) -> MapValidation {
        validate_map(&self.aggregation)
    }

    pub fn map(&self) -> Result<AggregationMap> {
        let map = AggregationMap::new(self.aggregation.clone())?;
        if map.cols() != self.utility.dim() {
            return Err(Error::DimensionMismatch {
                expected: map.cols(),
                got: self.utility.dim(),
                context: "utility dimension vs aggregation columns",
            });
        }
        Ok(map)
    }

    pub fn scenarios(&self) -> Result<&ScenarioSet> {
        self.scenarios
            .as_ref()
            .ok_or_else(|| Error::invalid("config has no scenarios"))
    }
}
