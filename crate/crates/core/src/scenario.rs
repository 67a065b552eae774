//! Finite probability spaces.
//!
//! A [`ScenarioSet`] holds `K` scenarios of `N`-dimensional positions with
//! strictly positive probabilities. Laws of aggregated positions are compared
//! through their canonical [`LawFingerprint`].

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMap;
use crate::numeric::{compensated_sum, CompensatedSum};
use crate::{Error, Result};

/// Deviation of the probability total from one that is silently corrected.
pub const RENORMALIZE_WINDOW: f64 = 1e-9;

/// Per-coordinate tolerance under which two atoms are the same point.
pub const ATOM_MERGE_TOL: f64 = 1e-10;

/// Tolerance on atom weights when comparing two fingerprints.
pub const ATOM_PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    positions: DMatrix<f64>,
    probs: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl ScenarioSet {
    /// Builds a scenario set from a `K×N` position matrix and `K` probabilities.
    ///
    /// Probabilities summing to within [`RENORMALIZE_WINDOW`] of one are
    /// rescaled; any larger deviation is rejected.
    pub fn new(positions: DMatrix<f64>, probs: Vec<f64>) -> Result<Self> {
        let k = positions.nrows();
        if k == 0 || positions.ncols() == 0 {
            return Err(Error::invalid("scenario set needs K >= 1 and N >= 1"));
        }
        if probs.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: probs.len(),
                context: "probabilities per scenario",
            });
        }
        if let Some((i, _)) = positions.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite position entry in scenario {}",
                i % k
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p > 0.0) || !p.is_finite())
        {
            return Err(Error::invalid(format!(
                "nonpositive probability {p} in scenario {i}"
            )));
        }
        let total = compensated_sum(probs.iter().copied());
        if (total - 1.0).abs() > RENORMALIZE_WINDOW {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        let probs = if total == 1.0 {
            probs
        } else {
            probs.into_iter().map(|p| p / total).collect()
        };
        Ok(Self {
            positions,
            probs,
            labels: None,
        })
    }

    /// Scenario set with equal weights `1/K`.
    pub fn uniform(positions: DMatrix<f64>) -> Result<Self> {
        let k = positions.nrows();
        Self::new(positions, vec![1.0 / k.max(1) as f64; k])
    }

    /// Single scenario holding `position` with probability one.
    pub fn deterministic(position: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(1, position.len(), position),
            vec![1.0],
        )
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
                context: "scenario labels",
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Number of scenarios `K`.
    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of firms `N`.
    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn position(&self, k: usize) -> DVector<f64> {
        self.positions.row(k).transpose()
    }

    /// Same probabilities, positions replaced.
    pub fn with_positions(&self, positions: DMatrix<f64>) -> Result<Self> {
        if positions.shape() != self.positions.shape() {
            return Err(Error::invalid(
                "replacement positions must keep the K×N shape",
            ));
        }
        let mut out = Self::new(positions, self.probs.clone())?;
        // already normalized: a second division could move them by an ulp
        out.probs.clone_from(&self.probs);
        out.labels = self.labels.clone();
        Ok(out)
    }

    /// Adds the deterministic vector `w` to every scenario.
    pub fn shifted(&self, w: &[f64]) -> Result<Self> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
                context: "cash shift",
            });
        }
        let mut positions = self.positions.clone();
        for mut row in positions.row_iter_mut() {
            for (x, dw) in row.iter_mut().zip(w) {
                *x += dw;
            }
        }
        self.with_positions(positions)
    }

    /// Reorders scenarios: scenario `i` of the result is scenario `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.len();
        let mut seen = vec![false; k];
        if perm.len() != k
            || perm
                .iter()
                .any(|&j| j >= k || std::mem::replace(&mut seen[j], true))
        {
            return Err(Error::invalid("not a permutation of the scenarios"));
        }
        let positions = DMatrix::from_fn(k, self.dim(), |i, n| self.positions[(perm[i], n)]);
        let probs: Vec<f64> = perm.iter().map(|&j| self.probs[j]).collect();
        let mut out = Self::new(positions, probs.clone())?;
        out.probs = probs;
        out.labels = self
            .labels
            .as_ref()
            .map(|l| perm.iter().map(|&j| l[j].clone()).collect());
        Ok(out)
    }
}

/// On-disk scenario file encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioFormat {
    Csv,
    Json,
}

impl ScenarioFormat {
    /// Guesses the format from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => ScenarioFormat::Json,
            _ => ScenarioFormat::Csv,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ScenarioJson {
    pub probs: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ScenarioJson {
    pub(crate) fn into_set(self) -> Result<ScenarioSet> {
        let k = self.positions.len();
        let n = self.positions.first().map_or(0, Vec::len);
        if let Some(bad) = self.positions.iter().position(|row| row.len() != n) {
            return Err(Error::Parse(format!(
                "scenario {bad} has {} positions, expected {n}",
                self.positions[bad].len()
            )));
        }
        let flat: Vec<f64> = self.positions.into_iter().flatten().collect();
        let set = ScenarioSet::new(DMatrix::from_row_slice(k, n, &flat), self.probs)?;
        match self.labels {
            Some(labels) => set.with_labels(labels),
            None => Ok(set),
        }
    }

    pub(crate) fn from_set(set: &ScenarioSet) -> Self {
        Self {
            probs: set.probs.clone(),
            positions: set
                .positions
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            labels: set.labels.clone(),
        }
    }
}

pub fn load_scenarios(path: &Path, format: ScenarioFormat) -> Result<ScenarioSet> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        ScenarioFormat::Csv => parse_scenarios_csv(&text),
        ScenarioFormat::Json => parse_scenarios_json(&text),
    }
}

pub fn save_scenarios(set: &ScenarioSet, path: &Path, format: ScenarioFormat) -> Result<()> {
    let text = match format {
        ScenarioFormat::Csv => scenarios_to_csv(set),
        ScenarioFormat::Json => scenarios_to_json(set),
    };
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_scenarios_json(text: &str) -> Result<ScenarioSet> {
    let raw: ScenarioJson = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    raw.into_set()
}

pub fn scenarios_to_json(set: &ScenarioSet) -> String {
    serde_json::to_string_pretty(&ScenarioJson::from_set(set))
        .expect("scenario JSON is serializable")
}

/// Parses the `prob,X1,...,XN` CSV layout.
pub fn parse_scenarios_csv(text: &str) -> Result<ScenarioSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "prob" {
        return Err(Error::Parse("CSV header must be prob,X1,...,XN".into()));
    }
    for (i, h) in headers.iter().enumerate().skip(1) {
        if h != format!("X{i}") {
            return Err(Error::Parse(format!(
                "unexpected CSV column {h:?}, expected X{i}"
            )));
        }
    }
    let n = headers.len() - 1;
    let mut probs = Vec::new();
    let mut flat = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        if record.len() != n + 1 {
            return Err(Error::Parse(format!(
                "row {} has {} columns, expected {}",
                line + 1,
                record.len(),
                n + 1
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: cannot parse {field:?}", line + 1)))?;
            if j == 0 {
                probs.push(v);
            } else {
                flat.push(v);
            }
        }
    }
    ScenarioSet::new(DMatrix::from_row_slice(probs.len(), n, &flat), probs)
}

/// Writes the `prob,X1,...,XN` CSV layout. Numbers use the shortest
/// representation that parses back to the identical `f64`.
pub fn scenarios_to_csv(set: &ScenarioSet) -> String {
    let mut out = String::from("prob");
    for n in 1..=set.dim() {
        out.push_str(&format!(",X{n}"));
    }
    out.push('\n');
    for (k, p) in set.probs.iter().enumerate() {
        out.push_str(&format!("{p:?}"));
        for x in set.positions.row(k).iter() {
            out.push_str(&format!(",{x:?}"));
        }
        out.push('\n');
    }
    out
}

/// A law with bounded support that can be sampled and discretized.
pub trait BoundedSampler: Send + Sync {
    fn dim(&self) -> usize;

    /// Radius of a sup-norm ball carrying all the mass.
    fn radius(&self) -> f64;

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Fixed, seedless discretization used as the reference law.
    fn reference(&self) -> ScenarioSet;
}

/// Finitely supported law.
#[derive(Debug, Clone)]
pub struct DiscreteLaw {
    atoms: Vec<DVector<f64>>,
    cumulative: Vec<f64>,
    reference: ScenarioSet,
}

impl DiscreteLaw {
    pub fn new(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        let k = atoms.len();
        let n = atoms.first().map_or(0, Vec::len);
        if atoms.iter().any(|a| a.len() != n) {
            return Err(Error::invalid(
                "atoms of a discrete law must share a dimension",
            ));
        }
        let flat: Vec<f64> = atoms.iter().flatten().copied().collect();
        let reference = ScenarioSet::new(DMatrix::from_row_slice(k, n, &flat), probs)?;
        let mut acc = 0.0;
        let cumulative = reference
            .probs()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            atoms: atoms.into_iter().map(DVector::from_vec).collect(),
            cumulative,
            reference,
        })
    }

    pub fn point_mass(x: Vec<f64>) -> Result<Self> {
        Self::new(vec![x], vec![1.0])
    }
}

impl BoundedSampler for DiscreteLaw {
    fn dim(&self) -> usize {
        self.reference.dim()
    }

    fn radius(&self) -> f64 {
        self.reference
            .positions()
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.atoms.len() - 1);
        self.atoms[idx].clone()
    }

    fn reference(&self) -> ScenarioSet {
        self.reference.clone()
    }
}

/// Independent uniform coordinates on a box.
#[derive(Debug, Clone)]
pub struct UniformBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Approximate number of atoms in the reference grid of a [`UniformBox`].
pub const REFERENCE_GRID_ATOMS: usize = 2001;

impl UniformBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::invalid(
                "uniform box needs lo < hi in every coordinate",
            ));
        }
        Ok(Self { lo, hi })
    }
}

impl BoundedSampler for UniformBox {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn radius(&self) -> f64 {
        self.lo
            .iter()
            .chain(&self.hi)
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(a, b)| rng.random_range(*a..*b)),
        )
    }

    /// Product grid of equal-probability quantile midpoints, with
    /// `ceil(2001^(1/N))` points per coordinate.
    fn reference(&self) -> ScenarioSet {
        let n = self.dim();
        let per_dim = (REFERENCE_GRID_ATOMS as f64).powf(1.0 / n as f64).ceil() as usize;
        let total = per_dim.pow(n as u32);
        let positions = DMatrix::from_fn(total, n, |row, col| {
            let idx = (row / per_dim.pow(col as u32)) % per_dim;
            let u = (idx as f64 + 0.5) / per_dim as f64;
            self.lo[col] + u * (self.hi[col] - self.lo[col])
        });
        ScenarioSet::uniform(positions).expect("grid is a valid scenario set")
    }
}

/// Empirical measure of `n` i.i.d. draws, each with weight `1/n`.
pub fn empirical_from_samples(
    sampler: &dyn BoundedSampler,
    n: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    if n == 0 {
        return Err(Error::invalid(
            "empirical measure needs at least one sample",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = sampler.dim();
    let mut flat = Vec::with_capacity(n * dim);
    for _ in 0..n {
        flat.extend(sampler.sample(&mut rng).iter());
    }
    ScenarioSet::uniform(DMatrix::from_row_slice(n, dim, &flat))
}

/// `K×M` matrix whose row `k` is `A · X_k`.
pub fn aggregate_positions(set: &ScenarioSet, map: &AggregationMap) -> Result<DMatrix<f64>> {
    if map.cols() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.cols(),
            got: set.dim(),
            context: "aggregation map columns vs firms",
        });
    }
    Ok(set.positions() * map.matrix().transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: Vec<f64>,
    pub prob: f64,
}

/// Canonical form of a discrete law: atoms sorted lexicographically with
/// points closer than [`ATOM_MERGE_TOL`] merged into the smallest one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawFingerprint {
    atoms: Vec<Atom>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn within_tol(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= ATOM_MERGE_TOL)
}

impl LawFingerprint {
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms.first().map_or(0, |a| a.value.len())
    }

    /// Same law up to the merge tolerance on values and [`ATOM_PROB_TOL`] on weights.
    pub fn same_law(&self, other: &LawFingerprint) -> bool {
        self.atoms.len() == other.atoms.len()
            && self.atoms.iter().zip(&other.atoms).all(|(a, b)| {
                a.value.len() == b.value.len()
                    && within_tol(&a.value, &b.value)
                    && (a.prob - b.prob).abs() <= ATOM_PROB_TOL
            })
    }

    /// Atom values as a `K×M` matrix together with their weights.
    pub fn to_values(&self) -> (DMatrix<f64>, Vec<f64>) {
        let m = self.dim();
        let flat: Vec<f64> = self
            .atoms
            .iter()
            .flat_map(|a| a.value.iter().copied())
            .collect();
        (
            DMatrix::from_row_slice(self.atoms.len(), m, &flat),
            self.atoms.iter().map(|a| a.prob).collect(),
        )
    }
}

pub fn law_fingerprint(values: &DMatrix<f64>, probs: &[f64]) -> Result<LawFingerprint> {
    let k = values.nrows();
    if probs.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: probs.len(),
            context: "probabilities per value row",
        });
    }
    if probs.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::invalid("fingerprint probabilities must be positive"));
    }
    let rows: Vec<Vec<f64>> = values
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| lex_cmp(&rows[i], &rows[j]).then(probs[i].total_cmp(&probs[j])));

    let mut merged: Vec<(&Vec<f64>, CompensatedSum)> = Vec::new();
    for &i in &order {
        let v = &rows[i];
        let mut target = None;
        for (j, (value, _)) in merged.iter().enumerate().rev() {
            if value[0] < v[0] - ATOM_MERGE_TOL {
                break;
            }
            if within_tol(value, v) {
                target = Some(j);
                break;
            }
        }
        match target {
            Some(j) => merged[j].1.add(probs[i]),
            None => merged.push((v, std::iter::once(probs[i]).collect())),
        }
    }
    let atoms = merged
        .into_iter()
        .map(|(value, prob)| Atom {
            value: value.clone(),
            prob: prob.value(),
        })
        .collect();
    Ok(LawFingerprint { atoms })
}
