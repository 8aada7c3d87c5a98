//! Sentence-stride trajectories: loading, validation, standardization,
//! jump filtering and jump-norm statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Default minimum increment norm, in standardized units.
pub const DEFAULT_MIN_JUMP: f64 = 10.0;

/// One hidden-state path `h_0, ..., h_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub model_tag: String,
    pub task_tag: String,
    states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        model_tag: impl Into<String>,
        task_tag: impl Into<String>,
        states: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |message: String| Error::InvalidTrajectory {
            id: id.clone(),
            message,
        };
        if states.len() < 2 {
            return Err(invalid(format!(
                "needs at least 2 states, found {}",
                states.len()
            )));
        }
        let dim = states[0].len();
        if dim == 0 {
            return Err(invalid("state dimension must be at least 1".into()));
        }
        for (step, s) in states.iter().enumerate() {
            if s.len() != dim {
                return Err(invalid(format!(
                    "state {step} has dimension {}, expected {dim}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("state {step} has a non-finite entry")));
            }
        }
        Ok(Self {
            id,
            model_tag: model_tag.into(),
            task_tag: task_tag.into(),
            states,
        })
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.states.len() - 1
    }

    /// `Δh_t = h_{t+1} - h_t` for every transition.
    pub fn increments(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.states.windows(2).map(|w| &w[1] - &w[0])
    }

    fn with_states(&self, states: Vec<DVector<f64>>) -> Self {
        Self {
            id: self.id.clone(),
            model_tag: self.model_tag.clone(),
            task_tag: self.task_tag.clone(),
            states,
        }
    }
}

/// Per-dimension affine map `z = (h - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardization {
    pub fn apply(&self, h: &DVector<f64>) -> DVector<f64> {
        (h - &self.mean).component_div(&self.scale)
    }

    pub fn invert(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_mul(&self.scale) + &self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    trajectories: Vec<Trajectory>,
    dim: usize,
    standardization: Option<Standardization>,
}

impl TrajectorySet {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let dim = trajectories.first().map_or(0, Trajectory::dim);
        for t in &trajectories {
            if t.dim() != dim {
                return Err(Error::InvalidTrajectory {
                    id: t.id.clone(),
                    message: format!("dimension {} differs from set dimension {dim}", t.dim()),
                });
            }
        }
        Ok(Self {
            trajectories,
            dim,
            standardization: None,
        })
    }

    /// An empty set with a known dimension.
    pub fn empty(dim: usize) -> Self {
        Self {
            trajectories: Vec::new(),
            dim,
            standardization: None,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn n_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::n_transitions).sum()
    }

    pub fn all_states(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.trajectories.iter().flat_map(|t| t.states.iter())
    }

    pub fn all_increments(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.trajectories.iter().flat_map(Trajectory::increments)
    }

    /// Subset by trajectory index, keeping the standardization record.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            dim: self.dim,
            standardization: self.standardization.clone(),
        }
    }

    /// Concatenates two sets of equal dimension. The standardization record
    /// of `self` is kept.
    pub fn concat(&self, other: &TrajectorySet) -> Result<Self> {
        if !self.is_empty() && !other.is_empty() {
            check_dim(self.dim, other.dim)?;
        }
        let mut trajectories = self.trajectories.clone();
        trajectories.extend(other.trajectories.iter().cloned());
        Ok(Self {
            trajectories,
            dim: if self.is_empty() { other.dim } else { self.dim },
            standardization: self.standardization.clone(),
        })
    }

    /// Maps every state through a standardization fitted elsewhere.
    pub fn apply_standardization(&self, st: &Standardization) -> Result<Self> {
        check_dim(self.dim, st.mean.len())?;
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| t.with_states(t.states.iter().map(|h| st.apply(h)).collect()))
            .collect();
        Ok(Self {
            trajectories,
            dim: self.dim,
            standardization: Some(compose(self.standardization.as_ref(), st)),
        })
    }
}

/// Standardization equivalent to applying `inner` and then `outer`.
fn compose(inner: Option<&Standardization>, outer: &Standardization) -> Standardization {
    match inner {
        None => outer.clone(),
        Some(i) => Standardization {
            mean: &i.mean + i.scale.component_mul(&outer.mean),
            scale: i.scale.component_mul(&outer.scale),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    id: String,
    model: String,
    task: String,
    states: Vec<Vec<f64>>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_trajectories(path: &Path, format: Format) -> Result<TrajectorySet> {
    match format {
        Format::Jsonl => load_jsonl(path),
        Format::Csv => load_csv(path),
    }
}

pub fn save_trajectories(set: &TrajectorySet, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Jsonl => save_jsonl(set, path),
        Format::Csv => save_csv(set, path),
    }
}

fn load_jsonl(path: &Path) -> Result<TrajectorySet> {
    let reader = BufReader::new(open(path)?);
    let mut trajectories = Vec::new();
    let mut dim = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let states: Vec<DVector<f64>> = record.states.into_iter().map(DVector::from_vec).collect();
        let expected = *dim.get_or_insert_with(|| states.first().map_or(0, |s| s.len()));
        if let Some(bad) = states.iter().position(|s| s.len() != expected) {
            return Err(Error::InvalidTrajectory {
                id: record.id,
                message: format!(
                    "state {bad} has dimension {}, expected {expected}",
                    states[bad].len()
                ),
            });
        }
        trajectories.push(Trajectory::new(record.id, record.model, record.task, states)?);
    }
    TrajectorySet::new(trajectories)
}

fn save_jsonl(set: &TrajectorySet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in &set.trajectories {
        let record = JsonlRecord {
            id: t.id.clone(),
            model: t.model_tag.clone(),
            task: t.task_tag.clone(),
            states: t.states.iter().map(|s| s.iter().cloned().collect()).collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_csv(path: &Path) -> Result<TrajectorySet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?);
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "step" {
        return Err(malformed(1, "expected header `id,step,x0,...`".into()));
    }
    for (j, name) in headers.iter().skip(2).enumerate() {
        if name != format!("x{j}") {
            return Err(malformed(1, format!("unexpected column `{name}`")));
        }
    }
    let dim = headers.len() - 2;

    let mut trajectories = Vec::new();
    let mut current: Option<(String, Vec<DVector<f64>>, i64)> = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        let id = record[0].to_string();
        let step: i64 = record[1]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad step `{}`", &record[1])))?;
        let state = record
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(line, e.to_string()))?;
        if state.len() != dim {
            return Err(Error::InvalidTrajectory {
                id,
                message: format!("row at line {line} has {} coordinates", state.len()),
            });
        }
        match &mut current {
            Some((cur_id, states, last)) if *cur_id == id => {
                if step <= *last {
                    return Err(malformed(line, format!("steps of `{id}` not increasing")));
                }
                *last = step;
                states.push(DVector::from_vec(state));
            }
            _ => {
                if let Some((prev, states, _)) = current.take() {
                    if trajectories.iter().any(|t: &Trajectory| t.id == id) {
                        return Err(malformed(line, format!("rows of `{id}` are not grouped")));
                    }
                    trajectories.push(Trajectory::new(prev, "", "", states)?);
                }
                current = Some((id, vec![DVector::from_vec(state)], step));
            }
        }
    }
    if let Some((id, states, _)) = current {
        trajectories.push(Trajectory::new(id, "", "", states)?);
    }
    TrajectorySet::new(trajectories)
}

fn save_csv(set: &TrajectorySet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "step".to_string()];
    header.extend((0..set.dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for t in &set.trajectories {
        for (step, s) in t.states.iter().enumerate() {
            let mut row = vec![t.id.clone(), step.to_string()];
            row.extend(s.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Outcome of [`standardize`]: the mapped set plus warnings for
/// zero-variance dimensions.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub set: TrajectorySet,
    pub warnings: Vec<String>,
}

/// Per-dimension z-scoring over all states, population variance.
pub fn standardize(set: &TrajectorySet) -> Result<Standardized> {
    let n = set.n_states();
    if n < 2 {
        return Err(Error::Undefined(format!(
            "standardization needs at least 2 states, found {n}"
        )));
    }
    let d = set.dim;
    let mut mean = DVector::zeros(d);
    for h in set.all_states() {
        mean += h;
    }
    mean /= n as f64;
    let mut var = DVector::zeros(d);
    for h in set.all_states() {
        let c = h - &mean;
        var += c.component_mul(&c);
    }
    var /= n as f64;
    let mut warnings = Vec::new();
    let scale = DVector::from_fn(d, |j, _| {
        if var[j] > 0.0 {
            var[j].sqrt()
        } else {
            warnings.push(format!("dimension {j} has zero variance; scale set to 1"));
            1.0
        }
    });
    for w in &warnings {
        log::warn!("{w}");
    }
    let st = Standardization { mean, scale };
    Ok(Standardized {
        set: set.apply_standardization(&st)?,
        warnings,
    })
}

/// Maps a standardized set back to original units.
pub fn inverse_standardize(set: &TrajectorySet) -> TrajectorySet {
    let Some(st) = &set.standardization else {
        return set.clone();
    };
    let trajectories = set
        .trajectories
        .iter()
        .map(|t| t.with_states(t.states.iter().map(|z| st.invert(z)).collect()))
        .collect();
    TrajectorySet {
        trajectories,
        dim: set.dim,
        standardization: None,
    }
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub set: TrajectorySet,
    /// Trajectories left with fewer than two states.
    pub dropped: usize,
    pub removed_states: usize,
}

/// Drops every state lying within `min_norm` of the last kept state, so each
/// surviving increment has norm above the threshold.
pub fn filter_jumps(set: &TrajectorySet, min_norm: f64) -> Result<Filtered> {
    if !(min_norm >= 0.0) {
        return Err(Error::Domain(format!("min_norm must be >= 0, got {min_norm}")));
    }
    let mut kept = Vec::with_capacity(set.len());
    let mut dropped = 0;
    let mut removed_states = 0;
    for t in &set.trajectories {
        let mut states: Vec<DVector<f64>> = Vec::with_capacity(t.len());
        for h in &t.states {
            match states.last() {
                Some(anchor) if (h - anchor).norm() <= min_norm => removed_states += 1,
                _ => states.push(h.clone()),
            }
        }
        if states.len() < 2 {
            dropped += 1;
            removed_states += states.len();
        } else {
            kept.push(t.with_states(states));
        }
    }
    Ok(Filtered {
        set: TrajectorySet {
            trajectories: kept,
            dim: set.dim,
            standardization: set.standardization.clone(),
        },
        dropped,
        removed_states,
    })
}

/// Empirical distribution of increment norms `‖Δh_t‖`.
#[derive(Debug, Clone)]
pub struct JumpDistribution {
    sorted: Vec<f64>,
}

impl JumpDistribution {
    pub fn from_norms(mut norms: Vec<f64>) -> Result<Self> {
        if norms.is_empty() {
            return Err(Error::Empty("no transitions".into()));
        }
        norms.sort_by(f64::total_cmp);
        Ok(Self { sorted: norms })
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// Right-continuous empirical CDF.
    pub fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// Smallest sample value `v` with `cdf(v) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let rank = (p.clamp(0.0, 1.0) * n as f64).ceil() as usize;
        self.sorted[rank.clamp(1, n) - 1]
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.sorted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.sorted.len() as f64
    }
}

pub fn jump_norm_distribution(set: &TrajectorySet) -> Result<JumpDistribution> {
    JumpDistribution::from_norms(set.all_increments().map(|d| d.norm()).collect())
}
