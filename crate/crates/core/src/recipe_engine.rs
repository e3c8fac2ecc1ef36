//! Declarative merge recipes.
//!
//! A recipe is a JSON document naming a base checkpoint, one or more vector
//! sources with weights, the merge method and an output path:
//!
//! ```json
//! {
//!   "base": "base.safetensors",
//!   "method": "ties",
//!   "vectors": [
//!     {"source": "cpt.safetensors", "weight": 1.0},
//!     {"source": "task_en.safetensors", "weight": {"grid": [0.5, 1.0]}}
//!   ],
//!   "density": 0.2,
//!   "lambda": {"grid": "default"},
//!   "mismatch": "error",
//!   "dtype": "keep",
//!   "output": "merged.safetensors"
//! }
//! ```
//!
//! `density` and `lambda` belong to `ties` only. A weight (or the TIES
//! `lambda`) may be a grid; [`expand_sweep`] turns a gridded recipe into one
//! grid-free recipe per point. A source is either a stored task vector
//! (archive metadata `vecmerge.kind = task_vector`) or a fine-tuned
//! checkpoint, which is diffed against the base first.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::error::MergeError;
use crate::merge_report::InterferenceReport;
use crate::tensor_store::{
    read_archive_file, write_archive_file, Checkpoint, DType, DTypePolicy, StoreError, UnknownDType,
};
use crate::ties::{ties_merge, TiesConfig, DEFAULT_DENSITY, DEFAULT_LAMBDA};
use crate::tv_algebra::{
    extract_task_vector, is_task_vector, tv_merge, MismatchPolicy, MismatchSummary, Origin,
    TaskVector, KIND_KEY,
};

/// Metadata key holding the resolved recipe JSON in a merged archive.
pub const RECIPE_KEY: &str = "vecmerge.recipe";
pub const KIND_MERGED: &str = "merged";
pub const DEFAULT_SWEEP_CAP: usize = 1000;

/// `{0.1, 0.2, ..., 1.0}`, used for `"grid": "default"`.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum RecipeError {
    #[error("invalid recipe at {pointer:?}: {message}")]
    Validation { pointer: String, message: String },
    #[error("sweep of {size} points exceeds the cap of {cap}")]
    SweepTooLarge { size: usize, cap: usize },
    #[error("invalid metrics table: {0}")]
    Metrics(String),
    #[error("{path}: {source}")]
    Store { path: String, source: StoreError },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RecipeError {
    fn at(pointer: &str, message: impl Into<String>) -> Self {
        RecipeError::Validation {
            pointer: pointer.to_string(),
            message: message.into(),
        }
    }

    /// True for problems with the recipe or table itself rather than with
    /// reading inputs or merging them.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RecipeError::Validation { .. }
                | RecipeError::SweepTooLarge { .. }
                | RecipeError::Metrics(_)
        )
    }
}

pub type Result<T, E = RecipeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tv,
    Ties,
}

/// Output dtype: keep each tensor's dtype or cast everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DTypeChoice {
    #[default]
    #[serde(rename = "keep")]
    Keep,
    F64,
    F32,
    F16,
    BF16,
}

impl DTypeChoice {
    pub fn policy(self) -> DTypePolicy {
        match self {
            DTypeChoice::Keep => DTypePolicy::Keep,
            DTypeChoice::F64 => DTypePolicy::Cast(DType::F64),
            DTypeChoice::F32 => DTypePolicy::Cast(DType::F32),
            DTypeChoice::F16 => DTypePolicy::Cast(DType::F16),
            DTypeChoice::BF16 => DTypePolicy::Cast(DType::BF16),
        }
    }
}

impl std::str::FromStr for DTypeChoice {
    type Err = UnknownDType;

    /// `keep` or a dtype name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "keep" => DTypeChoice::Keep,
            other => match other.parse::<DType>()? {
                DType::F64 => DTypeChoice::F64,
                DType::F32 => DTypeChoice::F32,
                DType::F16 => DTypeChoice::F16,
                DType::BF16 => DTypeChoice::BF16,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub grid: GridSpec,
}

/// A fixed value or a sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Value(f64),
    Grid(Grid),
}

impl Weight {
    pub fn grid(values: Vec<f64>) -> Self {
        Weight::Grid(Grid {
            grid: GridSpec::Values(values),
        })
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Weight::Value(v) => Some(*v),
            Weight::Grid(_) => None,
        }
    }

    /// Grid points, after resolution. `None` for a fixed value.
    pub fn points(&self) -> Option<&[f64]> {
        match self {
            Weight::Grid(Grid {
                grid: GridSpec::Values(v),
            }) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorSlot {
    pub source: String,
    pub weight: Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub base: String,
    pub method: Method,
    pub vectors: Vec<VectorSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Weight>,
    #[serde(default)]
    pub mismatch: MismatchPolicy,
    #[serde(default)]
    pub dtype: DTypeChoice,
    pub output: String,
    /// Free-form description; ignored by the engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(variant);
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn resolve_weight(w: &mut Weight, pointer: &str, positive: bool) -> Result<()> {
    let check = |v: f64| -> Result<()> {
        if !v.is_finite() {
            return Err(RecipeError::at(
                pointer,
                format!("weight must be finite, got {v}"),
            ));
        }
        if positive && v <= 0.0 {
            return Err(RecipeError::at(
                pointer,
                format!("ties weights must be positive, got {v}"),
            ));
        }
        Ok(())
    };
    match w {
        Weight::Value(v) => check(*v),
        Weight::Grid(g) => {
            if let GridSpec::Named(name) = &g.grid {
                if name != "default" {
                    return Err(RecipeError::at(
                        &format!("{pointer}/grid"),
                        format!("unknown grid {name:?} (only \"default\")"),
                    ));
                }
                g.grid = GridSpec::Values(default_grid());
            }
            let GridSpec::Values(values) = &g.grid else {
                unreachable!()
            };
            if values.is_empty() {
                return Err(RecipeError::at(&format!("{pointer}/grid"), "empty grid"));
            }
            values.iter().try_for_each(|&v| check(v))
        }
    }
}

impl MergeRecipe {
    /// Checks the semantic rules and fills method-specific defaults.
    pub fn validate(mut self) -> Result<Self> {
        if self.vectors.is_empty() {
            return Err(RecipeError::at(
                "/vectors",
                "at least one vector is required",
            ));
        }
        for (field, value) in [("/base", &self.base), ("/output", &self.output)] {
            if value.is_empty() {
                return Err(RecipeError::at(field, "empty path"));
            }
        }
        let ties = self.method == Method::Ties;
        for (i, slot) in self.vectors.iter_mut().enumerate() {
            if slot.source.is_empty() {
                return Err(RecipeError::at(
                    &format!("/vectors/{i}/source"),
                    "empty path",
                ));
            }
            resolve_weight(&mut slot.weight, &format!("/vectors/{i}/weight"), ties)?;
        }
        match self.method {
            Method::Tv => {
                if self.density.is_some() {
                    return Err(RecipeError::at(
                        "/density",
                        "only valid for method \"ties\"",
                    ));
                }
                if self.lambda.is_some() {
                    return Err(RecipeError::at("/lambda", "only valid for method \"ties\""));
                }
            }
            Method::Ties => {
                let d = *self.density.get_or_insert(DEFAULT_DENSITY);
                if !(d > 0.0 && d <= 1.0) {
                    return Err(RecipeError::at(
                        "/density",
                        format!("must lie in (0, 1], got {d}"),
                    ));
                }
                let lambda = self.lambda.get_or_insert(Weight::Value(DEFAULT_LAMBDA));
                resolve_weight(lambda, "/lambda", false)?;
            }
        }
        Ok(self)
    }

    /// Names and points of every grid-valued parameter, in sweep order:
    /// `w0, w1, ...` for vector slots, then `lambda`.
    pub fn sweep_params(&self) -> Vec<(String, Vec<f64>)> {
        let mut params: Vec<(String, Vec<f64>)> = self
            .vectors
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.weight.points().map(|p| (format!("w{i}"), p.to_vec())))
            .collect();
        if let Some(p) = self.lambda.as_ref().and_then(Weight::points) {
            params.push(("lambda".into(), p.to_vec()));
        }
        params
    }

    pub fn is_grid_free(&self) -> bool {
        self.sweep_params().is_empty()
    }

    /// Canonical compact JSON of the recipe.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }
}

/// Parses and validates recipe JSON. Unknown keys are rejected; errors
/// carry a JSON pointer to the offending value.
pub fn parse_recipe(text: &str) -> Result<MergeRecipe> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let recipe: MergeRecipe = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        RecipeError::Validation {
            pointer,
            message: e.into_inner().to_string(),
        }
    })?;
    recipe.validate()
}

/// A sweep-parameter assignment, keyed by parameter name.
pub type Assignment = BTreeMap<String, f64>;

/// One point of an expanded sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub assignment: Assignment,
    pub recipe: MergeRecipe,
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

fn suffixed_output(output: &str, suffix: &str) -> String {
    let path = Path::new(output);
    match (path.file_stem(), path.extension()) {
        (Some(stem), Some(ext)) => {
            let file = format!(
                "{}{suffix}.{}",
                stem.to_string_lossy(),
                ext.to_string_lossy()
            );
            path.with_file_name(file).to_string_lossy().into_owned()
        }
        _ => format!("{output}{suffix}"),
    }
}

/// Cartesian product of all grids, first parameter most significant and
/// each grid in its listed order. Output paths gain `_name=value` suffixes.
pub fn sweep_points(recipe: &MergeRecipe, cap: usize) -> Result<Vec<SweepPoint>> {
    let params = recipe.sweep_params();
    if params.is_empty() {
        return Ok(vec![SweepPoint {
            assignment: Assignment::new(),
            recipe: recipe.clone(),
        }]);
    }
    let size = params
        .iter()
        .try_fold(1usize, |acc, (_, p)| acc.checked_mul(p.len()))
        .unwrap_or(usize::MAX);
    if size > cap {
        return Err(RecipeError::SweepTooLarge { size, cap });
    }
    let mut points = Vec::with_capacity(size);
    let mut idx = vec![0usize; params.len()];
    for _ in 0..size {
        let mut r = recipe.clone();
        let mut assignment = Assignment::new();
        let mut suffix = String::new();
        for ((name, values), &i) in params.iter().zip(&idx) {
            let v = values[i];
            assignment.insert(name.clone(), v);
            suffix.push_str(&format!("_{name}={}", format_value(v)));
            if name == "lambda" {
                r.lambda = Some(Weight::Value(v));
            } else {
                let slot: usize = name[1..].parse().expect("w<index>");
                r.vectors[slot].weight = Weight::Value(v);
            }
        }
        r.output = suffixed_output(&recipe.output, &suffix);
        points.push(SweepPoint {
            assignment,
            recipe: r,
        });
        // odometer, last parameter fastest
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < params[d].1.len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(points)
}

/// Grid-free recipes for every sweep point (cap [`DEFAULT_SWEEP_CAP`]).
pub fn expand_sweep(recipe: &MergeRecipe) -> Result<Vec<MergeRecipe>> {
    expand_sweep_capped(recipe, DEFAULT_SWEEP_CAP)
}

pub fn expand_sweep_capped(recipe: &MergeRecipe, cap: usize) -> Result<Vec<MergeRecipe>> {
    Ok(sweep_points(recipe, cap)?
        .into_iter()
        .map(|p| p.recipe)
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct MergeOutcome {
    pub output: PathBuf,
    pub tensor_count: usize,
    pub param_count: usize,
    pub wall_time_secs: f64,
    pub mismatches: Vec<MismatchSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<InterferenceReport>,
}

fn load(dir: &Path, path: &str) -> Result<Checkpoint> {
    read_archive_file(dir.join(path)).map_err(|source| RecipeError::Store {
        path: path.to_string(),
        source,
    })
}

/// Runs a grid-free recipe with paths taken relative to the working directory.
pub fn execute_recipe(recipe: &MergeRecipe) -> Result<MergeOutcome> {
    execute_recipe_in(recipe, Path::new(""))
}

/// Runs a grid-free recipe, resolving relative paths against `dir`.
///
/// The output is written through a temporary file and renamed into place,
/// and carries the recipe JSON under [`RECIPE_KEY`].
pub fn execute_recipe_in(recipe: &MergeRecipe, dir: &Path) -> Result<MergeOutcome> {
    let recipe = recipe.clone().validate()?;
    if !recipe.is_grid_free() {
        return Err(RecipeError::at(
            "",
            "recipe has unexpanded grids; expand the sweep first",
        ));
    }
    let started = Instant::now();
    let base = load(dir, &recipe.base)?;
    let mut vectors = Vec::with_capacity(recipe.vectors.len());
    let mut mismatches = Vec::with_capacity(recipe.vectors.len());
    for slot in &recipe.vectors {
        let source = load(dir, &slot.source)?;
        if is_task_vector(&source) {
            vectors.push(TaskVector::from_checkpoint(&source));
            mismatches.push(MismatchSummary::default());
        } else {
            let (tv, summary) = extract_task_vector(&base, &source, recipe.mismatch)?;
            vectors.push(tv.with_origin(Origin::Extracted {
                base_id: recipe.base.clone(),
                finetuned_id: slot.source.clone(),
            }));
            mismatches.push(summary);
        }
    }
    let weights: Vec<f64> = recipe
        .vectors
        .iter()
        .map(|s| s.weight.value().expect("grid-free"))
        .collect();

    let (mut merged, report) = match recipe.method {
        Method::Tv => {
            let weighted: Vec<(&TaskVector, f64)> = vectors.iter().zip(weights).collect();
            (tv_merge(&base, &weighted)?, None)
        }
        Method::Ties => {
            let config = TiesConfig {
                density: recipe.density.expect("validated"),
                weights,
                lambda: recipe
                    .lambda
                    .as_ref()
                    .and_then(Weight::value)
                    .expect("grid-free"),
            };
            let refs: Vec<&TaskVector> = vectors.iter().collect();
            let (ck, report) = ties_merge(&base, &refs, &config)?;
            (ck, Some(report))
        }
    };
    merged.set_metadata(KIND_KEY, KIND_MERGED);
    merged.set_metadata(RECIPE_KEY, recipe.to_json());

    let output = dir.join(&recipe.output);
    write_archive_file(&merged, recipe.dtype.policy(), &output).map_err(|source| {
        RecipeError::Store {
            path: recipe.output.clone(),
            source,
        }
    })?;
    Ok(MergeOutcome {
        output,
        tensor_count: merged.len(),
        param_count: merged.param_count(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        mismatches,
        report,
    })
}

/// Executes independent recipes concurrently. Results keep input order.
pub fn execute_all(recipes: &[MergeRecipe], dir: &Path) -> Vec<Result<MergeOutcome>> {
    recipes
        .par_iter()
        .map(|r| execute_recipe_in(r, dir))
        .collect()
}

/// The recipe embedded in a merged archive, if any.
pub fn embedded_recipe(ck: &Checkpoint) -> Option<Result<MergeRecipe>> {
    ck.metadata().get(RECIPE_KEY).map(|s| parse_recipe(s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub assignment: Assignment,
    pub metric: f64,
}

/// Validation scores per sweep assignment. The metric is maximized.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    /// Builds a table, checking that every row assigns the same parameters
    /// and that metrics are finite.
    pub fn new(rows: Vec<MetricRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            for (i, r) in rows.iter().enumerate() {
                if !r.metric.is_finite() {
                    return Err(RecipeError::Metrics(format!("row {i}: non-finite metric")));
                }
                if !r.assignment.keys().eq(first.assignment.keys()) {
                    return Err(RecipeError::Metrics(format!(
                        "row {i}: parameters {:?} differ from {:?}",
                        r.assignment.keys().collect::<Vec<_>>(),
                        first.assignment.keys().collect::<Vec<_>>()
                    )));
                }
                if let Some((k, v)) = r.assignment.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(RecipeError::Metrics(format!("row {i}: non-finite {k}={v}")));
                }
            }
        }
        Ok(Self { rows })
    }

    /// Parses CSV with header `assignment,metric`; assignments are
    /// `k=v;k=v`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| RecipeError::Metrics(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["assignment", "metric"] {
            return Err(RecipeError::Metrics(format!(
                "header must be `assignment,metric`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| RecipeError::Metrics(e.to_string()))?;
            let bad = |what: &str| RecipeError::Metrics(format!("row {}: {what}", i + 1));
            let mut assignment = Assignment::new();
            for pair in rec[0].split(';').map(str::trim).filter(|p| !p.is_empty()) {
                let (k, v) = pair.split_once('=').ok_or_else(|| bad("expected k=v"))?;
                let v: f64 = v.trim().parse().map_err(|_| bad("value is not a number"))?;
                if assignment.insert(k.trim().to_string(), v).is_some() {
                    return Err(bad("repeated parameter"));
                }
            }
            let metric: f64 = rec[1].parse().map_err(|_| bad("metric is not a number"))?;
            rows.push(MetricRow { assignment, metric });
        }
        Self::new(rows)
    }
}

fn compare_assignments(a: &Assignment, b: &Assignment) -> std::cmp::Ordering {
    a.values()
        .zip(b.values())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// The assignment with the largest metric; ties go to the lexicographically
/// smallest assignment (values compared in parameter-name order).
pub fn select_best(table: &MetricsTable) -> Result<Assignment> {
    table
        .rows
        .iter()
        .max_by(|a, b| {
            a.metric
                .total_cmp(&b.metric)
                .then_with(|| compare_assignments(&b.assignment, &a.assignment))
        })
        .map(|r| r.assignment.clone())
        .ok_or_else(|| RecipeError::Metrics("empty table".into()))
}

/// Recipe templates for common data regimes, as `(file name, JSON)`.
pub const TEMPLATES: [(&str, &str); 3] = [
    (
        "labeled+unlabeled.json",
        include_str!("../templates/labeled+unlabeled.json"),
    ),
    (
        "labeled-only.json",
        include_str!("../templates/labeled-only.json"),
    ),
    (
        "transfer-only.json",
        include_str!("../templates/transfer-only.json"),
    ),
];
