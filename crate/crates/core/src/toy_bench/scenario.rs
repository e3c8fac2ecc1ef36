//! Fine-tuning pipelines compared by the bench.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{gen_dataset, DataKind, Dataset, Split};
use super::metrics::macro_f1;
use super::model::{init_model, train, Mlp, TrainConfig};
use super::prng::derive_seed;
use super::{BenchError, ModelSpec};
use crate::recipe_engine::{default_grid, select_best, Assignment, MetricRow, MetricsTable};
use crate::tensor_store::Checkpoint;
use crate::ties::{ties_merge, TiesConfig};
use crate::tv_algebra::{extract_task_vector, tv_merge, MismatchPolicy, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    FullFt,
    SeqFt,
    JointFt,
    TvMergeFt,
    TiesMergeFt,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::FullFt,
        ScenarioName::SeqFt,
        ScenarioName::JointFt,
        ScenarioName::TvMergeFt,
        ScenarioName::TiesMergeFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::FullFt => "full_ft",
            ScenarioName::SeqFt => "seq_ft",
            ScenarioName::JointFt => "joint_ft",
            ScenarioName::TvMergeFt => "tv_merge_ft",
            ScenarioName::TiesMergeFt => "ties_merge_ft",
        }
    }

    /// Parses one name or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<ScenarioName>, BenchError> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| BenchError::Invalid(format!("unknown scenario {s:?}")))
    }
}

/// Sizes and hyperparameters shared by every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub spec: ModelSpec,
    /// Samples per language in the base training set.
    pub n_base: usize,
    /// Samples in the auxiliary single-language task set.
    pub n_aux: usize,
    pub n_target: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub base_train: TrainConfig,
    pub aux_train: TrainConfig,
    pub target_train: TrainConfig,
    pub ties_density: f64,
    pub lambda_grid: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let gd = |learning_rate, epochs| TrainConfig {
            learning_rate,
            epochs,
            seed: 0,
        };
        Self {
            spec: ModelSpec::default(),
            n_base: 300,
            n_aux: 2000,
            n_target: 60,
            n_dev: 150,
            n_test: 600,
            base_train: gd(0.5, 200),
            aux_train: gd(0.5, 100),
            target_train: gd(0.05, 30),
            ties_density: crate::ties::DEFAULT_DENSITY,
            lambda_grid: default_grid(),
        }
    }
}

/// Default seed list.
pub fn default_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioName,
    pub seeds: Vec<SeedResult>,
    pub mean_macro_f1: f64,
    pub config: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub seeds: Vec<u64>,
    pub scenarios: Vec<ScenarioReport>,
}

// Sub-stream ids for derive_seed.
const STREAM_INIT: u64 = 0;
const STREAM_BASE_L1: u64 = 1;
const STREAM_BASE_L2: u64 = 2;
const STREAM_AUX: u64 = 3;
const STREAM_TARGET: u64 = 4;
const STREAM_DEV: u64 = 5;
const STREAM_TEST: u64 = 6;

/// Everything a seed's scenarios share: data, the base model and the
/// auxiliary task vector.
pub(crate) struct SeedContext {
    pub base: Checkpoint,
    pub aux_model: Checkpoint,
    pub tau_aux: TaskVector,
    pub aux: Dataset,
    pub target: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl SeedContext {
    pub(crate) fn build(cfg: &BenchConfig, seed: u64) -> Result<Self, BenchError> {
        let spec = &cfg.spec;
        let data = |kind, n, stream| gen_dataset(kind, n, spec, derive_seed(seed, stream));
        let base_data = data(DataKind::L1, cfg.n_base, STREAM_BASE_L1)?.concat(&data(
            DataKind::L2,
            cfg.n_base,
            STREAM_BASE_L2,
        )?);
        let aux = data(DataKind::L1, cfg.n_aux, STREAM_AUX)?;
        let target = data(DataKind::Mixed, cfg.n_target, STREAM_TARGET)?;
        let dev = data(DataKind::Mixed, cfg.n_dev, STREAM_DEV)?.with_split(Split::Dev);
        let test = data(DataKind::Mixed, cfg.n_test, STREAM_TEST)?.with_split(Split::Test);

        let init = init_model(spec, derive_seed(seed, STREAM_INIT))?;
        let base = train(&init, &base_data, &cfg.base_train)?;
        let aux_model = train(&base, &aux, &cfg.aux_train)?;
        let (tau_aux, _) = extract_task_vector(&base, &aux_model, MismatchPolicy::Error)?;
        Ok(Self {
            base,
            aux_model,
            tau_aux,
            aux,
            target,
            dev,
            test,
        })
    }
}

fn score(model: &Checkpoint, data: &Dataset, c: usize) -> Result<f64, BenchError> {
    let preds = Mlp::from_checkpoint(model)?.predict(&data.x);
    macro_f1(&preds, &data.y, c)
}

/// Merges with `merge(λ)`, fine-tunes on the target set, and keeps the λ
/// with the best dev score.
fn merge_then_tune(
    cfg: &BenchConfig,
    ctx: &SeedContext,
    merge: impl Fn(f64) -> Result<Checkpoint, BenchError>,
) -> Result<(Checkpoint, f64, f64), BenchError> {
    let c = cfg.spec.class_count;
    let mut rows = Vec::with_capacity(cfg.lambda_grid.len());
    let mut tuned = Vec::with_capacity(cfg.lambda_grid.len());
    for &lambda in &cfg.lambda_grid {
        let model = train(&merge(lambda)?, &ctx.target, &cfg.target_train)?;
        let metric = score(&model, &ctx.dev, c)?;
        rows.push(MetricRow {
            assignment: Assignment::from([("lambda".to_string(), lambda)]),
            metric,
        });
        tuned.push(model);
    }
    let best = select_best(&MetricsTable::new(rows.clone())?)?;
    let lambda = best["lambda"];
    let at = cfg
        .lambda_grid
        .iter()
        .position(|&l| l == lambda)
        .expect("selected lambda comes from the grid");
    Ok((tuned.swap_remove(at), lambda, rows[at].metric))
}

/// `train(tv_merge(base, [(tau_aux, lambda)]), target)`.
pub fn tv_merge_ft_at(cfg: &BenchConfig, seed: u64, lambda: f64) -> Result<Checkpoint, BenchError> {
    let ctx = SeedContext::build(cfg, seed)?;
    let merged = tv_merge(&ctx.base, &[(&ctx.tau_aux, lambda)])?;
    train(&merged, &ctx.target, &cfg.target_train)
}

/// `train(base, target)`.
pub fn full_ft(cfg: &BenchConfig, seed: u64) -> Result<Checkpoint, BenchError> {
    let ctx = SeedContext::build(cfg, seed)?;
    train(&ctx.base, &ctx.target, &cfg.target_train)
}

fn run_one(
    cfg: &BenchConfig,
    ctx: &SeedContext,
    name: ScenarioName,
    seed: u64,
) -> Result<SeedResult, BenchError> {
    let c = cfg.spec.class_count;
    let fixed = |model: Checkpoint| -> Result<SeedResult, BenchError> {
        Ok(SeedResult {
            seed,
            test_macro_f1: score(&model, &ctx.test, c)?,
            lambda: None,
            dev_macro_f1: None,
        })
    };
    let tuned = |(model, lambda, dev): (Checkpoint, f64, f64)| -> Result<SeedResult, BenchError> {
        Ok(SeedResult {
            seed,
            test_macro_f1: score(&model, &ctx.test, c)?,
            lambda: Some(lambda),
            dev_macro_f1: Some(dev),
        })
    };
    match name {
        ScenarioName::FullFt => fixed(train(&ctx.base, &ctx.target, &cfg.target_train)?),
        ScenarioName::SeqFt => fixed(train(&ctx.aux_model, &ctx.target, &cfg.target_train)?),
        ScenarioName::JointFt => {
            let union = ctx.aux.concat(&ctx.target);
            fixed(train(&ctx.base, &union, &cfg.target_train)?)
        }
        ScenarioName::TvMergeFt => tuned(merge_then_tune(cfg, ctx, |lambda| {
            Ok(tv_merge(&ctx.base, &[(&ctx.tau_aux, lambda)])?)
        })?),
        ScenarioName::TiesMergeFt => tuned(merge_then_tune(cfg, ctx, |lambda| {
            let ties = TiesConfig {
                density: cfg.ties_density,
                weights: vec![1.0],
                lambda,
            };
            Ok(ties_merge(&ctx.base, &[&ctx.tau_aux], &ties)?.0)
        })?),
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// Runs `names` for every seed. Seeds run in parallel; results are
/// gathered in seed order so the report does not depend on scheduling.
pub fn run_bench(
    names: &[ScenarioName],
    seeds: &[u64],
    cfg: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    if seeds.is_empty() {
        return Err(BenchError::Invalid("at least one seed is required".into()));
    }
    if names.is_empty() {
        return Err(BenchError::Invalid(
            "at least one scenario is required".into(),
        ));
    }
    cfg.spec.validate()?;
    let per_seed: Vec<Vec<SeedResult>> = seeds
        .par_iter()
        .map(|&seed| {
            let ctx = SeedContext::build(cfg, seed)?;
            names.iter().map(|&n| run_one(cfg, &ctx, n, seed)).collect()
        })
        .collect::<Result<_, BenchError>>()?;
    let scenarios = names
        .iter()
        .enumerate()
        .map(|(i, &scenario)| {
            let seeds: Vec<SeedResult> = per_seed.iter().map(|r| r[i].clone()).collect();
            ScenarioReport {
                scenario,
                mean_macro_f1: mean(seeds.iter().map(|s| s.test_macro_f1)),
                seeds,
                config: cfg.clone(),
            }
        })
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        scenarios,
    })
}

pub fn run_scenario(
    name: ScenarioName,
    seeds: &[u64],
    cfg: &BenchConfig,
) -> Result<ScenarioReport, BenchError> {
    Ok(run_bench(&[name], seeds, cfg)?.scenarios.remove(0))
}

/// The base model, the auxiliary fine-tune and its task vector for `seed`,
/// named for writing to disk.
pub fn pipeline_checkpoints(
    cfg: &BenchConfig,
    seed: u64,
) -> Result<Vec<(String, Checkpoint)>, BenchError> {
    let ctx = SeedContext::build(cfg, seed)?;
    Ok(vec![
        (format!("seed{seed}_base"), ctx.base),
        (format!("seed{seed}_aux"), ctx.aux_model),
        (format!("seed{seed}_tau_aux"), ctx.tau_aux.to_checkpoint()),
    ])
}
