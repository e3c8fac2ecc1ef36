//! Deterministic desk-scale benchmark: a two-layer classifier trained with
//! full-batch gradient descent on seeded synthetic data, used to compare
//! fine-tuning pipelines with and without task-vector merging.

mod data;
mod metrics;
mod model;
mod prng;
mod scenario;

use serde::{Deserialize, Serialize};

use crate::error::MergeError;
use crate::recipe_engine::RecipeError;
use crate::tensor_store::StoreError;

pub use data::{gen_dataset, DataKind, Dataset, Split, CLASS_OFFSET, MIX_RANGE, NOISE_STD};
pub use metrics::macro_f1;
pub use model::{
    forward, init_model, softmax, train, Mlp, TrainConfig, INIT_STD, LAYER0_BIAS, LAYER0_WEIGHT,
    LAYER1_BIAS, LAYER1_WEIGHT,
};
pub use prng::{derive_seed, Prng};
pub use scenario::{
    default_seeds, full_ft, pipeline_checkpoints, run_bench, run_scenario, tv_merge_ft_at,
    BenchConfig, BenchReport, ScenarioName, ScenarioReport, SeedResult,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Layer sizes of the toy classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub class_count: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 32,
            class_count: 3,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.class_count == 0 {
            return Err(BenchError::Invalid(format!(
                "model dimensions must be positive, got d={} h={} c={}",
                self.input_dim, self.hidden_dim, self.class_count
            )));
        }
        Ok(())
    }
}
