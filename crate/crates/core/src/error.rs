use crate::tensor_store::StoreError;

/// Errors from task-vector algebra, TIES merging and merge diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("no shared tensors")]
    NoSharedTensors,
    #[error("mismatched tensors: {}", .0.join(", "))]
    Mismatched(Vec<String>),
    #[error("empty task-vector list")]
    NoVectors,
    #[error("tensor {name:?}: shape conflict {left:?} vs {right:?}")]
    ShapeConflict {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor {0:?} is not present in the base checkpoint")]
    MissingInBase(String),
    #[error("scale factor must be finite, got {0}")]
    NonFiniteScale(f64),
    #[error("density must lie in (0, 1], got {0}")]
    InvalidDensity(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("undefined cosine: zero vector")]
    UndefinedCosine,
    #[error(transparent)]
    Store(#[from] StoreError),
}
