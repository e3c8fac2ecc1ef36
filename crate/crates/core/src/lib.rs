//! Checkpoint merging engine.
//!
//! - [`tensor_store`]: the tensor archive format (read, write, validate).
//! - [`tv_algebra`]: task-vector extraction and scaled vector-addition merges.
//! - [`ties`]: trim / elect-sign / disjoint-mean merging.
//! - [`merge_report`]: diff, cosine and interference diagnostics.
//! - [`recipe_engine`]: declarative JSON recipes, weight sweeps, selection.
//! - [`toy_bench`]: a deterministic miniature of the merge-then-fine-tune
//!   pipeline on a small MLP.

pub mod error;
pub mod merge_report;
pub mod recipe_engine;
pub mod tensor_store;
pub mod ties;
pub mod toy_bench;
pub mod tv_algebra;

pub use error::MergeError;
pub use tensor_store::{Checkpoint, DType, StoreError, Tensor};
pub use tv_algebra::{MismatchPolicy, TaskVector};
