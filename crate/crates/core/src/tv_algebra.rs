//! Task vectors and scaled vector-addition merging.
//!
//! A task vector is the per-tensor difference `finetuned - base`. Merging adds
//! a weighted sum of task vectors back onto a base checkpoint:
//! `out = base + sum_i lambda_i * tau_i`. All arithmetic runs in `f64`; the
//! result is rounded once into the base tensor's storage dtype.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MergeError;
use crate::tensor_store::{Checkpoint, DType, Tensor};

pub type Result<T, E = MergeError> = std::result::Result<T, E>;

/// Metadata key describing what an archive holds.
pub const KIND_KEY: &str = "vecmerge.kind";
pub const KIND_TASK_VECTOR: &str = "task_vector";
/// Name prefix for side-channel tensors carried verbatim from a fine-tuned
/// checkpoint when a task vector is stored as an archive.
pub const EXTRA_PREFIX: &str = "vecmerge.extra/";
const ORIGIN_BASE_KEY: &str = "vecmerge.origin.base";
const ORIGIN_FINETUNED_KEY: &str = "vecmerge.origin.finetuned";

/// Elements per work unit in element-parallel loops.
pub(crate) const CHUNK: usize = 1 << 14;

/// What to do with tensors that are not shared (by name and shape) between a
/// base and a fine-tuned checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    #[default]
    Error,
    Ignore,
    #[serde(alias = "copy")]
    CopyFromFinetuned,
}

impl FromStr for MismatchPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "error" => Ok(Self::Error),
            "ignore" => Ok(Self::Ignore),
            "copy" | "copy_from_finetuned" => Ok(Self::CopyFromFinetuned),
            other => Err(format!("unknown mismatch policy {other:?}")),
        }
    }
}

impl fmt::Display for MismatchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Error => "error",
            Self::Ignore => "ignore",
            Self::CopyFromFinetuned => "copy_from_finetuned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Extracted {
        base_id: String,
        finetuned_id: String,
    },
    Loaded,
}

/// Per-tensor deltas plus tensors carried over from the fine-tuned side.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    deltas: BTreeMap<String, Tensor>,
    extras: BTreeMap<String, Tensor>,
    origin: Origin,
}

/// Which tensors [`extract_task_vector`] left out or carried as extras.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MismatchSummary {
    pub ignored: Vec<String>,
    pub copied: Vec<String>,
}

impl TaskVector {
    pub fn new(deltas: BTreeMap<String, Tensor>) -> Self {
        Self {
            deltas,
            extras: BTreeMap::new(),
            origin: Origin::Loaded,
        }
    }

    /// Convenience constructor from `f64` values stored as `F64` tensors.
    pub fn from_f64<'a>(items: impl IntoIterator<Item = (&'a str, Vec<usize>, Vec<f64>)>) -> Self {
        Self::new(
            items
                .into_iter()
                .map(|(n, shape, v)| (n.to_string(), Tensor::from_f64(DType::F64, shape, &v)))
                .collect(),
        )
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_extras(mut self, extras: BTreeMap<String, Tensor>) -> Self {
        self.extras = extras;
        self
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    pub fn deltas(&self) -> &BTreeMap<String, Tensor> {
        &self.deltas
    }

    pub fn extras(&self) -> &BTreeMap<String, Tensor> {
        &self.extras
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.deltas.get(name)
    }

    /// Decoded values of one delta tensor.
    pub fn values(&self, name: &str) -> Option<Vec<f64>> {
        self.deltas.get(name).map(Tensor::to_f64_vec)
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.deltas.values().map(Tensor::numel).sum()
    }

    /// Re-encodes every delta in `dtype`.
    pub fn cast(&self, dtype: DType) -> TaskVector {
        TaskVector {
            deltas: self
                .deltas
                .iter()
                .map(|(n, t)| (n.clone(), t.cast(dtype)))
                .collect(),
            extras: self.extras.clone(),
            origin: self.origin.clone(),
        }
    }

    /// The archive form: deltas as ordinary tensors, extras under
    /// [`EXTRA_PREFIX`], and `vecmerge.kind = task_vector` in the metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (n, t) in &self.deltas {
            ck.insert(n.clone(), t.clone()).expect("valid name");
        }
        for (n, t) in &self.extras {
            ck.insert(format!("{EXTRA_PREFIX}{n}"), t.clone())
                .expect("valid name");
        }
        ck.set_metadata(KIND_KEY, KIND_TASK_VECTOR);
        if let Origin::Extracted {
            base_id,
            finetuned_id,
        } = &self.origin
        {
            ck.set_metadata(ORIGIN_BASE_KEY, base_id.clone());
            ck.set_metadata(ORIGIN_FINETUNED_KEY, finetuned_id.clone());
        }
        ck
    }

    /// Interprets an archive as a task vector. Tensors under
    /// [`EXTRA_PREFIX`] become extras.
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let mut deltas = BTreeMap::new();
        let mut extras = BTreeMap::new();
        for (n, t) in ck.iter() {
            match n.strip_prefix(EXTRA_PREFIX) {
                Some(rest) => extras.insert(rest.to_string(), t.clone()),
                None => deltas.insert(n.clone(), t.clone()),
            };
        }
        Self {
            deltas,
            extras,
            origin: Origin::Loaded,
        }
    }
}

/// True when the archive's metadata marks it as a stored task vector.
pub fn is_task_vector(ck: &Checkpoint) -> bool {
    ck.metadata().get(KIND_KEY).map(String::as_str) == Some(KIND_TASK_VECTOR)
}

/// `finetuned - base` over every tensor shared by name and shape.
pub fn extract_task_vector(
    base: &Checkpoint,
    finetuned: &Checkpoint,
    policy: MismatchPolicy,
) -> Result<(TaskVector, MismatchSummary)> {
    let mut shared = Vec::new();
    let mut mismatched = Vec::new();
    for (name, ft) in finetuned.iter() {
        match base.get(name) {
            Some(b) if b.shape() == ft.shape() => shared.push((name, b, ft)),
            _ => mismatched.push(name.clone()),
        }
    }
    let base_only: Vec<String> = base
        .names()
        .filter(|n| !finetuned.contains(n))
        .cloned()
        .collect();
    if shared.is_empty() {
        return Err(MergeError::NoSharedTensors);
    }

    let mut summary = MismatchSummary::default();
    let mut extras = BTreeMap::new();
    match policy {
        MismatchPolicy::Error => {
            if !mismatched.is_empty() || !base_only.is_empty() {
                let mut all = mismatched;
                all.extend(base_only);
                all.sort();
                return Err(MergeError::Mismatched(all));
            }
        }
        MismatchPolicy::Ignore => {
            summary.ignored = mismatched;
            summary.ignored.extend(base_only);
            summary.ignored.sort();
        }
        MismatchPolicy::CopyFromFinetuned => {
            for name in mismatched {
                extras.insert(name.clone(), finetuned.get(&name).unwrap().clone());
                summary.copied.push(name);
            }
            summary.ignored = base_only;
        }
    }

    let deltas = shared
        .into_par_iter()
        .map(|(name, b, ft)| {
            let mut d = ft.to_f64_vec();
            let mut bv = vec![0.0; CHUNK];
            for (ci, chunk) in d.chunks_mut(CHUNK).enumerate() {
                let bv = &mut bv[..chunk.len()];
                b.read_f64(ci * CHUNK, bv);
                for (x, y) in chunk.iter_mut().zip(bv.iter()) {
                    *x -= *y;
                }
            }
            (
                name.clone(),
                Tensor::from_f64(DType::F64, b.shape().to_vec(), &d),
            )
        })
        .collect();
    let tv = TaskVector {
        deltas,
        extras,
        origin: Origin::Extracted {
            base_id: "base".into(),
            finetuned_id: "finetuned".into(),
        },
    };
    Ok((tv, summary))
}

/// Multiplies every delta by `lambda` (in `f64`). `lambda = -1` negates.
pub fn scale(tv: &TaskVector, lambda: f64) -> Result<TaskVector> {
    if !lambda.is_finite() {
        return Err(MergeError::NonFiniteScale(lambda));
    }
    let deltas = tv
        .deltas
        .par_iter()
        .map(|(n, t)| {
            let v: Vec<f64> = t.to_f64_vec().into_iter().map(|x| lambda * x).collect();
            (
                n.clone(),
                Tensor::from_f64(DType::F64, t.shape().to_vec(), &v),
            )
        })
        .collect();
    Ok(TaskVector {
        deltas,
        extras: tv.extras.clone(),
        origin: tv.origin.clone(),
    })
}

/// Element-wise sum over the union of names, accumulated in list order
/// starting from `+0.0`. Names absent from a vector contribute nothing.
pub fn add_vectors(tvs: &[&TaskVector]) -> Result<TaskVector> {
    if tvs.is_empty() {
        return Err(MergeError::NoVectors);
    }
    let mut shapes: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for tv in tvs {
        for (n, t) in &tv.deltas {
            if let Some(prev) = shapes.insert(n, t.shape()) {
                if prev != t.shape() {
                    return Err(MergeError::ShapeConflict {
                        name: n.clone(),
                        left: prev.to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
            }
        }
    }
    let deltas = shapes
        .into_par_iter()
        .map(|(name, shape)| {
            let mut acc = vec![0.0; shape.iter().product()];
            for tv in tvs {
                if let Some(t) = tv.deltas.get(name) {
                    for (a, x) in acc.iter_mut().zip(t.to_f64_vec()) {
                        *a += x;
                    }
                }
            }
            (
                name.to_string(),
                Tensor::from_f64(DType::F64, shape.to_vec(), &acc),
            )
        })
        .collect();
    let mut extras = BTreeMap::new();
    for tv in tvs {
        extras.extend(tv.extras.iter().map(|(n, t)| (n.clone(), t.clone())));
    }
    Ok(TaskVector {
        deltas,
        extras,
        origin: Origin::Loaded,
    })
}

/// `base + tv`, rounded into each base tensor's dtype. Tensors the vector
/// does not touch are copied bit-exactly; extras are inserted verbatim.
pub fn apply(base: &Checkpoint, tv: &TaskVector) -> Result<Checkpoint> {
    tv_merge(base, &[(tv, 1.0)])
}

/// `base + sum_i lambda_i * tau_i` with a single `f64` accumulation per
/// element and one final rounding.
///
/// Per element the sum is formed exactly as
/// `apply(base, add_vectors([scale(tau_i, lambda_i)]))` would: start from
/// `+0.0`, add `lambda_i * tau_i` in list order, then add the base value.
pub fn tv_merge(base: &Checkpoint, weighted: &[(&TaskVector, f64)]) -> Result<Checkpoint> {
    if weighted.is_empty() {
        return Err(MergeError::NoVectors);
    }
    for &(_, lambda) in weighted {
        if !lambda.is_finite() {
            return Err(MergeError::NonFiniteScale(lambda));
        }
    }
    let mut terms: BTreeMap<&str, Vec<(&Tensor, f64)>> = BTreeMap::new();
    for &(tv, lambda) in weighted {
        for (name, t) in &tv.deltas {
            check_against_base(base, name, t)?;
            terms.entry(name).or_default().push((t, lambda));
        }
    }
    let merged: Vec<(String, Tensor)> = terms
        .into_iter()
        .map(|(name, ts)| (name.to_string(), accumulate(base.get(name).unwrap(), &ts)))
        .collect();

    let mut out = base.clone();
    for (name, t) in merged {
        out.insert(name, t)?;
    }
    for &(tv, _) in weighted {
        for (name, t) in &tv.extras {
            out.insert(name.clone(), t.clone())?;
        }
    }
    Ok(out)
}

pub(crate) fn check_against_base(base: &Checkpoint, name: &str, t: &Tensor) -> Result<()> {
    match base.get(name) {
        None => Err(MergeError::MissingInBase(name.to_string())),
        Some(b) if b.shape() != t.shape() => Err(MergeError::ShapeConflict {
            name: name.to_string(),
            left: b.shape().to_vec(),
            right: t.shape().to_vec(),
        }),
        Some(_) => Ok(()),
    }
}

/// `base + (0 + sum lambda * t)` per element, chunked and element-parallel.
pub(crate) fn accumulate(base: &Tensor, terms: &[(&Tensor, f64)]) -> Tensor {
    let dt = base.dtype();
    let sz = dt.size();
    let mut out = vec![0u8; base.numel() * sz];
    out.par_chunks_mut(CHUNK * sz)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let start = ci * CHUNK;
            let len = out_chunk.len() / sz;
            let mut acc = vec![0.0; len];
            let mut tmp = vec![0.0; len];
            for &(t, lambda) in terms {
                t.read_f64(start, &mut tmp);
                for (a, x) in acc.iter_mut().zip(&tmp) {
                    *a += lambda * x;
                }
            }
            base.read_f64(start, &mut tmp);
            for (a, b) in acc.iter_mut().zip(&tmp) {
                // x + 0.0 == x except for x == -0.0; keep the base bits.
                *a = if *a == 0.0 { *b } else { b + *a };
            }
            dt.encode_into(&acc, out_chunk);
        });
    Tensor::from_bytes(dt, base.shape().to_vec(), out).expect("sized from base")
}
