//! TIES merging: trim each task vector to its largest-magnitude entries,
//! elect a per-parameter sign, then average only the entries that agree
//! with the elected sign.
//!
//! Per-element sums over vectors are taken in ascending value order so the
//! result does not depend on the order the vectors are listed in.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MergeError;
use crate::merge_report::{interference_from_parts, InterferenceReport};
use crate::tensor_store::{Checkpoint, DType, Tensor};
use crate::tv_algebra::{check_against_base, tv_merge, Result, TaskVector};

pub const DEFAULT_DENSITY: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiesConfig {
    /// Fraction of entries kept per tensor per vector, in (0, 1].
    pub density: f64,
    /// One positive weight per vector; used in both election and the mean.
    pub weights: Vec<f64>,
    /// Final scale on the merged vector.
    pub lambda: f64,
}

impl TiesConfig {
    /// Default density and lambda with the given per-vector weights.
    pub fn new(weights: Vec<f64>) -> Self {
        Self {
            density: DEFAULT_DENSITY,
            weights,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn validate(&self, vector_count: usize) -> Result<()> {
        check_density(self.density)?;
        check_weights(&self.weights, vector_count)?;
        if !self.lambda.is_finite() {
            return Err(MergeError::NonFiniteScale(self.lambda));
        }
        Ok(())
    }
}

pub(crate) fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density <= 1.0 {
        Ok(())
    } else {
        Err(MergeError::InvalidDensity(density))
    }
}

fn check_weights(weights: &[f64], vector_count: usize) -> Result<()> {
    if weights.len() != vector_count {
        return Err(MergeError::InvalidWeights(format!(
            "{} weights for {} vectors",
            weights.len(),
            vector_count
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(MergeError::InvalidWeights(format!(
            "weights must be finite and positive, got {w}"
        )));
    }
    Ok(())
}

/// Number of entries kept out of `numel` at `density`: `ceil(density * numel)`.
///
/// A product within 1e-9 (relative) of an integer counts as that integer, so
/// `0.3 * 10` keeps 3 entries rather than 4.
pub fn keep_count(density: f64, numel: usize) -> usize {
    let raw = density * numel as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).min(numel)
}

/// Elected signs, one `i8` in {-1, 0, +1} per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignTensor {
    pub shape: Vec<usize>,
    pub signs: Vec<i8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SignMap {
    pub tensors: BTreeMap<String, SignTensor>,
}

impl SignMap {
    pub fn get(&self, name: &str) -> Option<&SignTensor> {
        self.tensors.get(name)
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn trim_values(values: &mut [f64], k: usize) {
    let n = values.len();
    if k >= n {
        return;
    }
    if k == 0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Larger magnitude first; equal magnitudes keep the lower index.
    order.select_nth_unstable_by(k - 1, |&a, &b| {
        values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
    });
    let mut keep = vec![false; n];
    for &i in &order[..k] {
        keep[i] = true;
    }
    for (v, kept) in values.iter_mut().zip(keep) {
        if !kept {
            *v = 0.0;
        }
    }
}

/// Keeps the `ceil(density * numel)` largest-magnitude entries of each
/// tensor and zeroes the rest. Storage dtypes are preserved.
pub fn trim(tv: &TaskVector, density: f64) -> Result<TaskVector> {
    check_density(density)?;
    if density == 1.0 {
        return Ok(tv.clone());
    }
    let deltas = tv
        .deltas()
        .par_iter()
        .map(|(name, t)| {
            let mut v = t.to_f64_vec();
            let k = keep_count(density, v.len());
            trim_values(&mut v, k);
            (
                name.clone(),
                Tensor::from_f64(t.dtype(), t.shape().to_vec(), &v),
            )
        })
        .collect();
    Ok(TaskVector::new(deltas)
        .with_extras(tv.extras().clone())
        .with_origin(tv.origin().clone()))
}

/// Union of names over `tvs` with their (agreeing) shapes.
fn union_shapes<'a>(tvs: &[&'a TaskVector]) -> Result<BTreeMap<&'a str, &'a [usize]>> {
    let mut shapes: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for tv in tvs {
        for (n, t) in tv.deltas() {
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
    Ok(shapes)
}

/// Decoded values of `name` in every vector (`None` where absent).
fn columns(tvs: &[&TaskVector], name: &str) -> Vec<Option<Vec<f64>>> {
    tvs.iter().map(|tv| tv.values(name)).collect()
}

fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().fold(0.0, |acc, x| acc + x)
}

/// `sign(sum_t w_t * trimmed_t)` per element; absent names contribute zero.
pub fn elect_signs(trimmed: &[&TaskVector], weights: &[f64]) -> Result<SignMap> {
    if trimmed.is_empty() {
        return Err(MergeError::NoVectors);
    }
    check_weights(weights, trimmed.len())?;
    let shapes = union_shapes(trimmed)?;
    let tensors = shapes
        .into_par_iter()
        .map(|(name, shape)| {
            let cols = columns(trimmed, name);
            let n: usize = shape.iter().product();
            let mut buf = Vec::with_capacity(trimmed.len());
            let signs = (0..n)
                .map(|p| {
                    buf.clear();
                    for (col, w) in cols.iter().zip(weights) {
                        if let Some(v) = col {
                            buf.push(w * v[p]);
                        }
                    }
                    sign(sorted_sum(&mut buf))
                })
                .collect();
            (
                name.to_string(),
                SignTensor {
                    shape: shape.to_vec(),
                    signs,
                },
            )
        })
        .collect();
    Ok(SignMap { tensors })
}

/// Weighted mean over the vectors whose entry agrees with the elected sign;
/// zero where the elected sign is zero or nobody agrees.
pub fn disjoint_merge(
    trimmed: &[&TaskVector],
    weights: &[f64],
    signs: &SignMap,
) -> Result<TaskVector> {
    if trimmed.is_empty() {
        return Err(MergeError::NoVectors);
    }
    check_weights(weights, trimmed.len())?;
    let shapes = union_shapes(trimmed)?;
    for (name, shape) in &shapes {
        match signs.get(name) {
            Some(s) if s.shape == *shape => {}
            Some(s) => {
                return Err(MergeError::ShapeConflict {
                    name: name.to_string(),
                    left: s.shape.clone(),
                    right: shape.to_vec(),
                })
            }
            None => {
                return Err(MergeError::ShapeConflict {
                    name: name.to_string(),
                    left: Vec::new(),
                    right: shape.to_vec(),
                })
            }
        }
    }
    let deltas = shapes
        .into_par_iter()
        .map(|(name, shape)| {
            let cols = columns(trimmed, name);
            let gamma = &signs.get(name).unwrap().signs;
            let mut num = Vec::with_capacity(trimmed.len());
            let mut den = Vec::with_capacity(trimmed.len());
            let merged: Vec<f64> = gamma
                .iter()
                .enumerate()
                .map(|(p, &g)| {
                    if g == 0 {
                        return 0.0;
                    }
                    num.clear();
                    den.clear();
                    let mut last = 0.0;
                    for (col, &w) in cols.iter().zip(weights) {
                        if let Some(v) = col {
                            if sign(v[p]) == g {
                                num.push(w * v[p]);
                                den.push(w);
                                last = v[p];
                            }
                        }
                    }
                    match den.len() {
                        0 => 0.0,
                        // a lone agreeing entry is its own mean; (w v) / w may be off by an ulp
                        1 => last,
                        _ => sorted_sum(&mut num) / sorted_sum(&mut den),
                    }
                })
                .collect();
            (
                name.to_string(),
                Tensor::from_f64(DType::F64, shape.to_vec(), &merged),
            )
        })
        .collect();
    let mut extras = BTreeMap::new();
    for tv in trimmed {
        extras.extend(tv.extras().iter().map(|(n, t)| (n.clone(), t.clone())));
    }
    Ok(TaskVector::new(deltas).with_extras(extras))
}

/// Full TIES pipeline onto `base`: trim, elect, disjoint merge, scale by
/// `config.lambda`, add. Also returns interference statistics of the inputs.
pub fn ties_merge(
    base: &Checkpoint,
    tvs: &[&TaskVector],
    config: &TiesConfig,
) -> Result<(Checkpoint, InterferenceReport)> {
    if tvs.is_empty() {
        return Err(MergeError::NoVectors);
    }
    config.validate(tvs.len())?;
    for tv in tvs {
        for (name, t) in tv.deltas() {
            check_against_base(base, name, t)?;
        }
    }
    let trimmed: Vec<TaskVector> = tvs
        .iter()
        .map(|tv| trim(tv, config.density))
        .collect::<Result<_>>()?;
    let trimmed_refs: Vec<&TaskVector> = trimmed.iter().collect();
    let signs = elect_signs(&trimmed_refs, &config.weights)?;
    let merged = disjoint_merge(&trimmed_refs, &config.weights, &signs)?;
    let out = tv_merge(base, &[(&merged, config.lambda)])?;
    let report = interference_from_parts(tvs, &trimmed_refs, &signs, config.density);
    Ok((out, report))
}
