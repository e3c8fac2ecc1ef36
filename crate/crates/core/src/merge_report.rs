//! Merge diagnostics: checkpoint differences, task-vector cosine, and the
//! trim/sign statistics behind TIES.
//!
//! Reports serialize to JSON with a stable key order (structs and
//! `BTreeMap`s only).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MergeError;
use crate::tensor_store::Checkpoint;
use crate::ties::{check_density, elect_signs, trim, SignMap};
use crate::tv_algebra::{Result, TaskVector};

/// Above this many vectors only adjacent pairs are compared.
pub const ALL_PAIRS_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub numel: usize,
    pub l2: f64,
    pub max_abs: f64,
    pub equal_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub tensors: BTreeMap<String, TensorDiff>,
    pub global: TensorDiff,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    pub shape_mismatch: Vec<String>,
}

/// Element-wise statistics of `b - a` over tensors shared by name and shape.
pub fn diff_stats(a: &Checkpoint, b: &Checkpoint) -> Result<DiffReport> {
    let mut shared = Vec::new();
    let mut only_in_a = Vec::new();
    let mut shape_mismatch = Vec::new();
    for (name, ta) in a.iter() {
        match b.get(name) {
            Some(tb) if tb.shape() == ta.shape() => shared.push((name, ta, tb)),
            Some(_) => shape_mismatch.push(name.clone()),
            None => only_in_a.push(name.clone()),
        }
    }
    let only_in_b: Vec<String> = b.names().filter(|n| !a.contains(n)).cloned().collect();
    if shared.is_empty() {
        return Err(MergeError::NoSharedTensors);
    }

    // (numel, sum of squares, max abs, equal count)
    let raw: BTreeMap<String, (usize, f64, f64, usize)> = shared
        .into_par_iter()
        .map(|(name, ta, tb)| {
            let (va, vb) = (ta.to_f64_vec(), tb.to_f64_vec());
            let mut ss = 0.0;
            let mut max = 0.0f64;
            let mut eq = 0;
            for (x, y) in va.iter().zip(&vb) {
                let d = y - x;
                ss += d * d;
                max = max.max(d.abs());
                eq += usize::from(x == y);
            }
            (name.clone(), (va.len(), ss, max, eq))
        })
        .collect();

    let fraction = |eq: usize, n: usize| if n == 0 { 1.0 } else { eq as f64 / n as f64 };
    let mut total = (0usize, 0.0f64, 0.0f64, 0usize);
    let tensors = raw
        .into_iter()
        .map(|(name, (n, ss, max, eq))| {
            total.0 += n;
            total.1 += ss;
            total.2 = total.2.max(max);
            total.3 += eq;
            let d = TensorDiff {
                numel: n,
                l2: ss.sqrt(),
                max_abs: max,
                equal_fraction: fraction(eq, n),
            };
            (name, d)
        })
        .collect();
    Ok(DiffReport {
        tensors,
        global: TensorDiff {
            numel: total.0,
            l2: total.1.sqrt(),
            max_abs: total.2,
            equal_fraction: fraction(total.3, total.0),
        },
        only_in_a,
        only_in_b,
        shape_mismatch,
    })
}

/// Sign agreement of two trimmed vectors over positions both keep nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub a: usize,
    pub b: usize,
    pub jointly_kept: usize,
    pub agreeing: usize,
    /// `agreeing / jointly_kept`; `None` when nothing is jointly kept.
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInterference {
    pub numel: usize,
    /// Per vector: sum |kept| / sum |all|. `None` when the vector lacks the
    /// tensor or its mass is zero.
    pub trimmed_mass: Vec<Option<f64>>,
    pub pairs: Vec<PairAgreement>,
    pub zero_sign_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub vector_count: usize,
    pub density: f64,
    pub tensors: BTreeMap<String, TensorInterference>,
    pub global: TensorInterference,
}

/// Pairs compared for `n` vectors.
pub fn pair_indices(n: usize) -> Vec<(usize, usize)> {
    if n <= ALL_PAIRS_LIMIT {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    } else {
        (0..n - 1).map(|i| (i, i + 1)).collect()
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| (num / den).clamp(0.0, 1.0))
}

/// Trims each vector at `density`, elects signs with unit weights, and
/// reports trimmed mass, pairwise sign agreement and zero-sign counts.
pub fn interference_stats(tvs: &[&TaskVector], density: f64) -> Result<InterferenceReport> {
    check_density(density)?;
    if tvs.is_empty() {
        return Err(MergeError::NoVectors);
    }
    let trimmed: Vec<TaskVector> = tvs
        .iter()
        .map(|tv| trim(tv, density))
        .collect::<Result<_>>()?;
    let refs: Vec<&TaskVector> = trimmed.iter().collect();
    let signs = elect_signs(&refs, &vec![1.0; refs.len()])?;
    Ok(interference_from_parts(tvs, &refs, &signs, density))
}

/// Per-tensor sums before ratios are taken.
struct Tally {
    numel: usize,
    kept: Vec<f64>,
    all: Vec<f64>,
    present: Vec<bool>,
    joint: Vec<(usize, usize)>,
    zero_sign: usize,
}

pub(crate) fn interference_from_parts(
    originals: &[&TaskVector],
    trimmed: &[&TaskVector],
    signs: &SignMap,
    density: f64,
) -> InterferenceReport {
    let n = originals.len();
    let pairs = pair_indices(n);
    let tallies: BTreeMap<String, Tally> = signs
        .tensors
        .par_iter()
        .map(|(name, st)| {
            let orig: Vec<Option<Vec<f64>>> = originals.iter().map(|t| t.values(name)).collect();
            let trim: Vec<Option<Vec<f64>>> = trimmed.iter().map(|t| t.values(name)).collect();
            let abs_sum =
                |v: &Option<Vec<f64>>| v.as_ref().map_or(0.0, |v| v.iter().map(|x| x.abs()).sum());
            let joint = pairs
                .iter()
                .map(|&(i, j)| match (&trim[i], &trim[j]) {
                    (Some(a), Some(b)) => a.iter().zip(b).fold((0, 0), |(k, g), (x, y)| {
                        if *x != 0.0 && *y != 0.0 {
                            (k + 1, g + usize::from((*x > 0.0) == (*y > 0.0)))
                        } else {
                            (k, g)
                        }
                    }),
                    _ => (0, 0),
                })
                .collect();
            let tally = Tally {
                numel: st.signs.len(),
                kept: trim.iter().map(abs_sum).collect(),
                all: orig.iter().map(abs_sum).collect(),
                present: orig.iter().map(Option::is_some).collect(),
                joint,
                zero_sign: st.signs.iter().filter(|&&s| s == 0).count(),
            };
            (name.clone(), tally)
        })
        .collect();

    let summarize = |t: &Tally| TensorInterference {
        numel: t.numel,
        trimmed_mass: (0..n)
            .map(|v| {
                if t.present[v] {
                    ratio(t.kept[v], t.all[v])
                } else {
                    None
                }
            })
            .collect(),
        pairs: pairs
            .iter()
            .zip(&t.joint)
            .map(|(&(a, b), &(k, g))| PairAgreement {
                a,
                b,
                jointly_kept: k,
                agreeing: g,
                agreement: ratio(g as f64, k as f64),
            })
            .collect(),
        zero_sign_count: t.zero_sign,
    };

    let mut total = Tally {
        numel: 0,
        kept: vec![0.0; n],
        all: vec![0.0; n],
        present: vec![true; n],
        joint: vec![(0, 0); pairs.len()],
        zero_sign: 0,
    };
    for t in tallies.values() {
        total.numel += t.numel;
        total.zero_sign += t.zero_sign;
        for v in 0..n {
            total.kept[v] += t.kept[v];
            total.all[v] += t.all[v];
        }
        for (acc, (k, g)) in total.joint.iter_mut().zip(&t.joint) {
            acc.0 += k;
            acc.1 += g;
        }
    }

    InterferenceReport {
        vector_count: n,
        density,
        tensors: tallies
            .iter()
            .map(|(k, t)| (k.clone(), summarize(t)))
            .collect(),
        global: summarize(&total),
    }
}

/// Cosine similarity of the flattened concatenation over shared names.
pub fn cosine(a: &TaskVector, b: &TaskVector) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut shared = 0;
    for (name, ta) in a.deltas() {
        let Some(tb) = b.get(name) else { continue };
        if ta.shape() != tb.shape() {
            return Err(MergeError::ShapeConflict {
                name: name.clone(),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        shared += 1;
        for (x, y) in ta.to_f64_vec().into_iter().zip(tb.to_f64_vec()) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if shared == 0 {
        return Err(MergeError::NoSharedTensors);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(MergeError::UndefinedCosine);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
