//! Seeded synthetic classification data.
//!
//! Class `k` of language `L1` is centred at `+2 e_(k mod d)`, of `L2` at
//! `-2 e_(k mod d)`. A mixed sample blends one draw of each:
//! `x = a * x1 + (1 - a) * x2` with `a ~ U(0.3, 0.7)`. Every draw adds
//! gaussian noise with standard deviation 0.5. Labels are assigned
//! round-robin, so sample `i` has label `i mod c`.
//!
//! Draw order per sample: `a` (mixed only), then `d` gaussians for each
//! constituent (`L1` before `L2`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::prng::Prng;
use super::{BenchError, ModelSpec};

pub const CLASS_OFFSET: f64 = 2.0;
pub const NOISE_STD: f64 = 0.5;
pub const MIX_RANGE: (f64, f64) = (0.3, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    L1,
    L2,
    #[serde(rename = "mixed")]
    Mixed,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::L1 => "L1",
            DataKind::L2 => "L2",
            DataKind::Mixed => "mixed",
        })
    }
}

impl FromStr for DataKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L1" => Ok(DataKind::L1),
            "L2" => Ok(DataKind::L2),
            "mixed" => Ok(DataKind::Mixed),
            other => Err(format!("unknown data kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub dim: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        assert_eq!(self.dim, other.dim, "feature widths differ");
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Dataset {
            x,
            y,
            dim: self.dim,
            split: self.split,
        }
    }
}

fn class_mean(kind: DataKind, class: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    m[class % dim] = match kind {
        DataKind::L1 => CLASS_OFFSET,
        DataKind::L2 => -CLASS_OFFSET,
        DataKind::Mixed => unreachable!("mixed data has no single mean"),
    };
    m
}

fn draw(rng: &mut Prng, mean: &[f64]) -> Vec<f64> {
    mean.iter().map(|&m| rng.normal(m, NOISE_STD)).collect()
}

/// `n` samples of `kind` for the shape in `spec`.
pub fn gen_dataset(
    kind: DataKind,
    n: usize,
    spec: &ModelSpec,
    seed: u64,
) -> Result<Dataset, BenchError> {
    spec.validate()?;
    let (d, c) = (spec.input_dim, spec.class_count);
    if n < c {
        return Err(BenchError::Invalid(format!(
            "{n} samples cannot cover {c} classes"
        )));
    }
    let mut rng = Prng::new(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        match kind {
            DataKind::L1 | DataKind::L2 => x.extend(draw(&mut rng, &class_mean(kind, k, d))),
            DataKind::Mixed => {
                let a = rng.uniform_range(MIX_RANGE.0, MIX_RANGE.1);
                let x1 = draw(&mut rng, &class_mean(DataKind::L1, k, d));
                let x2 = draw(&mut rng, &class_mean(DataKind::L2, k, d));
                x.extend(x1.iter().zip(&x2).map(|(p, q)| a * p + (1.0 - a) * q));
            }
        }
        y.push(k);
    }
    Ok(Dataset {
        x,
        y,
        dim: d,
        split: Split::Train,
    })
}
