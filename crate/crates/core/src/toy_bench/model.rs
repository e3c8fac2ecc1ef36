//! Two-layer ReLU classifier with analytic gradients and full-batch
//! gradient descent on mean softmax cross-entropy.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::prng::Prng;
use super::{BenchError, ModelSpec};
use crate::tensor_store::{Checkpoint, DType, Tensor};

pub const LAYER0_WEIGHT: &str = "layer0.weight";
pub const LAYER0_BIAS: &str = "layer0.bias";
pub const LAYER1_WEIGHT: &str = "layer1.weight";
pub const LAYER1_BIAS: &str = "layer1.bias";
/// Standard deviation of initial weights.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Dense parameters: `w0` is `[h, d]`, `w1` is `[c, h]`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: ModelSpec,
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
}

impl Mlp {
    pub fn zeros(spec: ModelSpec) -> Self {
        let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.class_count);
        Self {
            spec,
            w0: vec![0.0; h * d],
            b0: vec![0.0; h],
            w1: vec![0.0; c * h],
            b1: vec![0.0; c],
        }
    }

    /// Reads the four fixed tensors; any other tensor is an error.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, BenchError> {
        let get = |name: &str| {
            ck.get(name)
                .ok_or_else(|| BenchError::Invalid(format!("missing tensor {name:?}")))
        };
        let (w0, b0, w1, b1) = (
            get(LAYER0_WEIGHT)?,
            get(LAYER0_BIAS)?,
            get(LAYER1_WEIGHT)?,
            get(LAYER1_BIAS)?,
        );
        if ck.len() != 4 {
            return Err(BenchError::Invalid(format!(
                "expected exactly 4 tensors, found {}",
                ck.len()
            )));
        }
        let bad = |what: &str| BenchError::Invalid(format!("shape mismatch: {what}"));
        let [h, d] = w0.shape() else {
            return Err(bad(LAYER0_WEIGHT));
        };
        let [c, h1] = w1.shape() else {
            return Err(bad(LAYER1_WEIGHT));
        };
        if h1 != h || b0.shape() != [*h] || b1.shape() != [*c] {
            return Err(bad("layer sizes disagree"));
        }
        let spec = ModelSpec {
            input_dim: *d,
            hidden_dim: *h,
            class_count: *c,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            w0: w0.to_f64_vec(),
            b0: b0.to_f64_vec(),
            w1: w1.to_f64_vec(),
            b1: b1.to_f64_vec(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (d, h, c) = (
            self.spec.input_dim,
            self.spec.hidden_dim,
            self.spec.class_count,
        );
        Checkpoint::new()
            .with(LAYER0_BIAS, Tensor::from_f64(DType::F64, vec![h], &self.b0))
            .with(
                LAYER0_WEIGHT,
                Tensor::from_f64(DType::F64, vec![h, d], &self.w0),
            )
            .with(LAYER1_BIAS, Tensor::from_f64(DType::F64, vec![c], &self.b1))
            .with(
                LAYER1_WEIGHT,
                Tensor::from_f64(DType::F64, vec![c, h], &self.w1),
            )
    }

    /// Parameter slices in lexicographic tensor-name order.
    pub fn params_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            (LAYER0_BIAS, &mut self.b0),
            (LAYER0_WEIGHT, &mut self.w0),
            (LAYER1_BIAS, &mut self.b1),
            (LAYER1_WEIGHT, &mut self.w1),
        ]
    }

    pub fn params(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            (LAYER0_BIAS, &self.b0),
            (LAYER0_WEIGHT, &self.w0),
            (LAYER1_BIAS, &self.b1),
            (LAYER1_WEIGHT, &self.w1),
        ]
    }

    /// Hidden pre-activations `[n, h]` for `x` (`[n, d]`, row-major).
    fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        let (d, h) = (self.spec.input_dim, self.spec.hidden_dim);
        let n = x.len() / d;
        let mut pre = vec![0.0; n * h];
        for (row, out) in x.chunks_exact(d).zip(pre.chunks_exact_mut(h)) {
            for (j, o) in out.iter_mut().enumerate() {
                let w = &self.w0[j * d..(j + 1) * d];
                *o = w
                    .iter()
                    .zip(row)
                    .fold(self.b0[j], |acc, (a, b)| acc + a * b);
            }
        }
        pre
    }

    fn logits_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let (h, c) = (self.spec.hidden_dim, self.spec.class_count);
        let n = hidden.len() / h;
        let mut logits = vec![0.0; n * c];
        for (hid, out) in hidden.chunks_exact(h).zip(logits.chunks_exact_mut(c)) {
            for (k, o) in out.iter_mut().enumerate() {
                let w = &self.w1[k * h..(k + 1) * h];
                *o = w
                    .iter()
                    .zip(hid)
                    .fold(self.b1[k], |acc, (a, b)| acc + a * b);
            }
        }
        logits
    }

    /// Logits `[n, c]`: `w1 . relu(w0 . x + b0) + b1` per row.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .pre_activations(x)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        self.logits_from_hidden(&hidden)
    }

    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        self.logits(x)
            .chunks_exact(self.spec.class_count)
            .map(argmax)
            .collect()
    }

    /// Mean cross-entropy and its gradient, returned as an `Mlp` of the
    /// same shape.
    pub fn loss_and_grad(&self, data: &Dataset) -> (f64, Mlp) {
        let (d, h, c) = (
            self.spec.input_dim,
            self.spec.hidden_dim,
            self.spec.class_count,
        );
        let n = data.len();
        let pre = self.pre_activations(&data.x);
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let logits = self.logits_from_hidden(&hidden);

        let mut grad = Mlp::zeros(self.spec);
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        let mut dlogit = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        for i in 0..n {
            let z = &logits[i * c..(i + 1) * c];
            let probs = softmax(z);
            let label = data.y[i];
            loss -= log_softmax_at(z, label);
            for (k, (dl, pk)) in dlogit.iter_mut().zip(&probs).enumerate() {
                *dl = (pk - f64::from(u8::from(k == label))) * inv_n;
            }
            let hid = &hidden[i * h..(i + 1) * h];
            dhidden.iter_mut().for_each(|v| *v = 0.0);
            for (k, &g) in dlogit.iter().enumerate() {
                grad.b1[k] += g;
                let w = &self.w1[k * h..(k + 1) * h];
                let gw = &mut grad.w1[k * h..(k + 1) * h];
                for j in 0..h {
                    gw[j] += g * hid[j];
                    dhidden[j] += g * w[j];
                }
            }
            let row = data.row(i);
            for j in 0..h {
                if pre[i * h + j] <= 0.0 {
                    continue;
                }
                let g = dhidden[j];
                grad.b0[j] += g;
                for (gw, xv) in grad.w0[j * d..(j + 1) * d].iter_mut().zip(row) {
                    *gw += g * xv;
                }
            }
        }
        (loss * inv_n, grad)
    }

    pub fn loss(&self, data: &Dataset) -> f64 {
        let c = self.spec.class_count;
        let logits = self.logits(&data.x);
        let total: f64 = logits
            .chunks_exact(c)
            .zip(&data.y)
            .map(|(z, &y)| -log_softmax_at(z, y))
            .sum();
        total / data.len() as f64
    }

    /// ReLU activation pattern (pre-activation > 0) over `x`.
    pub fn activation_mask(&self, x: &[f64]) -> Vec<bool> {
        self.pre_activations(x)
            .into_iter()
            .map(|v| v > 0.0)
            .collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Gaussian(0, 0.1) weights drawn in tensor-name order (`layer0.weight`
/// then `layer1.weight`, row-major); zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Checkpoint, BenchError> {
    spec.validate()?;
    let mut m = Mlp::zeros(*spec);
    let mut rng = Prng::new(seed);
    for w in m.w0.iter_mut() {
        *w = rng.normal(0.0, INIT_STD);
    }
    for w in m.w1.iter_mut() {
        *w = rng.normal(0.0, INIT_STD);
    }
    Ok(m.to_checkpoint())
}

/// Logits `[n, c]` of a checkpoint for row-major inputs of width `d`.
pub fn forward(model: &Checkpoint, x: &[f64]) -> Result<Vec<f64>, BenchError> {
    let m = Mlp::from_checkpoint(model)?;
    if !x.len().is_multiple_of(m.spec.input_dim) {
        return Err(BenchError::Invalid(format!(
            "input length {} is not a multiple of width {}",
            x.len(),
            m.spec.input_dim
        )));
    }
    Ok(m.logits(x))
}

/// `epochs` steps of full-batch gradient descent. Returns a new checkpoint.
pub fn train(
    model: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Checkpoint, BenchError> {
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(BenchError::Invalid(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    let mut m = Mlp::from_checkpoint(model)?;
    if data.dim != m.spec.input_dim {
        return Err(BenchError::Invalid(format!(
            "data width {} does not match model input {}",
            data.dim, m.spec.input_dim
        )));
    }
    if data.y.iter().any(|&y| y >= m.spec.class_count) {
        return Err(BenchError::Invalid("label out of range".into()));
    }
    train_mlp(&mut m, data, cfg)?;
    let mut out = m.to_checkpoint();
    *out.metadata_mut() = model.metadata().clone();
    Ok(out)
}

pub(crate) fn train_mlp(m: &mut Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<(), BenchError> {
    for epoch in 0..cfg.epochs {
        let (loss, grad) = m.loss_and_grad(data);
        if !loss.is_finite() {
            return Err(BenchError::Diverged { epoch });
        }
        for ((_, p), (_, g)) in m.params_mut().into_iter().zip(grad.params()) {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                *pv -= cfg.learning_rate * gv;
            }
        }
    }
    Ok(())
}
