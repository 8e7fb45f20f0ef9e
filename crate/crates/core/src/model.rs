//! Fully-connected ReLU classifier with softmax cross-entropy, per-example
//! backpropagation and Adam.
//!
//! Parameters live in one flat vector. Layer by layer, each layer stores its
//! weight matrix row-major with shape `(fan_out, fan_in)` followed by its
//! bias vector. Gradients use the same layout.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::LabeledExample;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss or gradient ({0})")]
    NonFinite(f64),
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
    #[error("coordinate {index} out of range for {len} parameters")]
    Coordinate { index: usize, len: usize },
    #[error("empty training split")]
    EmptyTrain,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

/// Layer widths `[d_in, h_1, ..., h_k, n_classes]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, ModelError> {
        let spec = Self { layer_sizes };
        spec.validate()?;
        Ok(spec)
    }

    /// The fully-connected `d_in → 500 → 300 → 100 → n_classes` network.
    pub fn reference_fc(d_in: usize, n_classes: usize) -> Self {
        Self {
            layer_sizes: vec![d_in, 500, 300, 100, n_classes],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::Spec("need at least input and output sizes".into()));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(ModelError::Spec(format!(
                "layer sizes must be >= 1: {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layout(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let l = LayerLayout {
                    w: off,
                    b: off + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                off += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Structured view of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Row-major `(fan_out, fan_in)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    layout: Vec<LayerLayout>,
    flat: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(spec: MlpSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let flat = vec![0.0; spec.param_count()];
        Ok(Self {
            layout: spec.layout(),
            spec,
            flat,
        })
    }

    pub fn from_flat(spec: MlpSpec, flat: Vec<f64>) -> Result<Self, ModelError> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(ModelError::Dimension {
                expected: spec.param_count(),
                got: flat.len(),
            });
        }
        Ok(Self {
            layout: spec.layout(),
            spec,
            flat,
        })
    }

    pub fn from_layers(spec: MlpSpec, layers: &[LayerParams]) -> Result<Self, ModelError> {
        spec.validate()?;
        if layers.len() != spec.num_layers() {
            return Err(ModelError::Spec(format!(
                "{} layers given, spec has {}",
                layers.len(),
                spec.num_layers()
            )));
        }
        let mut flat = Vec::with_capacity(spec.param_count());
        for (l, lay) in spec.layout().iter().zip(layers) {
            if lay.weights.len() != l.fan_in * l.fan_out || lay.biases.len() != l.fan_out {
                return Err(ModelError::Spec("layer shape mismatch".into()));
            }
            flat.extend_from_slice(&lay.weights);
            flat.extend_from_slice(&lay.biases);
        }
        Self::from_flat(spec, flat)
    }

    pub fn layers(&self) -> Vec<LayerParams> {
        self.layout
            .iter()
            .map(|l| LayerParams {
                weights: self.flat[l.w..l.b].to_vec(),
                biases: self.flat[l.b..l.b + l.fan_out].to_vec(),
            })
            .collect()
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// SHA-256 prefix of the little-endian parameter bytes, as hex.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.flat {
            h.update(v.to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Uniform init with bound `sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in p.layout.clone() {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut p.flat[l.w..l.b] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.spec.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.spec.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layout.len());
        for (li, l) in self.layout.iter().enumerate() {
            let input: Vec<f64>;
            let a: &[f64] = if li == 0 {
                x
            } else {
                input = zs[li - 1].iter().map(|&z| z.max(0.0)).collect();
                &input
            };
            let w = &self.flat[l.w..l.b];
            let b = &self.flat[l.b..l.b + l.fan_out];
            let z: Vec<f64> = (0..l.fan_out)
                .map(|o| {
                    crate::linalg::dot_unchecked(&w[o * l.fan_in..(o + 1) * l.fan_in], a) + b[o]
                })
                .collect();
            zs.push(z);
        }
        zs
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.pre_activations(x).pop().unwrap())
    }

    fn check_label(&self, y: usize) -> Result<(), ModelError> {
        if y >= self.spec.num_classes() {
            return Err(ModelError::Label {
                label: y,
                classes: self.spec.num_classes(),
            });
        }
        Ok(())
    }

    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64, ModelError> {
        self.check_input(x)?;
        self.check_label(y)?;
        let logits = self.pre_activations(x).pop().unwrap();
        let (loss, _) = cross_entropy(&logits, y);
        finite(loss)
    }

    /// Cross-entropy loss and its exact gradient in flat parameter order.
    pub fn loss_and_grad(&self, x: &[f64], y: usize) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_input(x)?;
        self.check_label(y)?;
        let zs = self.pre_activations(x);
        let (loss, probs) = cross_entropy(zs.last().unwrap(), y);
        finite(loss)?;

        let mut grad = vec![0.0; self.flat.len()];
        let mut delta = probs;
        delta[y] -= 1.0;
        for li in (0..self.layout.len()).rev() {
            let l = self.layout[li];
            let relu_in: Vec<f64>;
            let a: &[f64] = if li == 0 {
                x
            } else {
                relu_in = zs[li - 1].iter().map(|&z| z.max(0.0)).collect();
                &relu_in
            };
            let (gw, gb) = grad[l.w..l.b + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
            for (o, &d) in delta.iter().enumerate() {
                gb[o] = d;
                if d != 0.0 {
                    for (g, &ai) in gw[o * l.fan_in..(o + 1) * l.fan_in].iter_mut().zip(a) {
                        *g = d * ai;
                    }
                }
            }
            if li > 0 {
                let w = &self.flat[l.w..l.b];
                let mut prev = vec![0.0; l.fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (p, &wv) in prev.iter_mut().zip(&w[o * l.fan_in..(o + 1) * l.fan_in]) {
                            *p += wv * d;
                        }
                    }
                }
                // relu'(z) = 0 at z <= 0
                for (p, &z) in prev.iter_mut().zip(&zs[li - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        if let Some(&g) = grad.iter().find(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite(g));
        }
        Ok((loss, grad))
    }

    pub fn example_loss_and_grad(&self, ex: &LabeledExample) -> Result<(f64, Vec<f64>), ModelError> {
        self.loss_and_grad(&ex.features, ex.class_id)
    }

    /// Mean loss over `examples`, summed in index order.
    pub fn mean_loss(&self, examples: &[LabeledExample]) -> Result<f64, ModelError> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let losses = examples
            .par_iter()
            .map(|e| self.loss(&e.features, e.class_id))
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(losses.iter().sum::<f64>() / examples.len() as f64)
    }
}

fn finite(loss: f64) -> Result<f64, ModelError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFinite(loss))
    }
}

/// `(-log softmax(logits)[y], softmax(logits))` with max subtraction.
fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    let loss = m + sum.ln() - logits[y];
    (loss.max(0.0), probs)
}

/// Central differences `(L(w + h e_i) - L(w - h e_i)) / 2h` at `coords`.
pub fn finite_diff_grad(
    params: &MlpParams,
    x: &[f64],
    y: usize,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>, ModelError> {
    if !(h > 0.0) {
        return Err(ModelError::Step(h));
    }
    if let Some(&index) = coords.iter().find(|&&i| i >= params.len()) {
        return Err(ModelError::Coordinate {
            index,
            len: params.len(),
        });
    }
    let mut p = params.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = p.flat[i];
            p.flat[i] = orig + h;
            let up = p.loss(x, y)?;
            p.flat[i] = orig - h;
            let down = p.loss(x, y)?;
            p.flat[i] = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update, applied in flat order.
pub fn adam_step(
    params: &mut MlpParams,
    state: &mut AdamState,
    grad: &[f64],
) -> Result<(), ModelError> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(ModelError::Dimension {
            expected: n,
            got: grad.len(),
        });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.flat[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Mean of per-example gradients over `batch`, reduced in index order.
pub fn batch_gradient(
    params: &MlpParams,
    batch: &[&LabeledExample],
) -> Result<(f64, Vec<f64>), ModelError> {
    let per_example = batch
        .par_iter()
        .map(|e| params.example_loss_and_grad(e))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    for (loss, g) in &per_example {
        loss_sum += loss;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss_sum, grad))
}

/// One shuffled pass over `train`; returns the mean per-example loss seen
/// during the pass (each example's loss is taken before its batch's step).
pub fn train_epoch(
    params: &mut MlpParams,
    state: &mut AdamState,
    train: &[LabeledExample],
    batch_size: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrain);
    }
    if batch_size == 0 {
        return Err(ModelError::BatchSize);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i]).collect();
        let (loss_sum, grad) = batch_gradient(params, &batch)?;
        total += loss_sum;
        adam_step(params, state, &grad)?;
    }
    Ok(total / train.len() as f64)
}

const CHECKPOINT_FORMAT: &str = "stiffkit-params";
const CHECKPOINT_VERSION: u32 = 1;

/// JSON parameter checkpoint; f64 values round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub flat: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &MlpParams, init_seed: u64, epoch: usize, learning_rate: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: params.spec.layer_sizes.clone(),
            init_seed,
            epoch,
            learning_rate,
            flat: params.flat.clone(),
        }
    }

    pub fn params(&self) -> Result<MlpParams, ModelError> {
        MlpParams::from_flat(MlpSpec::new(self.layer_sizes.clone())?, self.flat.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}
