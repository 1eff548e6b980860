//! Minimal trainable model: a dense feed-forward network with rectifier
//! hidden layers and a softmax output, trained by local mini-batch SGD on
//! cross-entropy loss.
//!
//! All parameters live in a single flat [`ParamVector`] so the aggregation
//! and attack machinery never needs to know the architecture. Layout per
//! layer: weight matrix `out x in` row-major, then `out` biases.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::Dataset;
use crate::param::{ParamVector, SignVector};

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("parameter vector has length {actual}, spec needs {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("a model needs at least an input and an output layer")]
    TooFewLayers,
    #[error("layer sizes must be positive")]
    ZeroLayer,
    #[error("feature dimension {data} does not match model input {model}")]
    FeatureDimMismatch { model: usize, data: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Layer sizes of the dense network: input, hidden..., output (= class count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, LearnerError> {
        if layer_sizes.len() < 2 {
            return Err(LearnerError::TooFewLayers);
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(LearnerError::ZeroLayer);
        }
        Ok(Self { layer_sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total flat parameter count `d`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn check_params(&self, w: &ParamVector) -> Result<(), LearnerError> {
        let expected = self.param_count();
        if w.len() != expected {
            return Err(LearnerError::DimensionMismatch {
                expected,
                actual: w.len(),
            });
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases, deterministic per rng stream.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.random::<f64>() * 2.0 * limit - limit);
            }
            for _ in 0..fan_out {
                values.push(0.0);
            }
        }
        ParamVector::from_raw(values)
    }
}

/// A model is just a spec plus its flat parameters; `unflatten` is the
/// validating constructor and `flatten` hands the parameters back.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Model {
    pub fn unflatten(spec: ModelSpec, params: ParamVector) -> Result<Self, LearnerError> {
        spec.check_params(&params)?;
        Ok(Self { spec, params })
    }

    pub fn flatten(&self) -> ParamVector {
        self.params.clone()
    }
}

/// Per-layer scratch produced by a forward pass: post-activation outputs
/// (rectified for hidden layers, raw logits for the last).
struct Forward {
    activations: Vec<Vec<f64>>,
}

fn forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Forward {
    let mut activations = Vec::with_capacity(spec.n_layers());
    let mut input = x;
    let mut offset = 0;
    for (l, sizes) in spec.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (sizes[0], sizes[1]);
        let weights = &w[offset..offset + n_in * n_out];
        let biases = &w[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let last = l + 1 == spec.n_layers();
        let mut out = vec![0.0; n_out];
        for o in 0..n_out {
            let row = &weights[o * n_in..(o + 1) * n_in];
            let mut z = biases[o];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            out[o] = if last { z } else { z.max(0.0) };
        }
        activations.push(out);
        input = activations.last().unwrap();
    }
    Forward { activations }
}

/// Log-sum-exp stabilized softmax probabilities.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy loss and its gradient over a batch of rows.
pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, ParamVector), LearnerError> {
    spec.check_params(w)?;
    if data.feature_dim() != spec.input_dim() {
        return Err(LearnerError::FeatureDimMismatch {
            model: spec.input_dim(),
            data: data.feature_dim(),
        });
    }
    if batch.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let ws = w.as_slice();
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for &i in batch {
        let x = data.row(i);
        let y = data.label(i);
        let fwd = forward(spec, ws, x);
        let logits = fwd.activations.last().unwrap();
        loss += log_sum_exp(logits) - logits[y];

        // delta for the output layer: softmax - onehot
        let mut delta = softmax(logits);
        delta[y] -= 1.0;

        // Walk layers backwards, accumulating into the flat gradient.
        let mut offsets = Vec::with_capacity(spec.n_layers());
        let mut off = 0;
        for sizes in spec.layer_sizes.windows(2) {
            offsets.push(off);
            off += sizes[0] * sizes[1] + sizes[1];
        }
        for l in (0..spec.n_layers()).rev() {
            let n_in = spec.layer_sizes[l];
            let n_out = spec.layer_sizes[l + 1];
            let off = offsets[l];
            let prev: &[f64] = if l == 0 { x } else { &fwd.activations[l - 1] };
            for o in 0..n_out {
                let d = delta[o];
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, p) in row.iter_mut().zip(prev) {
                    *g += d * p;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &ws[off..off + n_in * n_out];
                let mut prev_delta = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    for (pd, wi) in prev_delta.iter_mut().zip(row) {
                        *pd += d * wi;
                    }
                }
                // Rectifier derivative from post-activation values.
                for (pd, a) in prev_delta.iter_mut().zip(&fwd.activations[l - 1]) {
                    if *a <= 0.0 {
                        *pd = 0.0;
                    }
                }
                delta = prev_delta;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss * scale, ParamVector::from_raw(grad)))
}

/// Local-training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

/// Runs `local_epochs` of mini-batch SGD starting from `w_global` on the
/// given rows and returns the model update (local minus global).
/// Deterministic given the rng stream.
pub fn local_train<R: Rng>(
    spec: &ModelSpec,
    w_global: &ParamVector,
    data: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ParamVector, LearnerError> {
    if rows.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    spec.check_params(w_global)?;
    let mut local = w_global.clone();
    let mut order: Vec<usize> = rows.to_vec();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (_, grad) = loss_and_grad(spec, &local, data, batch)?;
            let step = grad.scale(-cfg.learning_rate);
            local.add_assign(&step).expect("same dimension");
        }
    }
    local.sub(w_global).map_err(|_| LearnerError::DimensionMismatch {
        expected: spec.param_count(),
        actual: w_global.len(),
    })
}

/// Predicted class: argmax over logits, ties to the lowest class id.
pub fn predict(spec: &ModelSpec, w: &ParamVector, x: &[f64]) -> usize {
    let fwd = forward(spec, w.as_slice(), x);
    let logits = fwd.activations.last().unwrap();
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    best
}

/// Testing error rate: fraction of inputs whose predicted class differs
/// from the label.
pub fn evaluate(
    spec: &ModelSpec,
    w: &ParamVector,
    test: &Dataset,
) -> Result<f64, LearnerError> {
    if test.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    spec.check_params(w)?;
    if test.feature_dim() != spec.input_dim() {
        return Err(LearnerError::FeatureDimMismatch {
            model: spec.input_dim(),
            data: test.feature_dim(),
        });
    }
    let wrong = (0..test.len())
        .filter(|&i| predict(spec, w, test.row(i)) != test.label(i))
        .count();
    Ok(wrong as f64 / test.len() as f64)
}

/// Max relative error between the analytic gradient and central finite
/// differences over all parameters.
pub fn gradient_check(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<f64, LearnerError> {
    let (_, analytic) = loss_and_grad(spec, w, data, batch)?;
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut probe = w.clone();
    for j in 0..w.len() {
        let orig = probe.as_slice()[j];
        probe.as_mut_slice()[j] = orig + h;
        let (lp, _) = loss_and_grad(spec, &probe, data, batch)?;
        probe.as_mut_slice()[j] = orig - h;
        let (lm, _) = loss_and_grad(spec, &probe, data, batch)?;
        probe.as_mut_slice()[j] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic.as_slice()[j];
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// `w + noise_norm * u` where `u` is a unit vector whose signs are `s` and
/// whose magnitudes are random.
pub fn perturb_along_random_direction<R: Rng>(
    w: &ParamVector,
    s: &SignVector,
    noise_norm: f64,
    rng: &mut R,
) -> ParamVector {
    assert_eq!(w.len(), s.len());
    let normal = StandardNormal;
    let mut u: Vec<f64> = (0..w.len())
        .map(|j| {
            let m: f64 = normal.sample(rng);
            m.abs() * f64::from(s.get(j))
        })
        .collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let unit = 1.0 / (w.len() as f64).sqrt();
        for (uj, &sj) in u.iter_mut().zip(s.as_slice()) {
            *uj = unit * f64::from(sj);
        }
    } else {
        for uj in &mut u {
            *uj /= norm;
        }
    }
    let noise = ParamVector::from_raw(u).scale(noise_norm);
    w.add(&noise).expect("same dimension")
}
