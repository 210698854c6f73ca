//! Small feed-forward classifier with manual backpropagation.
//!
//! Parameters are stored flat, layer by layer: the weight matrix of a layer
//! (`fan_out × fan_in`, row-major by output unit) followed by its bias vector.
//! Hidden layers use the rectifier; the output layer feeds a softmax
//! cross-entropy loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ModelArch {
    layer_dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl ModelArch {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid(format!(
                "architecture needs at least an input and an output layer, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer widths must be positive, got {layer_dims:?}"
            )));
        }
        Ok(ModelArch { layer_dims })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `Σ (d_k · d_{k+1} + d_{k+1})`
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    /// Index ranges of every bias block in the flat layout, in layer order.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers()
            .into_iter()
            .map(|l| l.bias..l.bias + l.fan_out)
            .collect()
    }
}

impl TryFrom<Vec<usize>> for ModelArch {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        ModelArch::new(dims)
    }
}

impl From<ModelArch> for Vec<usize> {
    fn from(arch: ModelArch) -> Vec<usize> {
        arch.layer_dims
    }
}

/// A mini-batch: row-major features plus one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("batch must hold at least one sample"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "batch has {} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// He-style initialisation: weights `N(0, 1) / sqrt(fan_in)`, biases zero.
pub fn init_params(arch: &ModelArch, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for layer in arch.layers() {
        let scale = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut values[layer.weights..layer.bias] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = z * scale;
        }
    }
    ParamVector::from_vec(values)
}

fn check_inputs(params: &ParamVector, arch: &ModelArch, dim: usize, labels: &[usize]) -> Result<()> {
    params.check_dim(arch.param_count())?;
    if dim != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: dim,
        });
    }
    let classes = arch.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Forward pass keeping every layer's post-activation output.
/// `acts[0]` is the input and the last entry holds the raw logits.
fn forward(params: &[f64], layers: &[Layer], input: &[f64], acts: &mut Vec<Vec<f64>>) {
    acts.resize(layers.len() + 1, Vec::new());
    acts[0].clear();
    acts[0].extend_from_slice(input);
    for (k, layer) in layers.iter().enumerate() {
        let (prev, rest) = acts.split_at_mut(k + 1);
        let a_in = &prev[k];
        let out = &mut rest[0];
        out.clear();
        let last = k + 1 == layers.len();
        for o in 0..layer.fan_out {
            let row = &params[layer.weights + o * layer.fan_in..layer.weights + (o + 1) * layer.fan_in];
            let z = params[layer.bias + o] + dot(row, a_in);
            out.push(if last { z } else { z.max(0.0) });
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn sample_loss(logits: &[f64], label: usize) -> f64 {
    // lse >= z_label mathematically; clamp the rounding residue.
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

/// Lowest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sum over the batch of per-sample cross-entropy `−ln p(label)`.
pub fn batch_loss_sum(params: &ParamVector, arch: &ModelArch, batch: &Batch) -> Result<f64> {
    check_inputs(params, arch, batch.dim, &batch.labels)?;
    let layers = arch.layers();
    let mut acts = Vec::new();
    let mut total = 0.0;
    for (i, &label) in batch.labels.iter().enumerate() {
        forward(params.as_slice(), &layers, batch.row(i), &mut acts);
        total += sample_loss(acts.last().unwrap(), label);
    }
    Ok(total)
}

/// Gradient of the mean per-sample loss, `batch_loss_sum / |batch|`.
pub fn gradient(params: &ParamVector, arch: &ModelArch, batch: &Batch) -> Result<ParamVector> {
    check_inputs(params, arch, batch.dim, &batch.labels)?;
    let layers = arch.layers();
    let p = params.as_slice();
    let mut grad = vec![0.0; p.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut acts = Vec::new();
    let mut delta = Vec::new();
    let mut delta_prev = Vec::new();

    for (i, &label) in batch.labels.iter().enumerate() {
        forward(p, &layers, batch.row(i), &mut acts);

        // dL/dlogits = softmax − onehot, pre-scaled for the mean.
        let logits = acts.last().unwrap();
        let lse = log_sum_exp(logits);
        delta.clear();
        delta.extend(logits.iter().map(|z| (z - lse).exp() * scale));
        delta[label] -= scale;

        for (k, layer) in layers.iter().enumerate().rev() {
            let a_in = &acts[k];
            for o in 0..layer.fan_out {
                let d = delta[o];
                grad[layer.bias + o] += d;
                if d != 0.0 {
                    let g_row = &mut grad[layer.weights + o * layer.fan_in
                        ..layer.weights + (o + 1) * layer.fan_in];
                    for (g, a) in g_row.iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
            }
            if k == 0 {
                break;
            }
            delta_prev.clear();
            delta_prev.resize(layer.fan_in, 0.0);
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &p[layer.weights + o * layer.fan_in..layer.weights + (o + 1) * layer.fan_in];
                for (dp, w) in delta_prev.iter_mut().zip(row) {
                    *dp += w * d;
                }
            }
            // Rectifier derivative: zero where the hidden unit was inactive.
            for (dp, a) in delta_prev.iter_mut().zip(a_in) {
                if *a <= 0.0 {
                    *dp = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
    }
    Ok(ParamVector::from_vec(grad))
}

/// Result of a client's local job.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOutput {
    /// `base − final`; the server subtracts this, so it points uphill.
    pub delta: ParamVector,
    /// Always exactly `base − delta`.
    pub final_params: ParamVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Runs `spec.steps` plain SGD steps from `base` on batches drawn with
/// replacement from `indices` of `dataset`.
pub fn local_train(
    base: &ParamVector,
    arch: &ModelArch,
    dataset: &Dataset,
    indices: &[usize],
    spec: LocalTrainSpec,
    rng_seed: u64,
) -> Result<LocalTrainOutput> {
    if indices.is_empty() {
        return Err(Error::invalid("local training on an empty partition"));
    }
    if spec.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    base.check_dim(arch.param_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = base.clone();
    for _ in 0..spec.steps {
        let batch = data::sample_batch(dataset, indices, spec.batch_size, &mut rng)?;
        let g = gradient(&x, arch, &batch)?;
        x.axpy(-spec.lr, &g)?;
    }
    let delta = base.sub(&x)?;
    let final_params = base.sub(&delta)?;
    Ok(LocalTrainOutput {
        delta,
        final_params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy (argmax, lowest index on ties) and mean cross-entropy over a dataset.
pub fn evaluate(params: &ParamVector, arch: &ModelArch, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    check_inputs(params, arch, dataset.dim(), dataset.labels())?;
    let layers = arch.layers();
    let mut acts = Vec::new();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, &label) in dataset.labels().iter().enumerate() {
        forward(params.as_slice(), &layers, dataset.row(i), &mut acts);
        let logits = acts.last().unwrap();
        if argmax(logits) == label {
            correct += 1;
        }
        loss += sample_loss(logits, label);
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
