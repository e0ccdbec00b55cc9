//! Perception network: two convolution + max-pool stages whose pooled
//! activations are L1- and L2-normalized respectively, producing a unit-norm
//! feature vector. A softmax head is attached only for pretraining.

use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section, CNN_TAG};
use crate::error::{shape_err, Error, Result};
use crate::face::{Emotion, FaceImage, LabeledImage, FACE_SIZE};
use crate::numerics::{affine, affine_backward, softmax, Activation, Conv2d, Layer, Network, Tensor};
use crate::par;

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
pub const KERNEL: usize = 5;
/// 64 -> conv 60 -> pool 30 -> conv 26 -> pool 13; 16 * 13 * 13.
pub const FEATURE_DIM: usize = CONV2_CHANNELS * 13 * 13;

/// Variance floor of the head's per-dimension standardization.
const HEAD_VAR_EPS: f64 = 1e-6;

const ARCH: &str = "conv1=8x1x5x5;conv2=16x8x5x5;head=7x2704";

/// Unit-L2-norm embedding of a face image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm()).max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: Emotion,
    pub probabilities: [f64; Emotion::COUNT],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CnnMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Multiplier on `learning_rate` for the two convolution layers.
    pub conv_lr_scale: f64,
    /// Conv2 sees L1-normalized activations (entries around 1e-4), so a
    /// learned bias swamps its signal within a few steps. Off by default:
    /// biases stay at their zero initialization.
    pub train_conv_bias: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 16,
            conv_lr_scale: 1.0,
            train_conv_bias: false,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    features: Network,
    /// Per-dimension feature mean and scale the head standardizes with.
    head_mean: Vec<f64>,
    head_scale: Vec<f64>,
    head_weights: Tensor,
    head_bias: Tensor,
    meta: CnnMeta,
}

impl CnnModel {
    /// He-initialized convolutions and a zero softmax head.
    pub fn new_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |cout: usize, cin: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            Layer::Conv2d(Conv2d {
                kernels: Tensor::random_normal(vec![cout, cin, KERNEL, KERNEL], (2.0 / fan_in).sqrt(), rng),
                bias: Tensor::zeros(vec![cout]),
            })
        };
        let features = Network::new(vec![
            conv(CONV1_CHANNELS, 1, &mut rng),
            Layer::Act(Activation::Relu),
            Layer::MaxPool2,
            Layer::L1Norm,
            conv(CONV2_CHANNELS, CONV1_CHANNELS, &mut rng),
            Layer::Act(Activation::Relu),
            Layer::MaxPool2,
            Layer::L2Norm,
            Layer::Flatten,
        ]);
        Self {
            features,
            head_mean: vec![0.0; FEATURE_DIM],
            head_scale: vec![1.0; FEATURE_DIM],
            head_weights: Tensor::zeros(vec![Emotion::COUNT, FEATURE_DIM]),
            head_bias: Tensor::zeros(vec![Emotion::COUNT]),
            meta: CnnMeta {
                seed,
                ..CnnMeta::default()
            },
        }
    }

    pub fn meta(&self) -> CnnMeta {
        self.meta
    }

    pub fn feature_network(&self) -> &Network {
        &self.features
    }

    pub fn params_finite(&self) -> bool {
        self.features.params_finite() && self.head_weights.is_finite() && self.head_bias.is_finite()
    }

    pub fn forward_features(&self, image: &FaceImage) -> Result<FeatureVector> {
        self.features_from_tensor(&image.to_tensor())
    }

    /// Feature extraction from a raw `[1, 64, 64]` tensor.
    pub fn features_from_tensor(&self, input: &Tensor) -> Result<FeatureVector> {
        if input.shape() != [1, FACE_SIZE, FACE_SIZE] {
            return Err(shape_err("forward_features", "[1, 64, 64]", format!("{:?}", input.shape())));
        }
        Ok(FeatureVector(self.features.forward(input)?.into_data()))
    }

    /// Features for many images; order preserved.
    pub fn features_batch(&self, images: &[FaceImage]) -> Result<Vec<FeatureVector>> {
        par::map(images, |img| self.forward_features(img)).into_iter().collect()
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.head_mean.iter().zip(&self.head_scale))
            .map(|(f, (m, s))| (f - m) / s)
            .collect()
    }

    fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        affine(&self.standardize(features), &self.head_weights, self.head_bias.data())
    }

    /// Sets the head's standardization statistics from a feature sample.
    fn fit_head_statistics(&mut self, features: &[Vec<f64>]) {
        let (mean, var) = moments(features);
        self.head_mean = mean;
        self.head_scale = var.into_iter().map(|v| (v + HEAD_VAR_EPS).sqrt()).collect();
    }

    pub fn classify(&self, image: &FaceImage) -> Result<Classification> {
        let f = self.forward_features(image)?;
        let p = softmax(&self.logits(f.as_slice())?);
        let mut probabilities = [0.0; Emotion::COUNT];
        probabilities.copy_from_slice(&p);
        let best = argmax(&probabilities);
        Ok(Classification {
            label: Emotion::from_code(best).expect("7 classes"),
            probabilities,
        })
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &[LabeledImage]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty set".into()));
        }
        let hits = par::map(data, |s| self.classify(&s.image).map(|c| c.label == s.label))
            .into_iter()
            .collect::<Result<Vec<bool>>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn to_section(&self) -> Section {
        let mut values = self.features.flat_params();
        values.extend_from_slice(&self.head_mean);
        values.extend_from_slice(&self.head_scale);
        values.extend_from_slice(self.head_weights.data());
        values.extend_from_slice(self.head_bias.data());
        Section::new(CNN_TAG)
            .with("arch", ARCH)
            .with("epochs", self.meta.epochs)
            .with("final_loss", self.meta.final_loss)
            .with("seed", self.meta.seed)
            .with_values(values)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(vec![self.to_section()])
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let s = cp.section(CNN_TAG)?;
        let arch: String = s.get("arch")?;
        if arch != ARCH {
            return Err(s.malformed(format!("unsupported architecture `{arch}`")).into());
        }
        let mut model = Self::new_random(0);
        model.meta = CnnMeta {
            epochs: s.get("epochs")?,
            final_loss: s.get("final_loss")?,
            seed: s.get("seed")?,
        };
        let n_feat = model.features.param_count();
        let n_head = 2 * FEATURE_DIM + model.head_weights.len() + model.head_bias.len();
        if s.values.len() != n_feat + n_head {
            return Err(s
                .malformed(format!("expected {} parameters, found {}", n_feat + n_head, s.values.len()))
                .into());
        }
        model.features.set_flat_params(&s.values[..n_feat])?;
        let (stats, head) = s.values[n_feat..].split_at(2 * FEATURE_DIM);
        model.head_mean = stats[..FEATURE_DIM].to_vec();
        model.head_scale = stats[FEATURE_DIM..].to_vec();
        let (w, b) = head.split_at(model.head_weights.len());
        model.head_weights.data_mut().copy_from_slice(w);
        model.head_bias.data_mut().copy_from_slice(b);
        Ok(model)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-dimension mean and (biased) variance.
fn moments(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = features.first().map_or(0, Vec::len);
    let n = features.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Splits `0..n` (already permuted in `order`) into batches of `size`,
/// folding a trailing single sample into the previous batch so batch
/// statistics are always defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

struct BatchOutcome {
    loss_sum: f64,
    hits: usize,
}

impl CnnModel {
    /// One SGD step on the mean cross-entropy of a batch. Inside the batch the
    /// head standardizes features with the batch's own mean and variance, and
    /// the gradient flows through those statistics.
    fn train_batch(&mut self, data: &[LabeledImage], batch: &[usize], config: &PretrainConfig) -> Result<BatchOutcome> {
        let traces = par::map(batch, |&i| self.features.forward_trace(&data[i].image.to_tensor()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let feats: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| t.output().expect("trace output").data().to_vec())
            .collect();
        let b = feats.len() as f64;
        let (mean, var) = moments(&feats);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + HEAD_VAR_EPS).sqrt()).collect();
        let standardized: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().zip(&mean).zip(&inv_std).map(|((x, m), k)| (x - m) * k).collect())
            .collect();

        let mut outcome = BatchOutcome { loss_sum: 0.0, hits: 0 };
        let mut d_w = Tensor::zeros(self.head_weights.shape().to_vec());
        let mut d_b = Tensor::zeros(vec![Emotion::COUNT]);
        let mut d_std = Vec::with_capacity(batch.len());
        for (x_hat, &i) in standardized.iter().zip(batch) {
            let p = softmax(&affine(x_hat, &self.head_weights, self.head_bias.data())?);
            let target = data[i].label.code();
            outcome.loss_sum += -p[target].max(f64::MIN_POSITIVE).ln();
            outcome.hits += (argmax(&p) == target) as usize;
            let mut d_logits = p;
            d_logits[target] -= 1.0;
            d_logits.iter_mut().for_each(|g| *g /= b);
            let (dx, dw, db) = affine_backward(x_hat, &self.head_weights, &d_logits)?;
            d_w.add_scaled(&dw, 1.0)?;
            d_b.add_scaled(&Tensor::from_vec(db), 1.0)?;
            d_std.push(dx);
        }

        let conv_lr = config.learning_rate * config.conv_lr_scale;
        if conv_lr > 0.0 {
            // standardization backward: dx = k * (g - mean(g) - x_hat * mean(g * x_hat))
            let dim = mean.len();
            let mut g_mean = vec![0.0; dim];
            let mut gx_mean = vec![0.0; dim];
            for (g, x_hat) in d_std.iter().zip(&standardized) {
                for j in 0..dim {
                    g_mean[j] += g[j] / b;
                    gx_mean[j] += g[j] * x_hat[j] / b;
                }
            }
            let upstream: Vec<Tensor> = d_std
                .iter()
                .zip(&standardized)
                .map(|(g, x_hat)| {
                    Tensor::from_vec(
                        (0..dim)
                            .map(|j| inv_std[j] * (g[j] - g_mean[j] - x_hat[j] * gx_mean[j]))
                            .collect(),
                    )
                })
                .collect();
            let grads = par::map_range(traces.len(), |k| self.features.backward(&traces[k], &upstream[k]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut iter = grads.into_iter();
            let mut total = iter.next().expect("non-empty batch");
            for g in iter {
                total.accumulate(&g)?;
            }
            if !config.train_conv_bias {
                for g in total.layers.iter_mut().flatten() {
                    g.bias.fill(0.0);
                }
            }
            self.features.sgd_step(&total, conv_lr)?;
        }
        if !(d_w.is_finite() && d_b.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: self.features.layers().len() });
        }
        self.head_weights.add_scaled(&d_w, -config.learning_rate)?;
        self.head_bias.add_scaled(&d_b, -config.learning_rate)?;
        Ok(outcome)
    }
}

/// Mini-batch SGD on softmax cross-entropy over the feature vector.
///
/// `on_epoch` sees each epoch's mean training loss and accuracy as measured
/// during that epoch's pass. After the last epoch the head's standardization
/// statistics are fixed from the whole training set. Deterministic given
/// `config.seed`.
pub fn pretrain(
    data: &[LabeledImage],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(CnnModel, Vec<EpochStats>)> {
    let mut counts = [0usize; Emotion::COUNT];
    for s in data {
        counts[s.label.code()] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "pretraining data has no `{}` samples",
            Emotion::from_code(missing).expect("in range")
        )));
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
    }
    let mut model = CnnModel::new_random(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in batches(&order, config.batch_size) {
            let out = model.train_batch(data, batch, config)?;
            loss_sum += out.loss_sum;
            hits += out.hits;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    let images: Vec<FaceImage> = data.iter().map(|s| s.image.clone()).collect();
    let feats = model.features_batch(&images)?;
    model.fit_head_statistics(&feats.into_iter().map(|f| f.0).collect::<Vec<_>>());
    model.meta.epochs = config.epochs;
    model.meta.final_loss = history.last().map_or(f64::NAN, |s| s.loss);
    Ok((model, history))
}
