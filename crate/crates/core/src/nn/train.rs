use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, Network};
use crate::elements::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::ImageTensor;

/// Source of labelled images for training and evaluation.
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Appends flattened HWC images and multi-hot labels for `indices`.
    fn fill(&self, indices: &[usize], images: &mut Vec<f32>, labels: &mut Vec<f32>);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet for Dataset {
    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn num_classes(&self) -> usize {
        self.table.len()
    }

    fn fill(&self, indices: &[usize], images: &mut Vec<f32>, labels: &mut Vec<f32>) {
        for image in self.images(indices) {
            images.extend_from_slice(&image.data);
        }
        for &i in indices {
            labels.extend(
                self.labels(i)
                    .into_iter()
                    .map(|b| if b { 1.0 } else { 0.0 }),
            );
        }
    }
}

/// Pre-rendered images with explicit labels.
#[derive(Debug, Clone)]
pub struct InMemorySet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<Vec<bool>>,
}

impl TrainingSet for InMemorySet {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn num_classes(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    fn fill(&self, indices: &[usize], images: &mut Vec<f32>, labels: &mut Vec<f32>) {
        for &i in indices {
            images.extend_from_slice(&self.images[i].data);
            labels.extend(self.labels[i].iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once eval-mode training accuracy exceeds this fraction.
    pub accuracy_threshold: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            accuracy_threshold: 0.995,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy of training-mode predictions during the epoch.
    pub batch_accuracy: f64,
    /// Evaluation-mode accuracy over the full training set, when measured.
    pub train_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub converged: bool,
    /// Set when training hit `max_epochs` without reaching the threshold.
    pub warning: Option<String>,
    pub final_train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub total_seconds: f64,
    pub loss_function: String,
    pub accuracy_definition: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub log: TrainingLog,
}

/// Accuracy and mean loss over a set, evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Mean binary cross-entropy with logits and its gradient.
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f64, Vec<f32>, usize) {
    let count = logits.len() as f32;
    let mut loss = 0.0f64;
    let mut correct = 0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) as f64;
            if (z > 0.0) == (y > 0.5) {
                correct += 1;
            }
            (1.0 / (1.0 + (-z).exp()) - y) / count
        })
        .collect();
    (loss / logits.len().max(1) as f64, grad, correct)
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(net: &mut Network<f32>) -> Self {
        let sizes: Vec<usize> = net.params_mut().iter().map(|p| p.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network<f32>, grads: &[&[f32]], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate as f32;
        let eps = cfg.adam_eps as f32;
        for (((p, g), m), v) in net
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// One optimisation step on a batch; returns the batch loss and correct count.
fn train_batch(
    net: &mut Network<f32>,
    adam: &mut Adam,
    images: &[f32],
    labels: &[f32],
    n: usize,
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let trace = net.train_forward(images, n)?;
    let (loss, grad, correct) = bce_with_logits(trace.output(), labels);
    if !loss.is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    let mut grads = net.zero_grads();
    net.train_backward(&trace, &grad, &mut grads);
    net.update_running_stats(&trace, cfg.bn_momentum);
    adam.step(net, &grads.flat(), cfg);
    Ok((loss, correct))
}

pub fn evaluate(
    net: &Network<f32>,
    data: &dyn TrainingSet,
    batch_size: usize,
) -> Result<Evaluation> {
    let (mut loss, mut correct, mut total) = (0.0, 0usize, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        data.fill(chunk, &mut x, &mut y);
        let logits = net.forward(&x, chunk.len())?;
        let (l, _, c) = bce_with_logits(&logits, &y);
        loss += l * logits.len() as f64;
        correct += c;
        total += logits.len();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / total.max(1) as f64,
        loss: loss / total.max(1) as f64,
    })
}

/// Trains a freshly initialized network with Adam on multi-label BCE.
pub fn train(
    model: &ModelConfig,
    data: &dyn TrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch (used for progress output).
pub fn train_with(
    model: &ModelConfig,
    data: &dyn TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    if data.num_classes() != model.num_classes {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes,
            found: data.num_classes(),
        });
    }
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let start = Instant::now();
    let mut net = Network::<f32>::init(model, cfg.seed)?;
    let mut adam = Adam::new(&mut net);
    let mut log = TrainingLog {
        loss_function: "mean binary cross-entropy over (image, class) logits".into(),
        accuracy_definition: "fraction of (image, class) pairs with sign(logit) matching label"
            .into(),
        ..TrainingLog::default()
    };
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.max_epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "epoch-order", epoch as u64));
        let (mut loss, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(batch) {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            data.fill(chunk, &mut x, &mut y);
            let (l, c) = train_batch(&mut net, &mut adam, &x, &y, chunk.len(), cfg)?;
            loss += l * y.len() as f64;
            correct += c;
            seen += y.len();
        }
        let batch_accuracy = correct as f64 / seen as f64;
        // Full eval passes are only worth their cost once the running
        // training-mode accuracy is near the target.
        let train_accuracy = if batch_accuracy >= cfg.accuracy_threshold - 0.002 {
            Some(evaluate(&net, data, 64)?.accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: loss / seen as f64,
            batch_accuracy,
            train_accuracy,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if train_accuracy.is_some_and(|a| a > cfg.accuracy_threshold) {
            log.converged = true;
            log.final_train_accuracy = train_accuracy;
            break;
        }
    }
    if !log.converged {
        log.warning = Some(format!(
            "training accuracy did not exceed {} within {} epochs",
            cfg.accuracy_threshold, cfg.max_epochs
        ));
    }
    log.total_seconds = start.elapsed().as_secs_f64();
    Ok(TrainedModel { network: net, log })
}

/// Runs a fixed number of optimisation steps on the whole set as one batch
/// and returns the loss before each step.
pub fn overfit_steps(
    model: &ModelConfig,
    data: &dyn TrainingSet,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut net = Network::<f32>::init(model, cfg.seed)?;
    let mut adam = Adam::new(&mut net);
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    data.fill(&indices, &mut x, &mut y);
    (0..steps)
        .map(|_| train_batch(&mut net, &mut adam, &x, &y, indices.len(), cfg).map(|(l, _)| l))
        .collect()
}
