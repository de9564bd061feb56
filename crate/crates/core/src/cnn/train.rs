//! Supervised training of the classifier with Adam and categorical
//! cross-entropy, plus the finite-difference gradient checker.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::BnMode;
use super::{features_to_batch, ModelConfig, ModelParams};
use crate::dataset::Sample;
use crate::error::{Error, Result};

/// Training hyperparameters. The defaults are the reference setup: batch 32,
/// a single epoch, Adam with learning rate 1e-3.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            batch_size: 32,
            epochs: 1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub end_step: u64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Delimited export: one row per step, validation accuracy filled on
    /// epoch boundaries.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        writeln!(w, "step\tloss\tval_accuracy").map_err(io_err)?;
        for record in &self.steps {
            let val = self
                .epochs
                .iter()
                .find(|e| e.end_step == record.step)
                .and_then(|e| e.val_accuracy);
            match val {
                Some(acc) => writeln!(w, "{}\t{:.6}\t{acc:.6}", record.step, record.loss),
                None => writeln!(w, "{}\t{:.6}\t", record.step, record.loss),
            }
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Adam {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[&[f64]], hyper: &Hyper) {
        self.t += 1;
        let t = self.t as f64;
        let bias1 = 1.0 - hyper.beta1.powf(t);
        let bias2 = 1.0 - hyper.beta2.powf(t);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_trainable_mut(|idx, slice| {
            let g = grads[idx];
            let m = &mut m[idx];
            let v = &mut v[idx];
            for i in 0..slice.len() {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                slice[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.adam_epsilon);
            }
        });
    }
}

fn batch_inputs(samples: &[Sample], indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
    let features: Vec<_> = indices.iter().map(|&i| &samples[i].features).collect();
    let labels = indices.iter().map(|&i| samples[i].label.index()).collect();
    (features_to_batch(&features), labels)
}

/// Fraction of samples whose argmax prediction matches the label, evaluated
/// in inference mode.
pub fn accuracy(params: &ModelParams, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let features: Vec<_> = chunk.iter().map(|s| &s.features).collect();
        let probs = params.infer_batch(&features);
        for (row, sample) in probs.rows().into_iter().zip(chunk) {
            let mut best = 0;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            if best == sample.label.index() {
                correct += 1;
            }
        }
    }
    correct as f64 / samples.len() as f64
}

/// Trains a fresh model on `train_set`, shuffling deterministically from
/// `seed`, and reports per-step loss plus per-epoch validation accuracy.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    hyper: &Hyper,
    config: &ModelConfig,
    seed: u64,
) -> Result<(ModelParams, TrainHistory)> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch size and epochs must be >= 1".into(),
        ));
    }

    let mut params = ModelParams::init(config, seed);
    let mut adam = Adam::new(&params.trainable_shapes());
    // Separate stream from the init draws.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let momentum = config.bn_momentum;

    let mut history = TrainHistory::default();
    let mut step = 0u64;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..hyper.epochs {
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(hyper.batch_size) {
            let (input, labels) = batch_inputs(train_set, chunk);
            let (loss, grads, stats) =
                params.loss_and_gradients(&input, &labels, BnMode::BatchStats);
            for (layer, stat) in stats.into_iter().enumerate() {
                if let Some((mean, var)) = stat {
                    params.bn[layer].update_running(&mean, &var, momentum);
                }
            }
            adam.step(&mut params, &grads.flat(), hyper);
            step += 1;
            history.steps.push(StepRecord { step, loss });
        }
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(accuracy(&params, val_set))
        };
        history.epochs.push(EpochRecord {
            epoch: epoch as u32 + 1,
            end_step: step,
            val_accuracy,
        });
    }
    Ok((params, history))
}

/// True when two forward passes activated the same units: identical ReLU
/// supports and pooling argmax choices. On such a segment the loss is a
/// fixed smooth composition and a difference quotient is a valid derivative
/// estimate.
fn same_activation_pattern(a: &super::layers::ForwardCache, b: &super::layers::ForwardCache) -> bool {
    for (ra, rb) in a.relu.iter().zip(&b.relu) {
        if ra.iter().zip(rb).any(|(&x, &y)| (x > 0.0) != (y > 0.0)) {
            return false;
        }
    }
    if a.pool1_idx != b.pool1_idx || a.pool2_idx != b.pool2_idx {
        return false;
    }
    a.hidden
        .iter()
        .zip(&b.hidden)
        .all(|(&x, &y)| (x > 0.0) == (y > 0.0))
}

/// Compares analytic gradients against central finite differences on
/// `checks` parameters drawn uniformly from the flat parameter space, with
/// batch normalization in fixed-statistics mode. Returns the worst relative
/// error over the accepted comparisons.
///
/// The loss is only piecewise smooth: stepping a parameter (bias-like ones
/// especially) can flip a ReLU unit or a pooling argmax, and across such a
/// boundary a difference quotient says nothing about the gradient. A
/// comparison outside tolerance is therefore accepted as a failure only if
/// the two perturbed passes activated identical units; otherwise the draw
/// landed on a kink and a fresh parameter is sampled. A genuinely wrong
/// backward pass fails on pattern-stable draws, which dominate.
pub fn gradient_check(
    params: &ModelParams,
    input: &Array4<f64>,
    labels: &[usize],
    checks: usize,
    step: f64,
    seed: u64,
) -> f64 {
    let forward = |p: &ModelParams| {
        let (probs, cache, _) = super::layers::forward_batch(p, input, BnMode::RunningStats);
        let (loss, _) = super::layers::cross_entropy(&probs, labels);
        (loss, cache)
    };
    let (_, grads, _) = params.loss_and_gradients(input, labels, BnMode::RunningStats);
    let flat = grads.flat();
    let shapes = params.trainable_shapes();
    let total: usize = shapes.iter().sum();

    let perturbed = |tensor: usize, element: usize, h: f64| {
        let mut shifted = params.clone();
        shifted.visit_trainable_mut(|idx, slice| {
            if idx == tensor {
                slice[element] += h;
            }
        });
        forward(&shifted)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < checks && attempts < checks * 3 {
        attempts += 1;
        let mut flat_index = rng.random_range(0..total);
        let mut tensor = 0;
        while flat_index >= shapes[tensor] {
            flat_index -= shapes[tensor];
            tensor += 1;
        }
        let element = flat_index;
        let analytic = flat[tensor][element];

        let (loss_plus, cache_plus) = perturbed(tensor, element, step);
        let (loss_minus, cache_minus) = perturbed(tensor, element, -step);
        let fd = (loss_plus - loss_minus) / (2.0 * step);

        let denom = analytic.abs().max(fd.abs());
        if denom < 1e-10 {
            accepted += 1;
            continue;
        }
        let rel = (analytic - fd).abs() / denom;
        if rel > 1e-4 && !same_activation_pattern(&cache_plus, &cache_minus) {
            continue;
        }
        worst = worst.max(rel);
        accepted += 1;
    }
    worst
}
