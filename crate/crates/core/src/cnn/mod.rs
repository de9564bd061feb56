//! The convolutional photon-state classifier.
//!
//! Architecture: two blocks of (conv 3x3 x64, batch-norm, ReLU) x2 followed
//! by 2x2 max pooling, then global average pooling and a two-layer dense
//! head with a 4-way softmax. Spatial trace:
//! 32x32x1 -> 32x32x64 -> 16x16x64 -> 8x8x64 -> 64 -> 512 -> 4.

pub mod layers;
mod train;

pub use train::{accuracy, gradient_check, train, EpochRecord, Hyper, StepRecord, TrainHistory};

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::correlator::{preprocess, CorrelationMap, FeatureMatrix, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::PhotonClass;
use layers::{backward_batch, forward_batch, BnMode, Gradients};

const WEIGHTS_MAGIC: &[u8; 4] = b"FLNN";
const WEIGHTS_VERSION: u16 = 1;

/// Hyperstructure of the network. All sizes are fixed by the architecture
/// except the dense hidden width, which is chosen to land the trainable
/// parameter count near 150k.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Momentum of the running batch-norm statistics. The stored averages
    /// are bias-corrected, so short trainings still produce usable
    /// inference statistics.
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: FEATURE_DIM,
            conv_channels: 64,
            hidden: 512,
            num_classes: 4,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

impl ModelConfig {
    fn canonical(&self) -> String {
        format!(
            "input={};channels={};hidden={};classes={};bn_momentum={};bn_epsilon={}",
            self.input_dim,
            self.conv_channels,
            self.hidden,
            self.num_classes,
            self.bn_momentum,
            self.bn_epsilon
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Output shape after each named stage, `[h, w, depth]` for spatial
    /// stages and `[len]` for vector stages.
    pub fn shape_trace(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.input_dim;
        let c = self.conv_channels;
        vec![
            ("input", vec![d, d, 1]),
            ("conv1", vec![d, d, c]),
            ("conv2", vec![d, d, c]),
            ("maxpool1", vec![d / 2, d / 2, c]),
            ("conv3", vec![d / 2, d / 2, c]),
            ("conv4", vec![d / 2, d / 2, c]),
            ("maxpool2", vec![d / 4, d / 4, c]),
            ("global_avg_pool", vec![c]),
            ("dense1", vec![self.hidden]),
            ("dense2", vec![self.num_classes]),
        ]
    }

    /// Names and shapes of every persisted tensor, in file order.
    fn tensor_schema(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.conv_channels;
        let k2 = layers::KERNEL * layers::KERNEL;
        let in_channels = [1, c, c, c];
        let mut v = Vec::with_capacity(28);
        for i in 0..4 {
            v.push((format!("conv{}.weight", i + 1), vec![c, in_channels[i] * k2]));
            v.push((format!("conv{}.bias", i + 1), vec![c]));
            v.push((format!("bn{}.gamma", i + 1), vec![c]));
            v.push((format!("bn{}.beta", i + 1), vec![c]));
            v.push((format!("bn{}.running_mean", i + 1), vec![c]));
            v.push((format!("bn{}.running_var", i + 1), vec![c]));
        }
        v.push(("fc1.weight".into(), vec![self.hidden, c]));
        v.push(("fc1.bias".into(), vec![self.hidden]));
        v.push(("fc2.weight".into(), vec![self.num_classes, self.hidden]));
        v.push(("fc2.bias".into(), vec![self.num_classes]));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[out_channels, in_channels * 9]`, row per kernel.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// Bias-corrected running channel means (starts at 0).
    pub running_mean: Array1<f64>,
    /// Bias-corrected running channel variances (starts at 1).
    pub running_var: Array1<f64>,
    pub updates: u64,
}

impl BnParams {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            updates: 0,
        }
    }

    /// Folds a batch's statistics into the running averages. With the
    /// bias-correcting weight `a_t = (1 - m) / (1 - m^t)` the stored value
    /// is an exact weighted mean of the batches seen so far and converges
    /// to a plain exponential moving average as `t` grows.
    pub fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>, momentum: f64) {
        self.updates += 1;
        let denom = 1.0 - momentum.powf(self.updates as f64);
        let alpha = if denom > 0.0 {
            (1.0 - momentum) / denom
        } else {
            1.0
        };
        self.running_mean = &self.running_mean * (1.0 - alpha) + &(mean * alpha);
        self.running_var = &self.running_var * (1.0 - alpha) + &(var * alpha);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out, in]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All weights of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub conv: [ConvParams; 4],
    pub bn: [BnParams; 4],
    pub fc1: DenseParams,
    pub fc2: DenseParams,
}

/// Softmax confidence over the four photon classes, indexed per
/// [`PhotonClass::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores(pub [f64; 4]);

impl ClassScores {
    /// Highest-scoring class; ties break toward the lower class index.
    pub fn argmax(&self) -> PhotonClass {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        PhotonClass::from_index(best).expect("index in range")
    }
}

fn scaled_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl ModelParams {
    /// Fresh parameters: kernels from a fan-in-scaled uniform distribution,
    /// zero biases, identity batch norm. Deterministic given the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.conv_channels;
        let k2 = layers::KERNEL * layers::KERNEL;

        let conv = [1usize, c, c, c].map(|in_ch| {
            let fan_in = in_ch * k2;
            let fan_out = c * k2;
            ConvParams {
                weight: scaled_uniform(&mut rng, c, in_ch * k2, fan_in, fan_out),
                bias: Array1::zeros(c),
                in_channels: in_ch,
            }
        });
        let bn = [0; 4].map(|_| BnParams::new(c));
        let fc1 = DenseParams {
            weight: scaled_uniform(&mut rng, config.hidden, c, c, config.hidden),
            bias: Array1::zeros(config.hidden),
        };
        let fc2 = DenseParams {
            weight: scaled_uniform(&mut rng, config.num_classes, config.hidden, config.hidden, config.num_classes),
            bias: Array1::zeros(config.num_classes),
        };
        ModelParams {
            config: config.clone(),
            conv,
            bn,
            fc1,
            fc2,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for i in 0..4 {
            n += self.conv[i].weight.len() + self.conv[i].bias.len();
            n += self.bn[i].gamma.len() + self.bn[i].beta.len();
        }
        n + self.fc1.weight.len()
            + self.fc1.bias.len()
            + self.fc2.weight.len()
            + self.fc2.bias.len()
    }

    /// Visits the trainable tensors as mutable flat slices, in the same
    /// canonical order as [`layers::Gradients::flat`].
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut idx = 0;
        let mut visit = |slice: &mut [f64], idx: &mut usize| {
            f(*idx, slice);
            *idx += 1;
        };
        for i in 0..4 {
            visit(self.conv[i].weight.as_slice_mut().expect("standard layout"), &mut idx);
            visit(self.conv[i].bias.as_slice_mut().expect("standard layout"), &mut idx);
            visit(self.bn[i].gamma.as_slice_mut().expect("standard layout"), &mut idx);
            visit(self.bn[i].beta.as_slice_mut().expect("standard layout"), &mut idx);
        }
        visit(self.fc1.weight.as_slice_mut().expect("standard layout"), &mut idx);
        visit(self.fc1.bias.as_slice_mut().expect("standard layout"), &mut idx);
        visit(self.fc2.weight.as_slice_mut().expect("standard layout"), &mut idx);
        visit(self.fc2.bias.as_slice_mut().expect("standard layout"), &mut idx);
    }

    /// Flat lengths of the trainable tensors, in canonical order.
    pub fn trainable_shapes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(20);
        for i in 0..4 {
            out.push(self.conv[i].weight.len());
            out.push(self.conv[i].bias.len());
            out.push(self.bn[i].gamma.len());
            out.push(self.bn[i].beta.len());
        }
        out.push(self.fc1.weight.len());
        out.push(self.fc1.bias.len());
        out.push(self.fc2.weight.len());
        out.push(self.fc2.bias.len());
        out
    }

    /// Forward pass for one feature matrix. With `training` set, the
    /// normalization layers use the statistics of the given sample itself;
    /// inference mode uses the stored running statistics. Neither path
    /// mutates the model.
    pub fn forward(&self, features: &FeatureMatrix, training: bool) -> ClassScores {
        let input = features_to_batch(&[features]);
        let mode = if training {
            BnMode::BatchStats
        } else {
            BnMode::RunningStats
        };
        let (probs, _, _) = forward_batch(self, &input, mode);
        scores_from_row(&probs, 0)
    }

    /// Batched inference probabilities, one row per feature matrix.
    pub fn infer_batch(&self, features: &[&FeatureMatrix]) -> Array2<f64> {
        let input = features_to_batch(features);
        let (probs, _, _) = forward_batch(self, &input, BnMode::RunningStats);
        probs
    }

    /// Classifies a correlation map: preprocess, inference forward, argmax.
    pub fn predict(&self, map: &CorrelationMap) -> Result<(PhotonClass, ClassScores)> {
        if !map.valid() {
            return Err(Error::InvalidInput(
                "cannot classify a degenerate correlation map".into(),
            ));
        }
        let features = preprocess(map)?;
        let scores = self.forward(&features, false);
        Ok((scores.argmax(), scores))
    }

    /// One loss evaluation with gradients over a batch; `mode` selects the
    /// batch-norm statistics (the trainer uses `BatchStats` and folds the
    /// returned per-layer statistics into the running averages).
    pub fn loss_and_gradients(
        &self,
        input: &Array4<f64>,
        labels: &[usize],
        mode: BnMode,
    ) -> (f64, Gradients, layers::BatchStats) {
        let (probs, cache, stats) = forward_batch(self, input, mode);
        let (loss, dlogits) = layers::cross_entropy(&probs, labels);
        let grads = backward_batch(self, &cache, &dlogits);
        (loss, grads, stats)
    }

    fn tensor_data(&self, name: &str) -> &[f64] {
        fn arr1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn arr2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        match name {
            "conv1.weight" => arr2(&self.conv[0].weight),
            "conv1.bias" => arr1(&self.conv[0].bias),
            "conv2.weight" => arr2(&self.conv[1].weight),
            "conv2.bias" => arr1(&self.conv[1].bias),
            "conv3.weight" => arr2(&self.conv[2].weight),
            "conv3.bias" => arr1(&self.conv[2].bias),
            "conv4.weight" => arr2(&self.conv[3].weight),
            "conv4.bias" => arr1(&self.conv[3].bias),
            "bn1.gamma" => arr1(&self.bn[0].gamma),
            "bn1.beta" => arr1(&self.bn[0].beta),
            "bn1.running_mean" => arr1(&self.bn[0].running_mean),
            "bn1.running_var" => arr1(&self.bn[0].running_var),
            "bn2.gamma" => arr1(&self.bn[1].gamma),
            "bn2.beta" => arr1(&self.bn[1].beta),
            "bn2.running_mean" => arr1(&self.bn[1].running_mean),
            "bn2.running_var" => arr1(&self.bn[1].running_var),
            "bn3.gamma" => arr1(&self.bn[2].gamma),
            "bn3.beta" => arr1(&self.bn[2].beta),
            "bn3.running_mean" => arr1(&self.bn[2].running_mean),
            "bn3.running_var" => arr1(&self.bn[2].running_var),
            "bn4.gamma" => arr1(&self.bn[3].gamma),
            "bn4.beta" => arr1(&self.bn[3].beta),
            "bn4.running_mean" => arr1(&self.bn[3].running_mean),
            "bn4.running_var" => arr1(&self.bn[3].running_var),
            "fc1.weight" => arr2(&self.fc1.weight),
            "fc1.bias" => arr1(&self.fc1.bias),
            "fc2.weight" => arr2(&self.fc2.weight),
            "fc2.bias" => arr1(&self.fc2.bias),
            _ => unreachable!("unknown tensor name {name}"),
        }
    }

    fn tensor_data_mut(&mut self, name: &str) -> &mut [f64] {
        fn arr1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn arr2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        match name {
            "conv1.weight" => arr2(&mut self.conv[0].weight),
            "conv1.bias" => arr1(&mut self.conv[0].bias),
            "conv2.weight" => arr2(&mut self.conv[1].weight),
            "conv2.bias" => arr1(&mut self.conv[1].bias),
            "conv3.weight" => arr2(&mut self.conv[2].weight),
            "conv3.bias" => arr1(&mut self.conv[2].bias),
            "conv4.weight" => arr2(&mut self.conv[3].weight),
            "conv4.bias" => arr1(&mut self.conv[3].bias),
            "bn1.gamma" => arr1(&mut self.bn[0].gamma),
            "bn1.beta" => arr1(&mut self.bn[0].beta),
            "bn1.running_mean" => arr1(&mut self.bn[0].running_mean),
            "bn1.running_var" => arr1(&mut self.bn[0].running_var),
            "bn2.gamma" => arr1(&mut self.bn[1].gamma),
            "bn2.beta" => arr1(&mut self.bn[1].beta),
            "bn2.running_mean" => arr1(&mut self.bn[1].running_mean),
            "bn2.running_var" => arr1(&mut self.bn[1].running_var),
            "bn3.gamma" => arr1(&mut self.bn[2].gamma),
            "bn3.beta" => arr1(&mut self.bn[2].beta),
            "bn3.running_mean" => arr1(&mut self.bn[2].running_mean),
            "bn3.running_var" => arr1(&mut self.bn[2].running_var),
            "bn4.gamma" => arr1(&mut self.bn[3].gamma),
            "bn4.beta" => arr1(&mut self.bn[3].beta),
            "bn4.running_mean" => arr1(&mut self.bn[3].running_mean),
            "bn4.running_var" => arr1(&mut self.bn[3].running_var),
            "fc1.weight" => arr2(&mut self.fc1.weight),
            "fc1.bias" => arr1(&mut self.fc1.bias),
            "fc2.weight" => arr2(&mut self.fc2.weight),
            "fc2.bias" => arr1(&mut self.fc2.bias),
            _ => unreachable!("unknown tensor name {name}"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(WEIGHTS_MAGIC).map_err(io_err)?;
        w.write_u16::<LittleEndian>(WEIGHTS_VERSION).map_err(io_err)?;
        w.write_all(&self.config.digest()).map_err(io_err)?;
        for (name, dims) in self.config.tensor_schema() {
            let data = self.tensor_data(&name);
            debug_assert_eq!(data.len(), dims.iter().product::<usize>());
            w.write_u16::<LittleEndian>(name.len() as u16).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_u8(dims.len() as u8).map_err(io_err)?;
            for &d in &dims {
                w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
            }
            for &v in data {
                w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Loads weights saved by [`ModelParams::save`]. The stored config
    /// digest must match `config`. Values are stored in single precision,
    /// so a load/save cycle is lossless.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt =
            |reason: String| Error::format(path, format!("corrupt weights file: {reason}"));

        struct Cursor<'a> {
            bytes: &'a [u8],
            off: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Option<&'a [u8]> {
                let s = self.bytes.get(self.off..self.off + n)?;
                self.off += n;
                Some(s)
            }
            fn remaining(&self) -> usize {
                self.bytes.len() - self.off
            }
        }
        let mut cur = Cursor {
            bytes: &bytes,
            off: 0,
        };
        let eof = || corrupt("unexpected end of file".into());

        if cur.take(4).ok_or_else(eof)? != WEIGHTS_MAGIC {
            return Err(Error::format(path, "not a weights file"));
        }
        let version = u16::from_le_bytes(cur.take(2).ok_or_else(eof)?.try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported weights version {version}"),
            ));
        }
        let digest: [u8; 32] = cur.take(32).ok_or_else(eof)?.try_into().unwrap();
        if digest != config.digest() {
            return Err(Error::ConfigMismatch {
                path: path.into(),
                reason: "stored config digest differs from the requested configuration".into(),
            });
        }

        let mut tensors = std::collections::BTreeMap::<String, (Vec<usize>, Vec<f64>)>::new();
        while cur.remaining() > 0 {
            let name_len =
                u16::from_le_bytes(cur.take(2).ok_or_else(eof)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(eof)?)
                .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.take(1).ok_or_else(eof)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    u32::from_le_bytes(cur.take(4).ok_or_else(eof)?.try_into().unwrap()) as usize,
                );
            }
            let len: usize = dims.iter().product();
            let raw = cur.take(len * 4).ok_or_else(eof)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }

        let mut params = ModelParams::init(config, 0);
        for (name, expected_dims) in config.tensor_schema() {
            let (dims, data) = tensors
                .remove(&name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if dims != expected_dims {
                return Err(Error::ConfigMismatch {
                    path: path.into(),
                    reason: format!(
                        "tensor {name} has shape {dims:?}, expected {expected_dims:?}"
                    ),
                });
            }
            params.tensor_data_mut(&name).copy_from_slice(&data);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
        // Loaded running statistics are final values; any further updates
        // continue as a plain moving average.
        for bn in &mut params.bn {
            bn.updates = 1 << 32;
        }
        Ok(params)
    }
}

/// Stacks feature matrices into an `[N, 1, d, d]` input batch.
pub fn features_to_batch(features: &[&FeatureMatrix]) -> Array4<f64> {
    let n = features.len();
    let mut out = Array4::<f64>::zeros((n, 1, FEATURE_DIM, FEATURE_DIM));
    for (b, f) in features.iter().enumerate() {
        for ((r, c), &v) in f.values().indexed_iter() {
            out[(b, 0, r, c)] = v as f64;
        }
    }
    out
}

fn scores_from_row(probs: &Array2<f64>, row: usize) -> ClassScores {
    let mut out = [0.0; 4];
    for (i, v) in probs.row(row).iter().enumerate().take(4) {
        out[i] = *v;
    }
    ClassScores(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2 as A2;

    fn random_features(seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(A2::from_shape_fn((FEATURE_DIM, FEATURE_DIM), |_| {
            rng.random_range(0.0f32..1.0)
        }))
    }

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig::default();
        let a = ModelParams::init(&config, 5);
        let b = ModelParams::init(&config, 5);
        assert_eq!(a, b);
        let c = ModelParams::init(&config, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let params = ModelParams::init(&ModelConfig::default(), 1);
        // Independent count from the layer shapes: four 3x3 convolutions
        // (1->64, then 64->64 three times), scale/shift pairs for four
        // batch-norm layers, and the dense head 64 -> 512 -> 4.
        let conv = (64 * 9 + 64) + 3 * (64 * 64 * 9 + 64);
        let bn = 4 * 2 * 64;
        let head = (512 * 64 + 512) + (4 * 512 + 4);
        assert_eq!(conv, 640 + 3 * 36_928);
        assert_eq!(params.parameter_count(), conv + bn + head);
        assert!(params.parameter_count() > 140_000);
    }

    #[test]
    fn shape_trace_matches_architecture() {
        let trace = ModelConfig::default().shape_trace();
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("input", vec![32, 32, 1]),
            ("conv1", vec![32, 32, 64]),
            ("conv2", vec![32, 32, 64]),
            ("maxpool1", vec![16, 16, 64]),
            ("conv3", vec![16, 16, 64]),
            ("conv4", vec![16, 16, 64]),
            ("maxpool2", vec![8, 8, 64]),
            ("global_avg_pool", vec![64]),
            ("dense1", vec![512]),
            ("dense2", vec![4]),
        ];
        assert_eq!(trace, expected);
    }

    #[test]
    fn forward_is_normalized_and_deterministic() {
        let params = ModelParams::init(&ModelConfig::default(), 2);
        let f = random_features(3);
        let a = params.forward(&f, false);
        let b = params.forward(&f, false);
        assert_eq!(a, b);
        assert!((a.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(a.0.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn forward_handles_zero_input() {
        let params = ModelParams::init(&ModelConfig::default(), 2);
        let f = FeatureMatrix::new(A2::zeros((FEATURE_DIM, FEATURE_DIM)));
        let scores = params.forward(&f, false);
        assert!(scores.0.iter().all(|p| p.is_finite()));
        assert!((scores.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(
            ClassScores([0.1, 0.2, 0.6, 0.1]).argmax(),
            PhotonClass::Fock2
        );
        assert_eq!(
            ClassScores([0.25, 0.25, 0.25, 0.25]).argmax(),
            PhotonClass::Coherent
        );
    }

    #[test]
    fn save_load_round_trip_is_stable() {
        let config = ModelConfig::default();
        let trained = ModelParams::init(&config, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.flnn");

        trained.save(&path).unwrap();
        let loaded = ModelParams::load(&path, &config).unwrap();

        // Values are quantized to f32 once; a second round trip is lossless
        // and inference outputs match to the bit.
        let path2 = dir.path().join("weights2.flnn");
        loaded.save(&path2).unwrap();
        let reloaded = ModelParams::load(&path2, &config).unwrap();
        let f = random_features(11);
        assert_eq!(loaded.forward(&f, false), reloaded.forward(&f, false));
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn load_rejects_truncation_and_config_mismatch() {
        let config = ModelConfig::default();
        let params = ModelParams::init(&config, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.flnn");
        params.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated_path = dir.path().join("truncated.flnn");
        std::fs::write(&truncated_path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            ModelParams::load(&truncated_path, &config),
            Err(Error::Format { .. })
        ));

        let other = ModelConfig {
            hidden: 256,
            ..ModelConfig::default()
        };
        assert!(matches!(
            ModelParams::load(&path, &other),
            Err(Error::ConfigMismatch { .. })
        ));
    }
}
