//! Batched forward/backward primitives for the classifier network.
//!
//! Convolutions are evaluated as im2col + matrix products. All reductions
//! run in a fixed order (parallel work writes disjoint outputs, sums happen
//! sequentially in sample order), so results are bit-reproducible regardless
//! of thread count.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use rayon::prelude::*;

use super::{ConvParams, ModelParams};

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;
pub const POOL: usize = 2;

/// Which statistics batch normalization uses in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Per-batch statistics (training).
    BatchStats,
    /// Stored running statistics (inference and gradient checks).
    RunningStats,
}

/// Unfolds one `[C, H, W]` sample into a `[C * 9, H * W]` patch matrix for a
/// 3x3 same-padded convolution.
fn im2col(input: ArrayView3<'_, f64>, col: &mut Array2<f64>) {
    let (channels, height, width) = input.dim();
    debug_assert_eq!(col.dim(), (channels * KERNEL * KERNEL, height * width));
    for c in 0..channels {
        let plane = input.index_axis(Axis(0), c);
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row_idx = (c * KERNEL + ky) * KERNEL + kx;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().expect("row is contiguous");
                for y in 0..height {
                    let iy = y + ky;
                    let out_base = y * width;
                    if iy < PAD || iy >= height + PAD {
                        row[out_base..out_base + width].fill(0.0);
                        continue;
                    }
                    let src = plane.row(iy - PAD);
                    let src = src.as_slice().expect("plane row is contiguous");
                    // x runs over outputs; the input column is x + kx - PAD.
                    for x in 0..width {
                        let ix = x + kx;
                        row[out_base + x] = if ix < PAD || ix >= width + PAD {
                            0.0
                        } else {
                            src[ix - PAD]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[C * 9, H * W]` patch-gradient matrix back onto `[C, H, W]`.
fn col2im(col: &Array2<f64>, out: &mut ndarray::ArrayViewMut3<'_, f64>) {
    let (channels, height, width) = out.dim();
    for c in 0..channels {
        let mut plane = out.index_axis_mut(Axis(0), c);
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = col.row((c * KERNEL + ky) * KERNEL + kx);
                let row = row.as_slice().expect("row is contiguous");
                for y in 0..height {
                    let iy = y + ky;
                    if iy < PAD || iy >= height + PAD {
                        continue;
                    }
                    let mut dst = plane.row_mut(iy - PAD);
                    let dst = dst.as_slice_mut().expect("plane row is contiguous");
                    for x in 0..width {
                        let ix = x + kx;
                        if ix >= PAD && ix < width + PAD {
                            dst[ix - PAD] += row[y * width + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 convolution over a batch.
pub fn conv_forward(input: &Array4<f64>, conv: &ConvParams) -> Array4<f64> {
    let (n, in_ch, height, width) = input.dim();
    debug_assert_eq!(in_ch, conv.in_channels);
    let out_ch = conv.weight.nrows();
    let mut output = Array4::<f64>::zeros((n, out_ch, height, width));
    output
        .outer_iter_mut()
        .into_par_iter()
        .zip(input.outer_iter().into_par_iter())
        .for_each(|(mut out, sample)| {
            let mut col = Array2::<f64>::zeros((in_ch * KERNEL * KERNEL, height * width));
            im2col(sample, &mut col);
            let mut prod = conv.weight.dot(&col);
            for (mut row, &b) in prod.rows_mut().into_iter().zip(conv.bias.iter()) {
                row += b;
            }
            out.assign(
                &prod
                    .into_shape_with_order((out_ch, height, width))
                    .expect("shape matches"),
            );
        });
    output
}

/// Gradient of a convolution with respect to its input.
pub fn conv_backward_data(grad_out: &Array4<f64>, conv: &ConvParams, in_shape: (usize, usize, usize)) -> Array4<f64> {
    let (n, out_ch, height, width) = grad_out.dim();
    let (in_ch, in_h, in_w) = in_shape;
    debug_assert_eq!((in_h, in_w), (height, width));
    let weight_t = conv.weight.t().to_owned();
    let mut grad_in = Array4::<f64>::zeros((n, in_ch, in_h, in_w));
    grad_in
        .outer_iter_mut()
        .into_par_iter()
        .zip(grad_out.outer_iter().into_par_iter())
        .for_each(|(mut gin, gout)| {
            let gout_mat = gout
                .to_shape((out_ch, height * width))
                .expect("contiguous view");
            let dcol = weight_t.dot(&gout_mat);
            col2im(&dcol, &mut gin);
        });
    grad_in
}

/// Gradients of a convolution with respect to its weight and bias.
///
/// Per-sample contributions are computed in parallel and reduced in sample
/// order.
pub fn conv_backward_params(
    grad_out: &Array4<f64>,
    input: &Array4<f64>,
    conv: &ConvParams,
) -> (Array2<f64>, Array1<f64>) {
    let (_, out_ch, height, width) = grad_out.dim();
    let in_ch = conv.in_channels;
    let partials: Vec<(Array2<f64>, Array1<f64>)> = grad_out
        .outer_iter()
        .into_par_iter()
        .zip(input.outer_iter().into_par_iter())
        .map(|(gout, sample)| {
            let mut col = Array2::<f64>::zeros((in_ch * KERNEL * KERNEL, height * width));
            im2col(sample, &mut col);
            let gout_mat = gout
                .to_shape((out_ch, height * width))
                .expect("contiguous view");
            let dw = gout_mat.dot(&col.t());
            let db = gout_mat.sum_axis(Axis(1));
            (dw, db)
        })
        .collect();
    let mut dw = Array2::<f64>::zeros(conv.weight.dim());
    let mut db = Array1::<f64>::zeros(conv.bias.len());
    for (pdw, pdb) in partials {
        dw += &pdw;
        db += &pdb;
    }
    (dw, db)
}

/// Per-channel normalization state cached by a batch-norm forward pass.
pub struct BnCache {
    /// Normalized activations (before scale and shift).
    pub xhat: Array4<f64>,
    /// 1 / sqrt(var + eps) for the statistics actually used.
    pub inv_std: Array1<f64>,
    pub mode: BnMode,
}

/// Batch normalization forward. In `BatchStats` mode the per-batch channel
/// statistics are returned so the caller can fold them into the running
/// averages.
pub fn bn_forward(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    stats: (&Array1<f64>, &Array1<f64>),
    epsilon: f64,
    mode: BnMode,
) -> (Array4<f64>, BnCache, Option<(Array1<f64>, Array1<f64>)>) {
    let (n, channels, height, width) = x.dim();
    let m = (n * height * width) as f64;

    let (mean, var) = match mode {
        BnMode::RunningStats => (stats.0.clone(), stats.1.clone()),
        BnMode::BatchStats => {
            let mut mean = Array1::<f64>::zeros(channels);
            let mut var = Array1::<f64>::zeros(channels);
            for c in 0..channels {
                let slice = x.slice(s![.., c, .., ..]);
                let mu = slice.sum() / m;
                let v = slice.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m;
                mean[c] = mu;
                var[c] = v;
            }
            (mean, var)
        }
    };

    let inv_std = var.mapv(|v| 1.0 / (v + epsilon).sqrt());
    let mut xhat = x.clone();
    let mut y = Array4::<f64>::zeros(x.dim());
    for c in 0..channels {
        let mu = mean[c];
        let is = inv_std[c];
        let (g, b) = (gamma[c], beta[c]);
        let mut xh = xhat.slice_mut(s![.., c, .., ..]);
        xh.mapv_inplace(|e| (e - mu) * is);
        y.slice_mut(s![.., c, .., ..]).assign(&xh.mapv(|e| g * e + b));
    }

    let batch_stats = match mode {
        BnMode::BatchStats => Some((mean, var)),
        BnMode::RunningStats => None,
    };
    (y, BnCache { xhat, inv_std, mode }, batch_stats)
}

/// Batch normalization backward; returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(
    grad_out: &Array4<f64>,
    cache: &BnCache,
    gamma: &Array1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, channels, height, width) = grad_out.dim();
    let m = (n * height * width) as f64;
    let mut dx = Array4::<f64>::zeros(grad_out.dim());
    let mut dgamma = Array1::<f64>::zeros(channels);
    let mut dbeta = Array1::<f64>::zeros(channels);

    for c in 0..channels {
        let dy = grad_out.slice(s![.., c, .., ..]);
        let xh = cache.xhat.slice(s![.., c, .., ..]);
        let sum_dy = dy.sum();
        let sum_dy_xhat = dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>();
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;

        let g = gamma[c];
        let is = cache.inv_std[c];
        let mut dxc = dx.slice_mut(s![.., c, .., ..]);
        match cache.mode {
            BnMode::BatchStats => {
                // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
                let scale = g * is / m;
                ndarray::Zip::from(&mut dxc).and(&dy).and(&xh).for_each(
                    |d, &dyv, &xhv| {
                        *d = scale * (m * dyv - sum_dy - xhv * sum_dy_xhat);
                    },
                );
            }
            BnMode::RunningStats => {
                // Statistics are constants; the layer is a per-channel affine map.
                let scale = g * is;
                ndarray::Zip::from(&mut dxc).and(&dy).for_each(|d, &dyv| {
                    *d = scale * dyv;
                });
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// ReLU backward using the cached activation output as the mask.
pub fn relu_backward_inplace(grad: &mut Array4<f64>, activated: &Array4<f64>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2x2 max pooling with stride 2; returns the pooled batch and the argmax
/// index (0..4, row-major within the window) for the backward scatter.
pub fn maxpool_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (n, channels, height, width) = x.dim();
    let (oh, ow) = (height / POOL, width / POOL);
    let mut y = Array4::<f64>::zeros((n, channels, oh, ow));
    let mut idx = Array4::<u8>::zeros((n, channels, oh, ow));
    for b in 0..n {
        for c in 0..channels {
            let plane = x.slice(s![b, c, .., ..]);
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for dy in 0..POOL {
                        for dx in 0..POOL {
                            let v = plane[(py * POOL + dy, px * POOL + dx)];
                            if v > best {
                                best = v;
                                best_k = (dy * POOL + dx) as u8;
                            }
                        }
                    }
                    y[(b, c, py, px)] = best;
                    idx[(b, c, py, px)] = best_k;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward(
    grad_out: &Array4<f64>,
    idx: &Array4<u8>,
    in_shape: (usize, usize),
) -> Array4<f64> {
    let (n, channels, oh, ow) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((n, channels, in_shape.0, in_shape.1));
    for b in 0..n {
        for c in 0..channels {
            for py in 0..oh {
                for px in 0..ow {
                    let k = idx[(b, c, py, px)] as usize;
                    let (dy, dxo) = (k / POOL, k % POOL);
                    dx[(b, c, py * POOL + dy, px * POOL + dxo)] += grad_out[(b, c, py, px)];
                }
            }
        }
    }
    dx
}

/// Global average pooling: each channel collapses to its spatial mean.
pub fn gap_forward(x: &Array4<f64>) -> Array2<f64> {
    let (n, channels, height, width) = x.dim();
    let m = (height * width) as f64;
    let mut y = Array2::<f64>::zeros((n, channels));
    for b in 0..n {
        for c in 0..channels {
            y[(b, c)] = x.slice(s![b, c, .., ..]).sum() / m;
        }
    }
    y
}

pub fn gap_backward(grad_out: &Array2<f64>, spatial: (usize, usize)) -> Array4<f64> {
    let (n, channels) = grad_out.dim();
    let m = (spatial.0 * spatial.1) as f64;
    let mut dx = Array4::<f64>::zeros((n, channels, spatial.0, spatial.1));
    for b in 0..n {
        for c in 0..channels {
            dx.slice_mut(s![b, c, .., ..]).fill(grad_out[(b, c)] / m);
        }
    }
    dx
}

/// Fully connected layer: `y = x . w^T + b` over a batch.
pub fn dense_forward(x: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    y += bias;
    y
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward(
    grad_out: &Array2<f64>,
    x: &Array2<f64>,
    weight: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = grad_out.dot(weight);
    let dw = grad_out.t().dot(x);
    let db = grad_out.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean categorical cross-entropy and its gradient with respect to the
/// logits: `(probs - onehot) / batch`.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len();
    debug_assert_eq!(probs.nrows(), n);
    let mut dlogits = probs.clone();
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        loss -= probs[(b, label)].max(1e-300).ln();
        dlogits[(b, label)] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n as f64);
    (loss / n as f64, dlogits)
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    pub input: Array4<f64>,
    pub bn: [BnCache; 4],
    /// Post-ReLU activations after each convolution block entry.
    pub relu: [Array4<f64>; 4],
    pub pool1: Array4<f64>,
    pub pool1_idx: Array4<u8>,
    pub pool2_idx: Array4<u8>,
    pub pooled2_shape: (usize, usize),
    pub gap: Array2<f64>,
    pub hidden: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Gradients for every trainable tensor, in the same order as
/// [`ModelParams::trainable_tensors`].
pub struct Gradients {
    pub conv_w: [Array2<f64>; 4],
    pub conv_b: [Array1<f64>; 4],
    pub bn_gamma: [Array1<f64>; 4],
    pub bn_beta: [Array1<f64>; 4],
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

impl Gradients {
    /// Flat views in canonical trainable-tensor order.
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(20);
        for i in 0..4 {
            out.push(self.conv_w[i].as_slice().expect("standard layout"));
            out.push(self.conv_b[i].as_slice().expect("standard layout"));
            out.push(self.bn_gamma[i].as_slice().expect("standard layout"));
            out.push(self.bn_beta[i].as_slice().expect("standard layout"));
        }
        out.push(self.fc1_w.as_slice().expect("standard layout"));
        out.push(self.fc1_b.as_slice().expect("standard layout"));
        out.push(self.fc2_w.as_slice().expect("standard layout"));
        out.push(self.fc2_b.as_slice().expect("standard layout"));
        out
    }
}

/// Per-layer batch statistics produced by a `BatchStats` forward pass; the
/// trainer folds them into the running averages.
pub type BatchStats = [Option<(Array1<f64>, Array1<f64>)>; 4];

/// Full network forward pass over a batch of `[N, 1, 32, 32]` inputs.
pub fn forward_batch(
    params: &ModelParams,
    input: &Array4<f64>,
    mode: BnMode,
) -> (Array2<f64>, ForwardCache, BatchStats) {
    let epsilon = params.config().bn_epsilon;

    let mut bn_caches: Vec<BnCache> = Vec::with_capacity(4);
    let mut relu_acts: Vec<Array4<f64>> = Vec::with_capacity(4);
    let mut collected_stats: BatchStats = [None, None, None, None];

    let mut current = input.clone();
    let mut pool1 = None;
    let mut pool1_idx = None;
    let mut pool2_idx = None;
    let mut pooled2_shape = (0, 0);
    for layer in 0..4 {
        let conv_out = conv_forward(&current, &params.conv[layer]);
        let (mut y, cache, batch_stats) = bn_forward(
            &conv_out,
            &params.bn[layer].gamma,
            &params.bn[layer].beta,
            (
                &params.bn[layer].running_mean,
                &params.bn[layer].running_var,
            ),
            epsilon,
            mode,
        );
        collected_stats[layer] = batch_stats;
        relu_inplace(&mut y);
        bn_caches.push(cache);

        if layer == 1 {
            let (pooled, idx) = maxpool_forward(&y);
            relu_acts.push(y);
            pool1 = Some(pooled.clone());
            pool1_idx = Some(idx);
            current = pooled;
        } else if layer == 3 {
            let (pooled, idx) = maxpool_forward(&y);
            relu_acts.push(y);
            pooled2_shape = (pooled.dim().2, pooled.dim().3);
            pool2_idx = Some(idx);
            current = pooled;
        } else {
            current = y.clone();
            relu_acts.push(y);
        }
    }

    let gap = gap_forward(&current);
    let mut hidden = dense_forward(&gap, &params.fc1.weight, &params.fc1.bias);
    hidden.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    let logits = dense_forward(&hidden, &params.fc2.weight, &params.fc2.bias);
    let probs = softmax_rows(&logits);

    let cache = ForwardCache {
        input: input.clone(),
        bn: bn_caches.try_into().ok().expect("four layers"),
        relu: relu_acts.try_into().ok().expect("four layers"),
        pool1: pool1.expect("first pool ran"),
        pool1_idx: pool1_idx.expect("first pool ran"),
        pool2_idx: pool2_idx.expect("second pool ran"),
        pooled2_shape,
        gap,
        hidden,
        probs: probs.clone(),
    };
    (probs, cache, collected_stats)
}

/// Backward pass matching [`forward_batch`]; `dlogits` is the loss gradient
/// at the logits.
pub fn backward_batch(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> Gradients {
    let (dhidden, fc2_w, fc2_b) = dense_backward(dlogits, &cache.hidden, &params.fc2.weight);
    let mut dhidden = dhidden;
    ndarray::Zip::from(&mut dhidden)
        .and(&cache.hidden)
        .for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
    let (dgap, fc1_w, fc1_b) = dense_backward(&dhidden, &cache.gap, &params.fc1.weight);

    let mut grad = gap_backward(&dgap, cache.pooled2_shape);
    let pool2_in_shape = (cache.pooled2_shape.0 * POOL, cache.pooled2_shape.1 * POOL);
    grad = maxpool_backward(&grad, &cache.pool2_idx, pool2_in_shape);

    let mut conv_w: [Option<Array2<f64>>; 4] = [None, None, None, None];
    let mut conv_b: [Option<Array1<f64>>; 4] = [None, None, None, None];
    let mut bn_gamma: [Option<Array1<f64>>; 4] = [None, None, None, None];
    let mut bn_beta: [Option<Array1<f64>>; 4] = [None, None, None, None];

    for layer in (0..4).rev() {
        relu_backward_inplace(&mut grad, &cache.relu[layer]);
        let (dconv, dgamma, dbeta) = bn_backward(&grad, &cache.bn[layer], &params.bn[layer].gamma);
        bn_gamma[layer] = Some(dgamma);
        bn_beta[layer] = Some(dbeta);

        let conv_input: &Array4<f64> = match layer {
            0 => &cache.input,
            1 => &cache.relu[0],
            2 => &cache.pool1,
            3 => &cache.relu[2],
            _ => unreachable!(),
        };
        let (dw, db) = conv_backward_params(&dconv, conv_input, &params.conv[layer]);
        conv_w[layer] = Some(dw);
        conv_b[layer] = Some(db);

        if layer > 0 {
            let in_shape = (
                conv_input.dim().1,
                conv_input.dim().2,
                conv_input.dim().3,
            );
            grad = conv_backward_data(&dconv, &params.conv[layer], in_shape);
            if layer == 2 {
                // Cross the first pooling boundary back into block one.
                let in_spatial = (cache.relu[1].dim().2, cache.relu[1].dim().3);
                grad = maxpool_backward(&grad, &cache.pool1_idx, in_spatial);
            }
        }
    }

    Gradients {
        conv_w: conv_w.map(|g| g.expect("all layers visited")),
        conv_b: conv_b.map(|g| g.expect("all layers visited")),
        bn_gamma: bn_gamma.map(|g| g.expect("all layers visited")),
        bn_beta: bn_beta.map(|g| g.expect("all layers visited")),
        fc1_w,
        fc1_b,
        fc2_w,
        fc2_b,
    }
}
