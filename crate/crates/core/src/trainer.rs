//! Mini-batch training on sparse categorical cross-entropy, and evaluation.
//!
//! The float path runs entirely in f64. Batch work is chunked through
//! [`crate::par`] with a fixed chunk count and partial gradients folded in
//! chunk order, so results are bit-identical whatever the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{reshape_grid, FeatureMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, ConvLayer, DenseLayer, InputShape, Layer, Network, Shape};
use crate::par;

pub const LOG_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassWeights {
    /// Both classes weigh 1.
    Unit,
    /// Weights inversely proportional to class frequency in the training split.
    Balanced,
    /// Explicit (benign, malicious) weights.
    Fixed(f64, f64),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0.0 gives plain SGD.
    pub momentum: f64,
    pub class_weights: ClassWeights,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.01,
            momentum: 0.9,
            class_weights: ClassWeights::Balanced,
            seed: 42,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if let ClassWeights::Fixed(a, b) = self.class_weights {
            if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
                return Err(Error::InvalidParam("class weights must be positive".into()));
            }
        }
        Ok(())
    }

    fn resolve_weights(&self, labels: &[u8]) -> (f64, f64) {
        match self.class_weights {
            ClassWeights::Unit => (1.0, 1.0),
            ClassWeights::Fixed(a, b) => (a, b),
            ClassWeights::Balanced => {
                let n1 = labels.iter().filter(|&&l| l == 1).count();
                let n0 = labels.len() - n1;
                if n0 == 0 || n1 == 0 {
                    (1.0, 1.0)
                } else {
                    let n = labels.len() as f64;
                    (n / (2.0 * n0 as f64), n / (2.0 * n1 as f64))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// confusion[true][predicted]
    pub confusion: [[usize; 2]; 2],
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub macro_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Per-layer parameter gradients, aligned with `Network::layers`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Gradients {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => LayerGrad {
                        weights: vec![0.0; d.weights.len()],
                        bias: vec![0.0; d.bias.len()],
                    },
                    Layer::Conv2d(c) => LayerGrad {
                        weights: vec![0.0; c.weights.len()],
                        bias: vec![0.0; c.bias.len()],
                    },
                    _ => LayerGrad::default(),
                })
                .collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn dense_forward(layer: &DenseLayer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for o in 0..layer.out_width {
        let w = &layer.weights[o * layer.in_width..(o + 1) * layer.in_width];
        let mut acc = layer.bias[o];
        for (wi, xi) in w.iter().zip(input) {
            acc += wi * xi;
        }
        out.push(acc);
    }
    match layer.activation {
        Activation::Relu => {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let probs = softmax(out);
            out.copy_from_slice(&probs);
        }
    }
}

fn pad_before(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Same-padding stride-1 convolution with ReLU. Activations are `[h][w][c]`.
fn conv_forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize, out: &mut Vec<f64>) {
    let k = layer.kernel;
    let ci = layer.in_channels;
    let co = layer.out_channels;
    let pb = pad_before(k);
    out.clear();
    out.resize(h * w * co, 0.0);
    for y in 0..h {
        for x in 0..w {
            let cell = (y * w + x) * co;
            for oc in 0..co {
                let mut acc = layer.bias[oc];
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pb || iy - pb >= h {
                        continue;
                    }
                    let iy = iy - pb;
                    for kx in 0..k {
                        let ix = x + kx;
                        if ix < pb || ix - pb >= w {
                            continue;
                        }
                        let ix = ix - pb;
                        let wbase = ((oc * k + ky) * k + kx) * ci;
                        let ibase = (iy * w + ix) * ci;
                        let wrow = &layer.weights[wbase..wbase + ci];
                        let irow = &input[ibase..ibase + ci];
                        for (wv, iv) in wrow.iter().zip(irow) {
                            acc += wv * iv;
                        }
                    }
                }
                out[cell + oc] = acc.max(0.0);
            }
        }
    }
}

/// 2x2 stride-2 max pool with floor semantics; records flat argmax indices.
fn pool_forward(
    input: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
) {
    let oh = h / 2;
    let ow = w / 2;
    out.clear();
    out.resize(oh * ow * c, 0.0);
    argmax.clear();
    argmax.resize(oh * ow * c, 0);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((2 * y + dy) * w + (2 * x + dx)) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (y * ow + x) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

struct Trace {
    /// activations[0] is the (reshaped) input; activations[k+1] is layer k output.
    activations: Vec<Vec<f64>>,
    /// argmax per pool layer, aligned with `Network::layers`.
    pool_argmax: Vec<Vec<usize>>,
    shapes: Vec<Shape>,
}

fn input_row<'a>(net: &Network, row: &'a [f64]) -> Result<std::borrow::Cow<'a, [f64]>> {
    match net.input {
        InputShape::Vector(n) => {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "expected input width {n}, got {}",
                    row.len()
                )));
            }
            Ok(std::borrow::Cow::Borrowed(row))
        }
        InputShape::Grid {
            height,
            width,
            channels,
        } => {
            if row.len() == height * width * channels {
                Ok(std::borrow::Cow::Borrowed(row))
            } else {
                Ok(std::borrow::Cow::Owned(reshape_grid(row)?))
            }
        }
    }
}

fn forward_trace(net: &Network, row: &[f64], shapes: &[Shape]) -> Result<Trace> {
    let input = input_row(net, row)?.into_owned();
    let mut activations = Vec::with_capacity(net.layers.len() + 1);
    activations.push(input);
    let mut pool_argmax = vec![Vec::new(); net.layers.len()];
    for (k, layer) in net.layers.iter().enumerate() {
        let prev = activations.last().unwrap();
        let mut out = Vec::new();
        match layer {
            Layer::Dense(d) => dense_forward(d, prev, &mut out),
            Layer::Conv2d(c) => {
                let Shape::Grid { height, width, .. } = shapes[k] else {
                    return Err(Error::ShapeMismatch("conv input is not a grid".into()));
                };
                conv_forward(c, prev, height, width, &mut out);
            }
            Layer::MaxPool2x2 => {
                let Shape::Grid {
                    height,
                    width,
                    channels,
                } = shapes[k]
                else {
                    return Err(Error::ShapeMismatch("pool input is not a grid".into()));
                };
                let mut argmax = Vec::new();
                pool_forward(prev, height, width, channels, &mut out, &mut argmax);
                pool_argmax[k] = argmax;
            }
            Layer::Flatten => out = prev.clone(),
        }
        activations.push(out);
    }
    Ok(Trace {
        activations,
        pool_argmax,
        shapes: shapes.to_vec(),
    })
}

/// Class probabilities for one row (applies the 8x8 reshape for grid inputs).
pub fn forward_row(net: &Network, row: &[f64]) -> Result<Vec<f64>> {
    let shapes = net.shapes()?;
    Ok(forward_trace(net, row, &shapes)?.activations.pop().unwrap())
}

/// All activations for one row: index 0 is the (reshaped) input, index k+1 is
/// layer k's output. Used by the quantization calibration pass.
pub(crate) fn forward_activations(
    net: &Network,
    row: &[f64],
    shapes: &[Shape],
) -> Result<Vec<Vec<f64>>> {
    Ok(forward_trace(net, row, shapes)?.activations)
}

/// Class probabilities for a batch; one output row per input row.
pub fn forward_batch(net: &Network, batch: &Matrix) -> Result<Matrix> {
    forward_batch_inner(net, batch, false)
}

/// Sequential twin of [`forward_batch`]; bit-identical output.
pub fn forward_batch_seq(net: &Network, batch: &Matrix) -> Result<Matrix> {
    forward_batch_inner(net, batch, true)
}

fn forward_batch_inner(net: &Network, batch: &Matrix, sequential: bool) -> Result<Matrix> {
    let shapes = net.shapes()?;
    let n = batch.rows();
    let run = |i: usize| -> Result<Vec<f64>> {
        Ok(forward_trace(net, batch.row(i), &shapes)?
            .activations
            .pop()
            .unwrap())
    };
    let rows: Vec<Result<Vec<f64>>> = if sequential {
        par::map_indexed_seq(n, run)
    } else {
        par::map_indexed(n, run)
    };
    let mut data = Vec::with_capacity(n * 2);
    for r in rows {
        data.extend_from_slice(&r?);
    }
    Matrix::from_vec(n, 2, data)
}

/// Mean weighted cross-entropy: mean over rows of -w(label) * ln(p[label]),
/// with probabilities clipped at `LOG_CLIP`.
pub fn loss_sparse_ce(probs: &Matrix, labels: &[u8], class_weights: (f64, f64)) -> f64 {
    let n = probs.rows();
    let mut total = 0.0;
    for i in 0..n {
        let label = labels[i] as usize;
        let w = if label == 0 { class_weights.0 } else { class_weights.1 };
        let p = probs.row(i)[label].max(LOG_CLIP);
        total -= w * p.ln();
    }
    total / n as f64
}

fn backward_row(
    net: &Network,
    trace: &Trace,
    label: u8,
    weight: f64,
    batch_rows: usize,
    grads: &mut Gradients,
) {
    let probs = trace.activations.last().unwrap();
    // fused softmax + cross-entropy gradient at the logits
    let mut delta: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, p)| weight * (p - f64::from(u8::from(j == label as usize))) / batch_rows as f64)
        .collect();

    for (k, layer) in net.layers.iter().enumerate().rev() {
        let input = &trace.activations[k];
        let output = &trace.activations[k + 1];
        match layer {
            Layer::Dense(d) => {
                if d.activation == Activation::Relu {
                    for (dv, ov) in delta.iter_mut().zip(output) {
                        if *ov <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                let g = &mut grads.layers[k];
                let mut next = vec![0.0; d.in_width];
                for o in 0..d.out_width {
                    let dv = delta[o];
                    g.bias[o] += dv;
                    let wrow = &d.weights[o * d.in_width..(o + 1) * d.in_width];
                    let grow = &mut g.weights[o * d.in_width..(o + 1) * d.in_width];
                    for i in 0..d.in_width {
                        grow[i] += dv * input[i];
                        next[i] += dv * wrow[i];
                    }
                }
                delta = next;
            }
            Layer::Conv2d(c) => {
                let Shape::Grid { height, width, .. } = trace.shapes[k] else {
                    unreachable!()
                };
                for (dv, ov) in delta.iter_mut().zip(output) {
                    if *ov <= 0.0 {
                        *dv = 0.0;
                    }
                }
                let (h, w) = (height, width);
                let k_sz = c.kernel;
                let ci = c.in_channels;
                let co = c.out_channels;
                let pb = pad_before(k_sz);
                let g = &mut grads.layers[k];
                let mut next = vec![0.0; h * w * ci];
                for y in 0..h {
                    for x in 0..w {
                        let cell = (y * w + x) * co;
                        for oc in 0..co {
                            let dv = delta[cell + oc];
                            if dv == 0.0 {
                                continue;
                            }
                            g.bias[oc] += dv;
                            for ky in 0..k_sz {
                                let iy = y + ky;
                                if iy < pb || iy - pb >= h {
                                    continue;
                                }
                                let iy = iy - pb;
                                for kx in 0..k_sz {
                                    let ix = x + kx;
                                    if ix < pb || ix - pb >= w {
                                        continue;
                                    }
                                    let ix = ix - pb;
                                    let wbase = ((oc * k_sz + ky) * k_sz + kx) * ci;
                                    let ibase = (iy * w + ix) * ci;
                                    for c_in in 0..ci {
                                        g.weights[wbase + c_in] += dv * input[ibase + c_in];
                                        next[ibase + c_in] += dv * c.weights[wbase + c_in];
                                    }
                                }
                            }
                        }
                    }
                }
                delta = next;
            }
            Layer::MaxPool2x2 => {
                let mut next = vec![0.0; input.len()];
                for (o, &src) in trace.pool_argmax[k].iter().enumerate() {
                    next[src] += delta[o];
                }
                delta = next;
            }
            Layer::Flatten => {}
        }
    }
}

/// Mean loss and parameter gradients over a batch. The gradient of the fused
/// softmax + cross-entropy head at the logits is w(label) * (p - onehot) / n.
pub fn backward_batch(
    net: &Network,
    batch: &Matrix,
    labels: &[u8],
    class_weights: (f64, f64),
) -> Result<(f64, Gradients)> {
    let shapes = net.shapes()?;
    let n = batch.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    let indices: Vec<usize> = (0..n).collect();
    let partials: Vec<Result<(f64, Gradients)>> =
        par::map_chunks(&indices, par::GRAD_CHUNKS, |chunk| {
            let mut grads = Gradients::zeros_like(net);
            let mut loss = 0.0;
            for &i in chunk {
                let trace = forward_trace(net, batch.row(i), &shapes)?;
                let label = labels[i] as usize;
                let w = if label == 0 { class_weights.0 } else { class_weights.1 };
                let p = trace.activations.last().unwrap()[label].max(LOG_CLIP);
                loss -= w * p.ln();
                backward_row(net, &trace, labels[i], w, n, &mut grads);
            }
            Ok((loss, grads))
        });
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for p in partials {
        let (l, g) = p?;
        loss += l;
        total.add(&g);
    }
    Ok((loss / n as f64, total))
}

fn sgd_step(net: &mut Network, grads: &Gradients, velocity: &mut Gradients, lr: f64, momentum: f64) {
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[k];
        let v = &mut velocity.layers[k];
        let (weights, bias) = match layer {
            Layer::Dense(d) => (&mut d.weights, &mut d.bias),
            Layer::Conv2d(c) => (&mut c.weights, &mut c.bias),
            _ => continue,
        };
        for i in 0..weights.len() {
            v.weights[i] = momentum * v.weights[i] - lr * g.weights[i];
            weights[i] += v.weights[i];
        }
        for i in 0..bias.len() {
            v.bias[i] = momentum * v.bias[i] - lr * g.bias[i];
            bias[i] += v.bias[i];
        }
    }
}

/// Train and return the parameters with the best validation macro-F1, along
/// with per-epoch history. Deterministic given the config seed.
pub fn train(
    net: &Network,
    train_data: &FeatureMatrix,
    val_data: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::EmptyTable);
    }
    let weights = cfg.resolve_weights(&train_data.labels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = net.clone();
    let mut velocity = Gradients::zeros_like(net);
    let mut history = TrainHistory::default();
    let mut best = current.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut stale = 0usize;

    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_data.data.select_rows(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| train_data.labels[i]).collect();
            let (loss, grads) = backward_batch(&current, &batch, &labels, weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            sgd_step(&mut current, &grads, &mut velocity, cfg.learning_rate, cfg.momentum);
            epoch_loss += loss;
            batches += 1;
        }
        let report = evaluate(&current, val_data)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_macro_f1: report.macro_f1,
        });
        if report.macro_f1 > best_f1 {
            best_f1 = report.macro_f1;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Argmax evaluation (ties to class 0) with per-class precision/recall/F1.
/// Zero-denominator F1 is defined as 0; macro F1 averages the two classes.
pub fn evaluate(net: &Network, data: &FeatureMatrix) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyTable);
    }
    let probs = forward_batch(net, &data.data)?;
    let mut confusion = [[0usize; 2]; 2];
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let pred = usize::from(row[1] > row[0]);
        confusion[data.labels[i] as usize][pred] += 1;
    }
    Ok(report_from_confusion(confusion))
}

pub fn report_from_confusion(confusion: [[usize; 2]; 2]) -> EvalReport {
    let mut precision = [0.0; 2];
    let mut recall = [0.0; 2];
    let mut f1 = [0.0; 2];
    for c in 0..2 {
        let tp = confusion[c][c] as f64;
        let pred = (confusion[0][c] + confusion[1][c]) as f64;
        let act = (confusion[c][0] + confusion[c][1]) as f64;
        precision[c] = if pred > 0.0 { tp / pred } else { 0.0 };
        recall[c] = if act > 0.0 { tp / act } else { 0.0 };
        f1[c] = if precision[c] + recall[c] > 0.0 {
            2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
        } else {
            0.0
        };
    }
    let total = confusion.iter().flatten().sum::<usize>() as f64;
    let correct = (confusion[0][0] + confusion[1][1]) as f64;
    EvalReport {
        confusion,
        precision,
        recall,
        f1,
        macro_f1: (f1[0] + f1[1]) / 2.0,
        accuracy: correct / total,
    }
}
