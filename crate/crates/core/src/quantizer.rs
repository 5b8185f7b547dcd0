//! Post-training int8 quantization with per-tensor affine parameters.
//!
//! Weights quantize symmetrically (zero point 0, scale max|w|/127); activation
//! tensors quantize asymmetrically from calibrated [p0.1, p99.9] percentile
//! ranges widened to include zero. Biases carry the 32-bit accumulator scale
//! `input_scale * weight_scale`.

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::{Activation, FamilySpec, InputShape, Layer, Network};
use crate::par;
use crate::trainer;

/// Smallest admitted scale, covering all-zero weight tensors and degenerate
/// activation ranges.
pub const MIN_SCALE: f64 = 1e-6;

pub const CALIB_LOW_PERCENTILE: f64 = 0.1;
pub const CALIB_HIGH_PERCENTILE: f64 = 99.9;
pub const DEFAULT_CALIB_ROWS: usize = 1024;

/// Memory allowance for one calibration pass; tensors beyond it are collected
/// in additional passes.
const CALIB_GROUP_BUDGET_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn quantize(&self, r: f64) -> i8 {
        let q = (r / self.scale).round_ties_even() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }

    /// Asymmetric parameters mapping [lo, hi] onto the int8 range.
    pub fn from_range(lo: f64, hi: f64) -> QuantParams {
        let scale = ((hi - lo) / 255.0).max(MIN_SCALE / 255.0);
        let zero_point = (-128.0 - (lo / scale).round_ties_even())
            .clamp(-128.0, 127.0) as i32;
        QuantParams { scale, zero_point }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantDense {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight: QuantParams,
    pub output: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConv {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight: QuantParams,
    pub output: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantLayer {
    Dense(QuantDense),
    Conv2d(QuantConv),
    MaxPool2x2,
    Flatten,
}

impl QuantLayer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            QuantLayer::Dense(_) => "dense",
            QuantLayer::Conv2d(_) => "conv2d",
            QuantLayer::MaxPool2x2 => "maxpool2x2",
            QuantLayer::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub family: FamilySpec,
    pub input_shape: InputShape,
    pub input: QuantParams,
    pub layers: Vec<QuantLayer>,
    pub size_kib: f64,
}

impl QuantizedModel {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                QuantLayer::Dense(d) => d.weights.len() + d.bias.len(),
                QuantLayer::Conv2d(c) => c.weights.len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// (tensor name, params) for every quantized tensor, calibration-report order.
    pub fn tensor_params(&self) -> Vec<(String, QuantParams)> {
        let mut out = vec![("input".to_string(), self.input)];
        for (k, layer) in self.layers.iter().enumerate() {
            match layer {
                QuantLayer::Dense(d) => {
                    out.push((format!("layer{k}.dense.weights"), d.weight));
                    out.push((format!("layer{k}.dense.output"), d.output));
                }
                QuantLayer::Conv2d(c) => {
                    out.push((format!("layer{k}.conv2d.weights"), c.weight));
                    out.push((format!("layer{k}.conv2d.output"), c.output));
                }
                _ => {}
            }
        }
        out
    }
}

/// Calibrated activation ranges: the model input plus each requantizing
/// layer's output (None for pool/flatten).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRanges {
    pub input: (f64, f64),
    pub layer_outputs: Vec<Option<(f64, f64)>>,
}

fn percentile_nearest_rank(values: &mut [f64], p: f64) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

fn widen_range(lo: f64, hi: f64) -> (f64, f64) {
    let lo = lo.min(0.0);
    let mut hi = hi.max(0.0);
    if hi - lo < MIN_SCALE {
        hi = lo + MIN_SCALE;
    }
    (lo, hi)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TensorId {
    Input,
    LayerOutput(usize),
}

/// Run the calibration pass: exact [p0.1, p99.9] percentiles of every
/// activation tensor over `calib`, widened to include zero. Tensors are
/// grouped so one pass never buffers more than the memory allowance.
pub fn calibrate(net: &Network, calib: &FeatureMatrix) -> Result<ActivationRanges> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let shapes = net.shapes()?;
    let rows = calib.len();

    let mut tensors: Vec<(TensorId, usize)> = vec![(TensorId::Input, shapes[0].elements())];
    for (k, layer) in net.layers.iter().enumerate() {
        if matches!(layer, Layer::Dense(_) | Layer::Conv2d(_)) {
            tensors.push((TensorId::LayerOutput(k), shapes[k + 1].elements()));
        }
    }

    let mut groups: Vec<Vec<(TensorId, usize)>> = Vec::new();
    let mut current: Vec<(TensorId, usize)> = Vec::new();
    let mut bytes = 0usize;
    for t in tensors {
        let t_bytes = t.1 * rows * std::mem::size_of::<f64>();
        if !current.is_empty() && bytes + t_bytes > CALIB_GROUP_BUDGET_BYTES {
            groups.push(std::mem::take(&mut current));
            bytes = 0;
        }
        bytes += t_bytes;
        current.push(t);
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let mut input_range = None;
    let mut layer_ranges: Vec<Option<(f64, f64)>> = vec![None; net.layers.len()];
    let indices: Vec<usize> = (0..rows).collect();
    for group in groups {
        // per chunk, one value buffer per group tensor, concatenated in order
        let chunks: Vec<Result<Vec<Vec<f64>>>> =
            par::map_chunks(&indices, par::GRAD_CHUNKS, |chunk| {
                let mut buffers: Vec<Vec<f64>> = group
                    .iter()
                    .map(|&(_, elems)| Vec::with_capacity(elems * chunk.len()))
                    .collect();
                for &i in chunk {
                    let acts = trainer::forward_activations(net, calib.data.row(i), &shapes)?;
                    for (b, &(tid, _)) in buffers.iter_mut().zip(&group) {
                        match tid {
                            TensorId::Input => b.extend_from_slice(&acts[0]),
                            TensorId::LayerOutput(k) => b.extend_from_slice(&acts[k + 1]),
                        }
                    }
                }
                Ok(buffers)
            });
        let mut merged: Vec<Vec<f64>> = group.iter().map(|_| Vec::new()).collect();
        for chunk in chunks {
            for (m, b) in merged.iter_mut().zip(chunk?) {
                m.extend(b);
            }
        }
        for (mut values, &(tid, _)) in merged.into_iter().zip(&group) {
            let lo = percentile_nearest_rank(&mut values, CALIB_LOW_PERCENTILE);
            let hi = percentile_nearest_rank(&mut values, CALIB_HIGH_PERCENTILE);
            let range = widen_range(lo, hi);
            match tid {
                TensorId::Input => input_range = Some(range),
                TensorId::LayerOutput(k) => layer_ranges[k] = Some(range),
            }
        }
    }

    Ok(ActivationRanges {
        input: input_range.expect("input tensor always calibrated"),
        layer_outputs: layer_ranges,
    })
}

fn quantize_weights(weights: &[f64]) -> (Vec<i8>, QuantParams) {
    let amax = weights.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    let scale = if amax > 0.0 { amax / 127.0 } else { MIN_SCALE };
    let q = weights
        .iter()
        .map(|&w| (w / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
        .collect();
    (q, QuantParams { scale, zero_point: 0 })
}

fn quantize_bias(bias: &[f64], input_scale: f64, weight_scale: f64) -> Vec<i32> {
    let scale = input_scale * weight_scale;
    bias.iter()
        .map(|&b| {
            (b / scale)
                .round_ties_even()
                .clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect()
}

/// Quantize a network with previously calibrated activation ranges.
pub fn quantize(net: &Network, ranges: &ActivationRanges) -> Result<QuantizedModel> {
    let input = QuantParams::from_range(ranges.input.0, ranges.input.1);
    let mut current = input;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (k, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                let (lo, hi) = ranges.layer_outputs[k]
                    .ok_or_else(|| Error::RangeMissing(format!("layer{k}.dense.output")))?;
                let (weights, weight) = quantize_weights(&d.weights);
                let output = QuantParams::from_range(lo, hi);
                let bias = quantize_bias(&d.bias, current.scale, weight.scale);
                layers.push(QuantLayer::Dense(QuantDense {
                    in_width: d.in_width,
                    out_width: d.out_width,
                    activation: d.activation,
                    weights,
                    bias,
                    weight,
                    output,
                }));
                current = output;
            }
            Layer::Conv2d(c) => {
                let (lo, hi) = ranges.layer_outputs[k]
                    .ok_or_else(|| Error::RangeMissing(format!("layer{k}.conv2d.output")))?;
                let (weights, weight) = quantize_weights(&c.weights);
                let output = QuantParams::from_range(lo, hi);
                let bias = quantize_bias(&c.bias, current.scale, weight.scale);
                layers.push(QuantLayer::Conv2d(QuantConv {
                    kernel: c.kernel,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    weights,
                    bias,
                    weight,
                    output,
                }));
                current = output;
            }
            Layer::MaxPool2x2 => layers.push(QuantLayer::MaxPool2x2),
            Layer::Flatten => layers.push(QuantLayer::Flatten),
        }
    }
    let params = net.param_count();
    Ok(QuantizedModel {
        family: net.family,
        input_shape: net.input,
        input,
        layers,
        size_kib: crate::model::size_kib_for_params(params),
    })
}

/// Calibrate on (up to) the default number of rows and quantize.
pub fn calibrate_and_quantize(net: &Network, calib: &FeatureMatrix) -> Result<QuantizedModel> {
    let sample = if calib.len() > DEFAULT_CALIB_ROWS {
        calib.select(&(0..DEFAULT_CALIB_ROWS).collect::<Vec<_>>())
    } else {
        calib.clone()
    };
    let ranges = calibrate(net, &sample)?;
    quantize(net, &ranges)
}

fn structures_match(net: &Network, q: &QuantizedModel) -> bool {
    net.layers.len() == q.layers.len()
        && net.layers.iter().zip(&q.layers).all(|(a, b)| match (a, b) {
            (Layer::Dense(x), QuantLayer::Dense(y)) => {
                x.in_width == y.in_width && x.out_width == y.out_width
            }
            (Layer::Conv2d(x), QuantLayer::Conv2d(y)) => {
                x.kernel == y.kernel
                    && x.in_channels == y.in_channels
                    && x.out_channels == y.out_channels
            }
            (Layer::MaxPool2x2, QuantLayer::MaxPool2x2) => true,
            (Layer::Flatten, QuantLayer::Flatten) => true,
            _ => false,
        })
}

/// Fraction of rows where the float and int8 models pick the same class.
pub fn agreement(net: &Network, q: &QuantizedModel, data: &FeatureMatrix) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyTable);
    }
    if !structures_match(net, q) {
        return Err(Error::StructureMismatch(
            "float and quantized layer lists differ".into(),
        ));
    }
    let float_probs = trainer::forward_batch(net, &data.data)?;
    let q_out = crate::engine::infer_batch(q, &data.data)?;
    let mut same = 0usize;
    for i in 0..data.len() {
        let fp = float_probs.row(i);
        let f_label = u8::from(fp[1] > fp[0]);
        same += usize::from(f_label == q_out[i].0);
    }
    Ok(same as f64 / data.len() as f64)
}
