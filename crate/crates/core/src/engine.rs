//! Integer inference for quantized models.
//!
//! Dense and convolution layers accumulate `(in_q - in_zp) * w_q` products in
//! checked int32, add the int32 bias (scale input_scale * weight_scale), and
//! requantize to the next tensor's scale with round-to-nearest-even. ReLU is a
//! clamp at the output zero point. No real-valued intermediate appears between
//! input quantization and the final logit dequantization; the max-pool only
//! compares int8 values, which commutes with dequantization.

use crate::dataset::reshape_grid;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::InputShape;
use crate::par;
use crate::quantizer::{QuantConv, QuantDense, QuantLayer, QuantParams, QuantizedModel};

fn requantize(acc: i32, multiplier: f64, out: QuantParams, relu: bool) -> i8 {
    let q = (acc as f64 * multiplier).round_ties_even() + out.zero_point as f64;
    let q = q.clamp(-128.0, 127.0) as i32;
    let q = if relu { q.max(out.zero_point) } else { q };
    q.clamp(-128, 127) as i8
}

/// Quantized dense layer: int32 accumulation, requantize, optional ReLU clamp.
pub fn dense_int8(
    input: &[i8],
    input_params: QuantParams,
    layer: &QuantDense,
    layer_idx: usize,
) -> Result<Vec<i8>> {
    if input.len() != layer.in_width {
        return Err(Error::ShapeMismatch(format!(
            "dense layer {layer_idx} expects {} inputs, got {}",
            layer.in_width,
            input.len()
        )));
    }
    let zp = input_params.zero_point;
    let multiplier = input_params.scale * layer.weight.scale / layer.output.scale;
    let relu = layer.activation == crate::model::Activation::Relu;
    let mut out = Vec::with_capacity(layer.out_width);
    for o in 0..layer.out_width {
        let wrow = &layer.weights[o * layer.in_width..(o + 1) * layer.in_width];
        let mut acc: i32 = 0;
        for (&x, &w) in input.iter().zip(wrow) {
            let prod = (x as i32 - zp) * w as i32;
            acc = acc
                .checked_add(prod)
                .ok_or(Error::AccumulatorOverflow { layer: layer_idx })?;
        }
        acc = acc
            .checked_add(layer.bias[o])
            .ok_or(Error::AccumulatorOverflow { layer: layer_idx })?;
        out.push(requantize(acc, multiplier, layer.output, relu));
    }
    Ok(out)
}

/// Quantized same-padding stride-1 convolution with ReLU clamp.
/// Grids are `[h][w][c]` row-major; padding cells carry real value zero, so
/// out-of-bounds positions simply contribute nothing to the corrected sum.
pub fn conv2d_int8(
    input: &[i8],
    h: usize,
    w: usize,
    input_params: QuantParams,
    layer: &QuantConv,
    layer_idx: usize,
) -> Result<Vec<i8>> {
    let k = layer.kernel;
    let ci = layer.in_channels;
    let co = layer.out_channels;
    if input.len() != h * w * ci {
        return Err(Error::ShapeMismatch(format!(
            "conv layer {layer_idx} expects {}x{}x{} input, got {} values",
            h,
            w,
            ci,
            input.len()
        )));
    }
    let zp = input_params.zero_point;
    let multiplier = input_params.scale * layer.weight.scale / layer.output.scale;
    let pb = (k - 1) / 2;
    let mut out = vec![0i8; h * w * co];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * w + x) * co;
            for oc in 0..co {
                let mut acc: i32 = 0;
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
                        for c_in in 0..ci {
                            let prod = (input[ibase + c_in] as i32 - zp)
                                * layer.weights[wbase + c_in] as i32;
                            acc = acc
                                .checked_add(prod)
                                .ok_or(Error::AccumulatorOverflow { layer: layer_idx })?;
                        }
                    }
                }
                acc = acc
                    .checked_add(layer.bias[oc])
                    .ok_or(Error::AccumulatorOverflow { layer: layer_idx })?;
                out[cell + oc] = requantize(acc, multiplier, layer.output, true);
            }
        }
    }
    Ok(out)
}

/// 2x2 stride-2 max pool over an int8 grid, floor semantics on odd dims.
/// Quantization parameters pass through unchanged.
pub fn maxpool2x2_int8(input: &[i8], h: usize, w: usize, c: usize) -> Vec<i8> {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0i8; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = i8::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = input[((2 * y + dy) * w + (2 * x + dx)) * c + ch];
                        best = best.max(v);
                    }
                }
                out[(y * ow + x) * c + ch] = best;
            }
        }
    }
    out
}

/// Quantize a feature row into the model's input tensor.
fn quantize_input(q: &QuantizedModel, row: &[f64]) -> Result<Vec<i8>> {
    let reals: Vec<f64> = match q.input_shape {
        InputShape::Vector(n) => {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "expected input width {n}, got {}",
                    row.len()
                )));
            }
            row.to_vec()
        }
        InputShape::Grid {
            height,
            width,
            channels,
        } => {
            if row.len() == height * width * channels {
                row.to_vec()
            } else {
                reshape_grid(row)?
            }
        }
    };
    Ok(reals.iter().map(|&r| q.input.quantize(r)).collect())
}

/// Run all layers; softmax happens in real arithmetic on the dequantized
/// logits. Returns (label, probabilities); argmax ties break to label 0.
pub fn infer(q: &QuantizedModel, row: &[f64]) -> Result<(u8, [f64; 2])> {
    let mut values = quantize_input(q, row)?;
    let mut params = q.input;
    let (mut h, mut w, mut c) = match q.input_shape {
        InputShape::Vector(n) => (1, 1, n),
        InputShape::Grid {
            height,
            width,
            channels,
        } => (height, width, channels),
    };
    for (k, layer) in q.layers.iter().enumerate() {
        match layer {
            QuantLayer::Dense(d) => {
                values = dense_int8(&values, params, d, k)?;
                params = d.output;
                c = d.out_width;
                h = 1;
                w = 1;
            }
            QuantLayer::Conv2d(conv) => {
                values = conv2d_int8(&values, h, w, params, conv, k)?;
                params = conv.output;
                c = conv.out_channels;
            }
            QuantLayer::MaxPool2x2 => {
                values = maxpool2x2_int8(&values, h, w, c);
                h /= 2;
                w /= 2;
            }
            QuantLayer::Flatten => {
                c = h * w * c;
                h = 1;
                w = 1;
            }
        }
    }
    if values.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 2 logits, got {}",
            values.len()
        )));
    }
    let logits: Vec<f64> = values.iter().map(|&v| params.dequantize(v)).collect();
    let probs = crate::trainer::softmax(&logits);
    let label = u8::from(probs[1] > probs[0]);
    Ok((label, [probs[0], probs[1]]))
}

/// Batch inference; one (label, probabilities) per row.
pub fn infer_batch(q: &QuantizedModel, batch: &Matrix) -> Result<Vec<(u8, [f64; 2])>> {
    let rows: Vec<Result<(u8, [f64; 2])>> = par::map_indexed(batch.rows(), |i| infer(q, batch.row(i)));
    rows.into_iter().collect()
}

/// Sequential twin of [`infer_batch`]; identical output.
pub fn infer_batch_seq(q: &QuantizedModel, batch: &Matrix) -> Result<Vec<(u8, [f64; 2])>> {
    let rows: Vec<Result<(u8, [f64; 2])>> =
        par::map_indexed_seq(batch.rows(), |i| infer(q, batch.row(i)));
    rows.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(scale: f64, zero_point: i32) -> QuantParams {
        QuantParams { scale, zero_point }
    }

    #[test]
    fn dense_identity_maps_values_within_one_step() {
        let layer = QuantDense {
            in_width: 2,
            out_width: 2,
            activation: Activation::Relu,
            weights: vec![127, 0, 0, 127],
            bias: vec![0, 0],
            weight: params(1.0 / 127.0, 0),
            output: params(0.02, -128),
        };
        let input_params = params(0.02, -128);
        // real inputs (1.0, 2.0)
        let input = vec![input_params.quantize(1.0), input_params.quantize(2.0)];
        let out = dense_int8(&input, input_params, &layer, 0).unwrap();
        for (o, expect) in out.iter().zip([1.0, 2.0]) {
            let r = layer.output.dequantize(*o);
            assert!((r - expect).abs() <= layer.output.scale / 2.0 + 1e-9, "{r} vs {expect}");
        }
    }

    #[test]
    fn dense_zero_weights_emit_zero_point() {
        let layer = QuantDense {
            in_width: 3,
            out_width: 2,
            activation: Activation::Softmax,
            weights: vec![0; 6],
            bias: vec![0, 0],
            weight: params(0.01, 0),
            output: params(0.1, 3),
        };
        let out = dense_int8(&[5, -9, 77], params(0.05, -2), &layer, 0).unwrap();
        assert_eq!(out, vec![3, 3]);
    }

    #[test]
    fn dense_rejects_wrong_width_and_detects_overflow() {
        let layer = QuantDense {
            in_width: 2,
            out_width: 1,
            activation: Activation::Relu,
            weights: vec![127, 127],
            bias: vec![i32::MAX],
            weight: params(1.0, 0),
            output: params(1.0, 0),
        };
        assert!(matches!(
            dense_int8(&[1, 2, 3], params(1.0, 0), &layer, 4),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            dense_int8(&[127, 127], params(1.0, -128), &layer, 4),
            Err(Error::AccumulatorOverflow { layer: 4 })
        ));
    }

    #[test]
    fn dense_random_matches_float_reference_within_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let in_w = 5;
            let out_w = 3;
            let weights_f: Vec<f64> = (0..in_w * out_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias_f: Vec<f64> = (0..out_w).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let input_f: Vec<f64> = (0..in_w).map(|_| rng.gen_range(0.0..1.0)).collect();

            let amax = weights_f.iter().fold(0.0f64, |m, &w| m.max(w.abs())).max(1e-6);
            let w_params = params(amax / 127.0, 0);
            let in_params = QuantParams::from_range(0.0, 1.0);
            let out_params = QuantParams::from_range(-4.0, 4.0);
            let layer = QuantDense {
                in_width: in_w,
                out_width: out_w,
                activation: Activation::Relu,
                weights: weights_f
                    .iter()
                    .map(|&w| (w / w_params.scale).round_ties_even() as i8)
                    .collect(),
                bias: bias_f
                    .iter()
                    .map(|&b| (b / (in_params.scale * w_params.scale)).round_ties_even() as i32)
                    .collect(),
                weight: w_params,
                output: out_params,
            };
            let input_q: Vec<i8> = input_f.iter().map(|&r| in_params.quantize(r)).collect();
            let out_q = dense_int8(&input_q, in_params, &layer, 0).unwrap();

            // float64 reference over the dequantized operands
            for o in 0..out_w {
                let mut acc = layer.bias[o] as f64 * in_params.scale * w_params.scale;
                for i in 0..in_w {
                    acc += in_params.dequantize(input_q[i])
                        * w_params.scale
                        * layer.weights[o * in_w + i] as f64;
                }
                let acc = acc.max(0.0);
                let ref_q = out_params.quantize(acc);
                assert!(
                    (out_q[o] as i32 - ref_q as i32).abs() <= 1,
                    "int {} vs ref {}",
                    out_q[o],
                    ref_q
                );
            }
        }
    }

    #[test]
    fn conv_counting_kernel_accumulates_window() {
        // 2x2 all-ones input, one 2x2 all-ones kernel; output cell (0,0)
        // covers the full window and represents 4.0
        let in_params = QuantParams::from_range(0.0, 1.0);
        let w_params = params(1.0 / 127.0, 0);
        let out_params = QuantParams::from_range(0.0, 4.0);
        let layer = QuantConv {
            kernel: 2,
            in_channels: 1,
            out_channels: 1,
            weights: vec![127; 4],
            bias: vec![0],
            weight: w_params,
            output: out_params,
        };
        let input: Vec<i8> = vec![in_params.quantize(1.0); 4];
        let out = conv2d_int8(&input, 2, 2, in_params, &layer, 0).unwrap();
        let r = out_params.dequantize(out[0]);
        assert!((r - 4.0).abs() <= out_params.scale / 2.0 + 1e-9, "{r}");
    }

    #[test]
    fn conv_zero_input_emits_zero_point_grid() {
        let in_params = QuantParams::from_range(0.0, 1.0);
        let layer = QuantConv {
            kernel: 3,
            in_channels: 2,
            out_channels: 3,
            weights: vec![11; 3 * 3 * 2 * 3],
            bias: vec![0; 3],
            weight: params(0.01, 0),
            output: params(0.05, -20),
        };
        let input = vec![in_params.quantize(0.0); 4 * 4 * 2];
        let out = conv2d_int8(&input, 4, 4, in_params, &layer, 0).unwrap();
        assert!(out.iter().all(|&v| v == -20));
    }

    #[test]
    fn conv_random_matches_float_reference_within_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let (h, w, ci, co, k) = (8, 8, 3, 4, 3);
            let weights_f: Vec<f64> = (0..k * k * ci * co).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let bias_f: Vec<f64> = (0..co).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let input_f: Vec<f64> = (0..h * w * ci).map(|_| rng.gen_range(0.0..1.0)).collect();
            let amax = weights_f.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-6);
            let w_params = params(amax / 127.0, 0);
            let in_params = QuantParams::from_range(0.0, 1.0);
            let out_params = QuantParams::from_range(0.0, 8.0);
            let layer = QuantConv {
                kernel: k,
                in_channels: ci,
                out_channels: co,
                weights: weights_f
                    .iter()
                    .map(|&v| (v / w_params.scale).round_ties_even() as i8)
                    .collect(),
                bias: bias_f
                    .iter()
                    .map(|&b| (b / (in_params.scale * w_params.scale)).round_ties_even() as i32)
                    .collect(),
                weight: w_params,
                output: out_params,
            };
            let input_q: Vec<i8> = input_f.iter().map(|&r| in_params.quantize(r)).collect();
            let out_q = conv2d_int8(&input_q, h, w, in_params, &layer, 0).unwrap();

            let pb = (k - 1) / 2;
            for y in 0..h {
                for x in 0..w {
                    for oc in 0..co {
                        let mut acc =
                            layer.bias[oc] as f64 * in_params.scale * w_params.scale;
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y + ky, x + kx);
                                if iy < pb || ix < pb || iy - pb >= h || ix - pb >= w {
                                    continue;
                                }
                                let (iy, ix) = (iy - pb, ix - pb);
                                for c_in in 0..ci {
                                    let wq =
                                        layer.weights[((oc * k + ky) * k + kx) * ci + c_in];
                                    acc += in_params
                                        .dequantize(input_q[(iy * w + ix) * ci + c_in])
                                        * w_params.scale
                                        * wq as f64;
                                }
                            }
                        }
                        let ref_q = out_params.quantize(acc.max(0.0));
                        let got = out_q[(y * w + x) * co + oc];
                        assert!((got as i32 - ref_q as i32).abs() <= 1);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_picks_tile_max_and_halves_constant_grids() {
        let tile: Vec<i8> = vec![1, 3, 2, 0];
        assert_eq!(maxpool2x2_int8(&tile, 2, 2, 1), vec![3]);
        let constant = vec![7i8; 6 * 6];
        let pooled = maxpool2x2_int8(&constant, 6, 6, 1);
        assert_eq!(pooled, vec![7i8; 9]);
    }

    #[test]
    fn pool_commutes_with_dequantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = params(0.037, -11);
        for _ in 0..1000 {
            let grid: Vec<i8> = (0..8 * 8 * 2).map(|_| rng.gen_range(-128..=127) as i8).collect();
            let pooled = maxpool2x2_int8(&grid, 8, 8, 2);
            let deq_then_pool: Vec<f64> = {
                let deq: Vec<f64> = grid.iter().map(|&v| p.dequantize(v)).collect();
                let mut out = vec![0.0; 4 * 4 * 2];
                for y in 0..4 {
                    for x in 0..4 {
                        for c in 0..2 {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    best = best.max(deq[((2 * y + dy) * 8 + (2 * x + dx)) * 2 + c]);
                                }
                            }
                            out[(y * 4 + x) * 2 + c] = best;
                        }
                    }
                }
                out
            };
            let pool_then_deq: Vec<f64> = pooled.iter().map(|&v| p.dequantize(v)).collect();
            assert_eq!(deq_then_pool, pool_then_deq);
        }
    }

    #[test]
    fn zero_weight_model_gives_uniform_probs_and_label_zero() {
        use crate::quantizer::{quantize, ActivationRanges};
        let mut net = crate::model::build_ff(1, 3).unwrap();
        for layer in &mut net.layers {
            if let crate::model::Layer::Dense(d) = layer {
                d.weights.iter_mut().for_each(|w| *w = 0.0);
                d.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let ranges = ActivationRanges {
            input: (0.0, 1.0),
            layer_outputs: vec![Some((0.0, 1.0)), Some((-1.0, 1.0))],
        };
        let q = quantize(&net, &ranges).unwrap();
        let (label, probs) = infer(&q, &[0.4; 39]).unwrap();
        assert_eq!(label, 0);
        assert!((probs[0] - 0.5).abs() < 1e-9);
        assert!((probs[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn infer_is_deterministic() {
        let net = crate::model::build_cnn_small(8, 2, 6).unwrap();
        let data = crate::dataset::synth_flows(128, 0.5, 6).unwrap();
        let q = crate::quantizer::calibrate_and_quantize(&net, &data).unwrap();
        let a = infer(&q, data.data.row(0)).unwrap();
        let b = infer(&q, data.data.row(0)).unwrap();
        assert_eq!(a, b);
        let batch = infer_batch(&q, &data.data).unwrap();
        let batch_seq = infer_batch_seq(&q, &data.data).unwrap();
        assert_eq!(batch, batch_seq);
    }
}
