//! Finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward pass and the loss, so it stays
//! independent of the backpropagation code it is checking. Used by the test
//! suite and by the `gradcheck` CLI subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::{
    Activation, ConvLayer, DenseLayer, FamilySpec, InputShape, Layer, Network,
};
use crate::trainer::{backward_batch, forward_batch, loss_sparse_ce};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

fn loss_of(net: &Network, batch: &Matrix, labels: &[u8], weights: (f64, f64)) -> Result<f64> {
    let probs = forward_batch(net, batch)?;
    Ok(loss_sparse_ce(&probs, labels, weights))
}

fn param_slots(net: &Network) -> Vec<(usize, bool, usize)> {
    // (layer index, is_weight, element index)
    let mut slots = Vec::new();
    for (k, layer) in net.layers.iter().enumerate() {
        let (nw, nb) = match layer {
            Layer::Dense(d) => (d.weights.len(), d.bias.len()),
            Layer::Conv2d(c) => (c.weights.len(), c.bias.len()),
            _ => (0, 0),
        };
        for i in 0..nw {
            slots.push((k, true, i));
        }
        for i in 0..nb {
            slots.push((k, false, i));
        }
    }
    slots
}

fn param_mut(net: &mut Network, slot: (usize, bool, usize)) -> &mut f64 {
    let (k, is_weight, i) = slot;
    match &mut net.layers[k] {
        Layer::Dense(d) => {
            if is_weight {
                &mut d.weights[i]
            } else {
                &mut d.bias[i]
            }
        }
        Layer::Conv2d(c) => {
            if is_weight {
                &mut c.weights[i]
            } else {
                &mut c.bias[i]
            }
        }
        _ => unreachable!("pool/flatten have no parameters"),
    }
}

/// Maximum relative error between analytic and central finite-difference
/// gradients over every parameter of `net`.
pub fn max_gradient_error(
    net: &Network,
    batch: &Matrix,
    labels: &[u8],
    weights: (f64, f64),
    epsilon: f64,
) -> Result<f64> {
    let (_, grads) = backward_batch(net, batch, labels, weights)?;
    let mut worst = 0.0f64;
    for slot in param_slots(net) {
        let mut probe = net.clone();
        let original = *param_mut(&mut probe, slot);
        *param_mut(&mut probe, slot) = original + epsilon;
        let plus = loss_of(&probe, batch, labels, weights)?;
        *param_mut(&mut probe, slot) = original - epsilon;
        let minus = loss_of(&probe, batch, labels, weights)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let (k, is_weight, i) = slot;
        let analytic = if is_weight {
            grads.layers[k].weights[i]
        } else {
            grads.layers[k].bias[i]
        };
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One randomly sized configuration per layer kind under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Dense,
    Conv2d,
    PoolStack,
    SoftmaxHead,
}

pub const ALL_KINDS: [CheckKind; 4] = [
    CheckKind::Dense,
    CheckKind::Conv2d,
    CheckKind::PoolStack,
    CheckKind::SoftmaxHead,
];

fn random_dense(rng: &mut ChaCha8Rng, input: usize, output: usize, activation: Activation) -> Layer {
    let weights = (0..input * output).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias = (0..output).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Layer::Dense(DenseLayer {
        in_width: input,
        out_width: output,
        activation,
        weights,
        bias,
    })
}

fn random_conv(rng: &mut ChaCha8Rng, kernel: usize, ci: usize, co: usize) -> Layer {
    let weights = (0..kernel * kernel * ci * co)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let bias = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Layer::Conv2d(ConvLayer {
        kernel,
        in_channels: ci,
        out_channels: co,
        weights,
        bias,
    })
}

/// Build a small random net of the given kind plus a random batch for it.
pub fn random_check_case(kind: CheckKind, seed: u64) -> (Network, Matrix, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..5);
    let (input, layers) = match kind {
        CheckKind::Dense => {
            let a = rng.gen_range(3..8);
            let b = rng.gen_range(2..6);
            let layers = vec![
                random_dense(&mut rng, a, b, Activation::Relu),
                random_dense(&mut rng, b, 2, Activation::Softmax),
            ];
            (InputShape::Vector(a), layers)
        }
        CheckKind::Conv2d => {
            let k = rng.gen_range(2..=5);
            let co = rng.gen_range(1..4);
            let layers = vec![
                random_conv(&mut rng, k, 1, co),
                Layer::Flatten,
                random_dense(&mut rng, 8 * 8 * co, 2, Activation::Softmax),
            ];
            (
                InputShape::Grid {
                    height: 8,
                    width: 8,
                    channels: 1,
                },
                layers,
            )
        }
        CheckKind::PoolStack => {
            let k = rng.gen_range(2..=5);
            let c1 = rng.gen_range(2..4);
            let c2 = rng.gen_range(1..3);
            let layers = vec![
                random_conv(&mut rng, k, 1, c1),
                Layer::MaxPool2x2,
                random_conv(&mut rng, k, c1, c2),
                Layer::MaxPool2x2,
                Layer::Flatten,
                random_dense(&mut rng, 2 * 2 * c2, 2, Activation::Softmax),
            ];
            (
                InputShape::Grid {
                    height: 8,
                    width: 8,
                    channels: 1,
                },
                layers,
            )
        }
        CheckKind::SoftmaxHead => {
            let a = rng.gen_range(2..6);
            let layers = vec![random_dense(&mut rng, a, 2, Activation::Softmax)];
            (InputShape::Vector(a), layers)
        }
    };
    let net = Network {
        family: FamilySpec::Ff { hidden_layers: 1 },
        input,
        layers,
    };
    let width = match input {
        InputShape::Vector(n) => n,
        InputShape::Grid {
            height,
            width,
            channels,
        } => height * width * channels,
    };
    let data: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..rows).map(|_| rng.gen_range(0..2) as u8).collect();
    (net, Matrix::from_vec(rows, width, data).unwrap(), labels)
}

/// Worst relative error across `cases` random configurations of every layer
/// kind. Class weights vary too, covering the weighted loss path.
pub fn run_full_check(cases: usize, epsilon: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for kind in ALL_KINDS {
        for case in 0..cases {
            let seed = (case as u64) * 7919 + kind as u64;
            let (net, batch, labels) = random_check_case(kind, seed);
            let weights = if case % 3 == 0 { (2.0, 0.5) } else { (1.0, 1.0) };
            worst = worst.max(max_gradient_error(&net, &batch, &labels, weights, epsilon)?);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_finite_differences_per_kind() {
        for kind in ALL_KINDS {
            for case in 0..5 {
                let (net, batch, labels) = random_check_case(kind, 100 + case);
                let err =
                    max_gradient_error(&net, &batch, &labels, (1.0, 1.0), DEFAULT_EPSILON).unwrap();
                assert!(err < DEFAULT_TOLERANCE, "{kind:?} case {case}: err {err}");
            }
        }
    }

    #[test]
    fn weighted_loss_gradients_also_match() {
        let (net, batch, labels) = random_check_case(CheckKind::PoolStack, 5);
        let err = max_gradient_error(&net, &batch, &labels, (3.0, 0.25), DEFAULT_EPSILON).unwrap();
        assert!(err < DEFAULT_TOLERANCE, "err {err}");
    }
}
