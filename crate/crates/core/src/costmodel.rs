//! Analytical per-inference cost model for an edge accelerator and an
//! embedded CPU.
//!
//! Latency is roofline-style: a fixed per-inference overhead plus the larger
//! of compute time and weight-streaming time. Compute time divides each
//! layer's MAC count by the platform's peak MAC rate scaled by a per-layer-
//! kind utilization. Weights beyond the on-chip capacity are re-streamed from
//! off-chip memory on every inference, so streaming time is the off-chip byte
//! count over the off-chip bandwidth. Energy is active power times latency,
//! and efficiency counts inferences per milli-Joule.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    input_shape_for, layer_dims, spec_param_count, size_kib_for_params, ConvLayer, DenseLayer,
    FamilySpec, Layer, LayerDims, Network, Shape,
};
use crate::quantizer::{QuantLayer, QuantizedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Pool,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Pool => "maxpool2x2",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformProfile {
    pub name: String,
    /// Peak multiply-accumulate rate, MAC/s.
    pub peak_mac_rate: f64,
    pub util_conv: f64,
    pub util_dense: f64,
    pub onchip_capacity_kib: f64,
    /// Off-chip memory bandwidth, bytes/s.
    pub offchip_bandwidth: f64,
    /// Fixed per-inference overhead, seconds.
    pub fixed_overhead_s: f64,
    pub active_power_w: f64,
}

impl PlatformProfile {
    /// Shipped accelerator defaults. The systolic array digests convolutions
    /// an order of magnitude better than thin matrix-vector work, the on-chip
    /// capacity is 8000 KiB, and dispatch overhead dominates tiny models.
    pub fn accel_default() -> PlatformProfile {
        PlatformProfile {
            name: "accel-default".into(),
            peak_mac_rate: 2.0e11,
            util_conv: 0.5,
            util_dense: 0.05,
            onchip_capacity_kib: 8000.0,
            offchip_bandwidth: 4.65e8,
            fixed_overhead_s: 1.2e-4,
            active_power_w: 2.0,
        }
    }

    /// Shipped embedded-CPU defaults: uniform utilization, model weights in
    /// main memory (capacity far beyond any swept model), small dispatch
    /// overhead, roughly half of a small board's power budget.
    pub fn cpu_default() -> PlatformProfile {
        PlatformProfile {
            name: "cpu-default".into(),
            peak_mac_rate: 1.0e9,
            util_conv: 1.0,
            util_dense: 1.0,
            onchip_capacity_kib: 1024.0 * 1024.0,
            offchip_bandwidth: 1.0e10,
            fixed_overhead_s: 2.0e-5,
            active_power_w: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_mac_rate", self.peak_mac_rate),
            ("onchip_capacity_kib", self.onchip_capacity_kib),
            ("offchip_bandwidth", self.offchip_bandwidth),
            ("active_power_w", self.active_power_w),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        if !(self.fixed_overhead_s.is_finite() && self.fixed_overhead_s >= 0.0) {
            return Err(Error::InvalidParam("fixed_overhead_s must be >= 0".into()));
        }
        for (name, u) in [("util.conv", self.util_conv), ("util.dense", self.util_dense)] {
            if !(u.is_finite() && u > 0.0 && u <= 1.0) {
                return Err(Error::InvalidParam(format!("{name} must be in (0, 1]")));
            }
        }
        Ok(())
    }

    fn util_for(&self, kind: LayerKind) -> f64 {
        match kind {
            LayerKind::Conv2d => self.util_conv,
            LayerKind::Dense => self.util_dense,
            _ => 1.0,
        }
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let text = format!(
            "name = {}\npeak_mac_rate = {}\nutil.conv = {}\nutil.dense = {}\n\
             onchip_capacity_kib = {}\noffchip_bandwidth = {}\nfixed_overhead_s = {}\n\
             active_power_w = {}\n",
            self.name,
            self.peak_mac_rate,
            self.util_conv,
            self.util_dense,
            self.onchip_capacity_kib,
            self.offchip_bandwidth,
            self.fixed_overhead_s,
            self.active_power_w
        );
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<PlatformProfile> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut profile = PlatformProfile::cpu_default();
        profile.name = String::new();
        let mut seen_name = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!("bad profile line: {line}")));
            };
            let key = key.trim();
            let value = value.trim();
            let parse = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Format(format!("bad number for {key}: {v}")))
            };
            match key {
                "name" => {
                    profile.name = value.to_string();
                    seen_name = true;
                }
                "peak_mac_rate" => profile.peak_mac_rate = parse(value)?,
                "util.conv" => profile.util_conv = parse(value)?,
                "util.dense" => profile.util_dense = parse(value)?,
                "onchip_capacity_kib" => profile.onchip_capacity_kib = parse(value)?,
                "offchip_bandwidth" => profile.offchip_bandwidth = parse(value)?,
                "fixed_overhead_s" => profile.fixed_overhead_s = parse(value)?,
                "active_power_w" => profile.active_power_w = parse(value)?,
                other => return Err(Error::Format(format!("unknown profile key {other}"))),
            }
        }
        if !seen_name {
            return Err(Error::Format("profile has no name".into()));
        }
        profile.validate()?;
        Ok(profile)
    }

    /// Resolve a shipped profile name or load a profile file.
    pub fn by_name_or_path(arg: &str) -> Result<PlatformProfile> {
        match arg {
            "accel-default" => Ok(PlatformProfile::accel_default()),
            "cpu-default" => Ok(PlatformProfile::cpu_default()),
            path => PlatformProfile::from_file(Path::new(path)),
        }
    }
}

/// The cost-relevant view of a model: per-layer MAC counts plus the int8
/// parameter size. Identical for a float network and its quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub name: String,
    pub layers: Vec<(LayerKind, u64)>,
    pub size_kib: f64,
}

fn walk_macs(dims: &[LayerDims], input: Shape) -> Vec<(LayerKind, u64)> {
    let mut shape = input;
    let mut layers = Vec::with_capacity(dims.len());
    for d in dims {
        match *d {
            LayerDims::Dense {
                in_width,
                out_width,
                ..
            } => {
                layers.push((LayerKind::Dense, (in_width * out_width) as u64));
                shape = Shape::Vector(out_width);
            }
            LayerDims::Conv {
                kernel,
                in_channels,
                out_channels,
            } => {
                let Shape::Grid { height, width, .. } = shape else {
                    unreachable!("conv follows a grid");
                };
                let macs = (height * width * kernel * kernel * in_channels * out_channels) as u64;
                layers.push((LayerKind::Conv2d, macs));
                shape = Shape::Grid {
                    height,
                    width,
                    channels: out_channels,
                };
            }
            LayerDims::MaxPool => {
                let Shape::Grid {
                    height,
                    width,
                    channels,
                } = shape
                else {
                    unreachable!("pool follows a grid");
                };
                layers.push((LayerKind::Pool, 0));
                shape = Shape::Grid {
                    height: height / 2,
                    width: width / 2,
                    channels,
                };
            }
            LayerDims::Flatten => {
                layers.push((LayerKind::Flatten, 0));
                shape = Shape::Vector(shape.elements());
            }
        }
    }
    layers
}

impl Workload {
    /// Structure-only workload for a family member; no parameter allocation.
    pub fn from_spec(spec: FamilySpec) -> Result<Workload> {
        let dims = layer_dims(spec)?;
        Ok(Workload {
            name: spec.to_string(),
            layers: walk_macs(&dims, input_shape_for(spec).into()),
            size_kib: size_kib_for_params(spec_param_count(spec)?),
        })
    }

    pub fn from_network(net: &Network) -> Result<Workload> {
        let dims: Vec<LayerDims> = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(DenseLayer {
                    in_width,
                    out_width,
                    activation,
                    ..
                }) => LayerDims::Dense {
                    in_width: *in_width,
                    out_width: *out_width,
                    activation: *activation,
                },
                Layer::Conv2d(ConvLayer {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                }) => LayerDims::Conv {
                    kernel: *kernel,
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                },
                Layer::MaxPool2x2 => LayerDims::MaxPool,
                Layer::Flatten => LayerDims::Flatten,
            })
            .collect();
        Ok(Workload {
            name: net.family.to_string(),
            layers: walk_macs(&dims, net.input.into()),
            size_kib: size_kib_for_params(net.param_count()),
        })
    }

    pub fn from_quantized(q: &QuantizedModel) -> Result<Workload> {
        let dims: Vec<LayerDims> = q
            .layers
            .iter()
            .map(|l| match l {
                QuantLayer::Dense(d) => LayerDims::Dense {
                    in_width: d.in_width,
                    out_width: d.out_width,
                    activation: d.activation,
                },
                QuantLayer::Conv2d(c) => LayerDims::Conv {
                    kernel: c.kernel,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                },
                QuantLayer::MaxPool2x2 => LayerDims::MaxPool,
                QuantLayer::Flatten => LayerDims::Flatten,
            })
            .collect();
        Ok(Workload {
            name: q.family.to_string(),
            layers: walk_macs(&dims, q.input_shape.into()),
            size_kib: q.size_kib,
        })
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|&(_, m)| m).sum()
    }
}

/// Per-layer MAC counts and the total. Dense layers cost in*out MACs; same-
/// padding convolutions cost outH*outW*k^2*cin*cout; pools and flattens are
/// free.
pub fn mac_count(workload: &Workload) -> (Vec<(LayerKind, u64)>, u64) {
    (workload.layers.clone(), workload.total_macs())
}

/// On-chip memory holds the model up to capacity; the remainder lives
/// off-chip.
pub fn memory_partition(size_kib: f64, profile: &PlatformProfile) -> (f64, f64) {
    let onchip = size_kib.min(profile.onchip_capacity_kib);
    (onchip, (size_kib - onchip).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub kind: LayerKind,
    pub macs: u64,
    pub compute_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub latency_s: f64,
    pub compute_s: f64,
    pub stream_s: f64,
    pub energy_j: f64,
    pub efficiency_inf_per_mj: f64,
    pub onchip_kib: f64,
    pub offchip_kib: f64,
    pub per_layer: Vec<LayerCost>,
}

/// Latency fields only; energy fields are zeroed.
pub fn estimate_latency(workload: &Workload, profile: &PlatformProfile) -> CostEstimate {
    let per_layer: Vec<LayerCost> = workload
        .layers
        .iter()
        .map(|&(kind, macs)| LayerCost {
            kind,
            macs,
            compute_s: macs as f64 / (profile.peak_mac_rate * profile.util_for(kind)),
        })
        .collect();
    let compute_s: f64 = per_layer.iter().map(|l| l.compute_s).sum();
    let (onchip_kib, offchip_kib) = memory_partition(workload.size_kib, profile);
    let stream_s = offchip_kib * 1024.0 / profile.offchip_bandwidth;
    CostEstimate {
        latency_s: profile.fixed_overhead_s + compute_s.max(stream_s),
        compute_s,
        stream_s,
        energy_j: 0.0,
        efficiency_inf_per_mj: 0.0,
        onchip_kib,
        offchip_kib,
        per_layer,
    }
}

/// Full estimate: energy is active power times latency; efficiency is
/// inferences per milli-Joule.
pub fn estimate_energy(workload: &Workload, profile: &PlatformProfile) -> CostEstimate {
    let mut est = estimate_latency(workload, profile);
    est.energy_j = profile.active_power_w * est.latency_s;
    est.efficiency_inf_per_mj = 1e-3 / est.energy_j;
    est
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeParam {
    PeakMacRate,
    /// One multiplier applied to both utilization entries.
    UtilScale,
    FixedOverhead,
    OffchipBandwidth,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub profile: PlatformProfile,
    /// Relative residuals (pred - obs) / obs at the optimum.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

const FIT_MAX_ITERATIONS: usize = 200;

fn apply_params(initial: &PlatformProfile, free: &[FreeParam], log_theta: &[f64]) -> PlatformProfile {
    let mut p = initial.clone();
    for (param, &t) in free.iter().zip(log_theta) {
        let v = t.exp();
        match param {
            FreeParam::PeakMacRate => p.peak_mac_rate = v,
            FreeParam::UtilScale => {
                p.util_conv = initial.util_conv * v;
                p.util_dense = initial.util_dense * v;
            }
            FreeParam::FixedOverhead => p.fixed_overhead_s = v,
            FreeParam::OffchipBandwidth => p.offchip_bandwidth = v,
        }
    }
    p
}

fn residuals_at(
    observations: &[(Workload, f64)],
    initial: &PlatformProfile,
    free: &[FreeParam],
    log_theta: &[f64],
) -> Vec<f64> {
    let profile = apply_params(initial, free, log_theta);
    observations
        .iter()
        .map(|(w, obs)| (estimate_latency(w, &profile).latency_s - obs) / obs)
        .collect()
}

fn solve_normal_equations(jt_j: &mut [Vec<f64>], jt_r: &mut [f64]) -> Option<Vec<f64>> {
    let n = jt_r.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| jt_j[a][col].abs().total_cmp(&jt_j[b][col].abs()))?;
        if jt_j[pivot][col].abs() < 1e-300 {
            return None;
        }
        jt_j.swap(col, pivot);
        jt_r.swap(col, pivot);
        for row in col + 1..n {
            let f = jt_j[row][col] / jt_j[col][col];
            for c in col..n {
                jt_j[row][c] -= f * jt_j[col][c];
            }
            jt_r[row] -= f * jt_r[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = jt_r[row];
        for c in row + 1..n {
            acc -= jt_j[row][c] * x[c];
        }
        x[row] = acc / jt_j[row][row];
    }
    Some(x)
}

/// Least-squares fit of the free parameters against measured latencies,
/// minimizing relative error. Gauss-Newton in log-parameter space with a
/// halving line search; parameters stay positive by construction.
pub fn calibrate_profile(
    observations: &[(Workload, f64)],
    initial: &PlatformProfile,
    free: &[FreeParam],
) -> Result<FitResult> {
    if free.is_empty() {
        return Ok(FitResult {
            profile: initial.clone(),
            residuals: residuals_at(observations, initial, free, &[]),
            iterations: 0,
        });
    }
    if observations.len() < free.len().max(2) {
        return Err(Error::Underdetermined {
            observations: observations.len(),
            params: free.len(),
        });
    }
    for (_, obs) in observations {
        if !(obs.is_finite() && *obs > 0.0) {
            return Err(Error::InvalidParam("observed latency must be positive".into()));
        }
    }

    let mut theta: Vec<f64> = free
        .iter()
        .map(|p| match p {
            FreeParam::PeakMacRate => initial.peak_mac_rate.ln(),
            FreeParam::UtilScale => 0.0,
            FreeParam::FixedOverhead => initial.fixed_overhead_s.max(1e-12).ln(),
            FreeParam::OffchipBandwidth => initial.offchip_bandwidth.ln(),
        })
        .collect();
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut r = residuals_at(observations, initial, free, &theta);
    let mut c = cost(&r);

    for iter in 0..FIT_MAX_ITERATIONS {
        // numeric Jacobian, central differences in log space
        let h = 1e-6;
        let mut jac: Vec<Vec<f64>> = Vec::with_capacity(free.len());
        for j in 0..free.len() {
            let mut plus = theta.clone();
            plus[j] += h;
            let mut minus = theta.clone();
            minus[j] -= h;
            let rp = residuals_at(observations, initial, free, &plus);
            let rm = residuals_at(observations, initial, free, &minus);
            jac.push(
                rp.iter()
                    .zip(&rm)
                    .map(|(a, b)| (a - b) / (2.0 * h))
                    .collect(),
            );
        }
        let n = free.len();
        let mut jt_j = vec![vec![0.0; n]; n];
        let mut jt_r = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                jt_j[a][b] = jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum();
            }
            jt_r[a] = -jac[a].iter().zip(&r).map(|(x, y)| x * y).sum::<f64>();
        }
        let Some(step) = solve_normal_equations(&mut jt_j, &mut jt_r) else {
            return Err(Error::NonConvergence(iter));
        };

        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&step)
                .map(|(t, s)| t + alpha * s)
                .collect();
            let tr = residuals_at(observations, initial, free, &trial);
            let tc = cost(&tr);
            if tc < c {
                theta = trial;
                r = tr;
                let delta = c - tc;
                c = tc;
                improved = true;
                if delta < 1e-24 {
                    break;
                }
                break;
            }
            alpha *= 0.5;
        }
        let step_norm: f64 = step.iter().map(|s| (alpha * s).abs()).fold(0.0, f64::max);
        if !improved || step_norm < 1e-12 || c < 1e-24 {
            return Ok(FitResult {
                profile: apply_params(initial, free, &theta),
                residuals: r,
                iterations: iter + 1,
            });
        }
    }
    Err(Error::NonConvergence(FIT_MAX_ITERATIONS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simple_workload(conv_macs: u64, dense_macs: u64, size_kib: f64) -> Workload {
        Workload {
            name: "test".into(),
            layers: vec![(LayerKind::Conv2d, conv_macs), (LayerKind::Dense, dense_macs)],
            size_kib,
        }
    }

    #[test]
    fn mac_counts_match_hand_values() {
        let ff2 = Workload::from_spec(FamilySpec::Ff { hidden_layers: 2 }).unwrap();
        let (layers, total) = mac_count(&ff2);
        assert_eq!(layers[0], (LayerKind::Dense, 3_900));
        assert_eq!(layers[1], (LayerKind::Dense, 10_000));
        assert_eq!(layers[2], (LayerKind::Dense, 200));
        assert_eq!(total, 14_100);

        let cnn = Workload::from_spec(FamilySpec::CnnSmall {
            kernels: 8,
            kernel_size: 2,
        })
        .unwrap();
        // first conv on the 8x8 grid: 8*8*4*1*8
        assert_eq!(cnn.layers[0], (LayerKind::Conv2d, 2_048));
    }

    #[test]
    fn workload_views_agree() {
        let spec = FamilySpec::CnnSmall {
            kernels: 16,
            kernel_size: 3,
        };
        let from_spec = Workload::from_spec(spec).unwrap();
        let net = crate::model::build_network(spec, 1).unwrap();
        let from_net = Workload::from_network(&net).unwrap();
        assert_eq!(from_spec.layers, from_net.layers);
        assert_eq!(from_spec.size_kib, from_net.size_kib);
    }

    #[test]
    fn partition_examples() {
        let accel = PlatformProfile::accel_default();
        assert_eq!(memory_partition(4000.0, &accel), (4000.0, 0.0));
        assert_eq!(memory_partition(12_000.0, &accel), (8000.0, 4000.0));
        assert_eq!(memory_partition(0.0, &accel), (0.0, 0.0));
    }

    #[test]
    fn latency_pure_compute_example() {
        let profile = PlatformProfile {
            name: "unit".into(),
            peak_mac_rate: 1e9,
            util_conv: 1.0,
            util_dense: 1.0,
            onchip_capacity_kib: 1e9,
            offchip_bandwidth: 1e9,
            fixed_overhead_s: 0.0,
            active_power_w: 1.0,
        };
        let w = simple_workload(1_000_000, 0, 10.0);
        let est = estimate_latency(&w, &profile);
        assert_eq!(est.latency_s, 1.0e-3);
        assert_eq!(est.stream_s, 0.0);
    }

    #[test]
    fn latency_pure_stream_example() {
        let profile = PlatformProfile {
            name: "unit".into(),
            peak_mac_rate: 1e18,
            util_conv: 1.0,
            util_dense: 1.0,
            onchip_capacity_kib: 8000.0,
            offchip_bandwidth: (1u64 << 30) as f64,
            fixed_overhead_s: 0.0,
            active_power_w: 1.0,
        };
        let w = simple_workload(1, 0, 12_000.0);
        let est = estimate_latency(&w, &profile);
        assert_eq!(est.stream_s, 4_096_000.0 / (1u64 << 30) as f64);
        assert_relative_eq!(est.latency_s, 3.814697265625e-3);
        assert_eq!((est.onchip_kib, est.offchip_kib), (8000.0, 4000.0));
    }

    #[test]
    fn energy_and_efficiency_arithmetic() {
        let mut profile = PlatformProfile::cpu_default();
        profile.active_power_w = 2.0;
        profile.fixed_overhead_s = 0.0;
        profile.peak_mac_rate = 1e9;
        let w = simple_workload(0, 1_000_000, 1.0);
        let est = estimate_energy(&w, &profile);
        assert_relative_eq!(est.energy_j, 2.0e-3);
        assert_relative_eq!(est.efficiency_inf_per_mj, 0.5);

        // halving latency doubles efficiency at fixed power
        let w2 = simple_workload(0, 500_000, 1.0);
        let est2 = estimate_energy(&w2, &profile);
        assert_relative_eq!(est2.efficiency_inf_per_mj, 2.0 * est.efficiency_inf_per_mj);
    }

    #[test]
    fn partition_conserves_mass_over_random_sizes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let accel = PlatformProfile::accel_default();
        for _ in 0..1000 {
            let size = rng.gen_range(0.0..10.0 * accel.onchip_capacity_kib);
            let (on, off) = memory_partition(size, &accel);
            assert_eq!(on + off, size);
            assert!(on <= accel.onchip_capacity_kib);
            assert!(on >= 0.0 && off >= 0.0);
        }
    }

    #[test]
    fn latency_monotone_in_size_within_each_family() {
        for family in ["ff", "cnn_small", "cnn_deep"] {
            for profile in [PlatformProfile::accel_default(), PlatformProfile::cpu_default()] {
                let mut points: Vec<(f64, f64, f64)> = crate::model::sweep_specs(family)
                    .unwrap()
                    .into_iter()
                    .map(|s| {
                        let w = Workload::from_spec(s).unwrap();
                        let est = estimate_energy(&w, &profile);
                        (w.size_kib, est.latency_s, est.energy_j)
                    })
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                for pair in points.windows(2) {
                    assert!(pair[1].1 >= pair[0].1, "{family} latency not monotone");
                    assert!(pair[1].2 >= pair[0].2, "{family} energy not monotone");
                }
            }
        }
    }

    #[test]
    fn profile_file_round_trip_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("accel.profile");
        let profile = PlatformProfile::accel_default();
        profile.to_file(&path).unwrap();
        let loaded = PlatformProfile::from_file(&path).unwrap();
        assert_eq!(profile, loaded);
        assert_eq!(
            PlatformProfile::by_name_or_path("cpu-default").unwrap(),
            PlatformProfile::cpu_default()
        );
        assert!(PlatformProfile::by_name_or_path("missing.profile").is_err());
    }

    #[test]
    fn profile_validation_rejects_bad_utilization() {
        let mut p = PlatformProfile::accel_default();
        p.util_conv = 1.5;
        assert!(p.validate().is_err());
        p.util_conv = 0.0;
        assert!(p.validate().is_err());
    }

    fn synthetic_observations(truth: &PlatformProfile) -> Vec<(Workload, f64)> {
        let mut obs = Vec::new();
        for spec in crate::model::sweep_specs("ff").unwrap() {
            let w = Workload::from_spec(spec).unwrap();
            let lat = estimate_latency(&w, truth).latency_s;
            obs.push((w, lat));
        }
        for spec in crate::model::sweep_specs("cnn_deep").unwrap() {
            let w = Workload::from_spec(spec).unwrap();
            let lat = estimate_latency(&w, truth).latency_s;
            obs.push((w, lat));
        }
        obs
    }

    #[test]
    fn fit_recovers_known_profile_within_five_percent() {
        let truth = PlatformProfile::accel_default();
        let observations = synthetic_observations(&truth);
        let mut initial = truth.clone();
        initial.peak_mac_rate *= 1.7;
        initial.fixed_overhead_s *= 0.4;
        initial.offchip_bandwidth *= 2.3;
        let free = [
            FreeParam::PeakMacRate,
            FreeParam::FixedOverhead,
            FreeParam::OffchipBandwidth,
        ];
        let fit = calibrate_profile(&observations, &initial, &free).unwrap();
        assert_relative_eq!(fit.profile.peak_mac_rate, truth.peak_mac_rate, max_relative = 0.05);
        assert_relative_eq!(
            fit.profile.fixed_overhead_s,
            truth.fixed_overhead_s,
            max_relative = 0.05
        );
        assert_relative_eq!(
            fit.profile.offchip_bandwidth,
            truth.offchip_bandwidth,
            max_relative = 0.05
        );
    }

    #[test]
    fn fit_single_overhead_is_exact_on_exact_data() {
        let truth = PlatformProfile::cpu_default();
        let observations = synthetic_observations(&truth);
        let mut initial = truth.clone();
        initial.fixed_overhead_s = 5.0e-4;
        let fit = calibrate_profile(&observations, &initial, &[FreeParam::FixedOverhead]).unwrap();
        assert_relative_eq!(
            fit.profile.fixed_overhead_s,
            truth.fixed_overhead_s,
            max_relative = 1e-6
        );
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-8));
    }

    #[test]
    fn fit_with_no_free_params_is_identity() {
        let truth = PlatformProfile::cpu_default();
        let observations = synthetic_observations(&truth);
        let fit = calibrate_profile(&observations, &truth, &[]).unwrap();
        assert_eq!(fit.profile, truth);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn fit_rejects_too_few_observations() {
        let truth = PlatformProfile::cpu_default();
        let w = Workload::from_spec(FamilySpec::Ff { hidden_layers: 2 }).unwrap();
        let obs = vec![(w, 1.0e-3)];
        assert!(matches!(
            calibrate_profile(&obs, &truth, &[FreeParam::PeakMacRate, FreeParam::FixedOverhead]),
            Err(Error::Underdetermined { .. })
        ));
    }
}
