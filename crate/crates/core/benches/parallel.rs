//! Parallel vs sequential throughput for the data-parallel inner loops.
//!
//! Each group benches the default (rayon when the `parallel` feature is on)
//! entry point against its sequential twin on the same inputs. Building with
//! `--no-default-features` makes both sides run the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use enid_core::dataset::synth_flows;
use enid_core::engine::{infer_batch, infer_batch_seq};
use enid_core::model::{build_cnn_small, build_ff};
use enid_core::quantizer::calibrate_and_quantize;
use enid_core::trainer::{forward_batch, forward_batch_seq};

fn bench_forward_batch(c: &mut Criterion) {
    let net = build_ff(8, 1).unwrap();
    let data = synth_flows(2048, 0.5, 1).unwrap();
    let mut group = c.benchmark_group("forward_batch_ff8_2048rows");
    group.bench_with_input(BenchmarkId::new("parallel", 2048), &data, |b, d| {
        b.iter(|| forward_batch(&net, &d.data).unwrap())
    });
    group.bench_with_input(BenchmarkId::new("sequential", 2048), &data, |b, d| {
        b.iter(|| forward_batch_seq(&net, &d.data).unwrap())
    });
    group.finish();
}

fn bench_int8_infer(c: &mut Criterion) {
    let net = build_cnn_small(16, 3, 2).unwrap();
    let data = synth_flows(2048, 0.5, 2).unwrap();
    let q = calibrate_and_quantize(&net, &data).unwrap();
    let mut group = c.benchmark_group("int8_infer_cnn16x3_2048rows");
    group.bench_with_input(BenchmarkId::new("parallel", 2048), &data, |b, d| {
        b.iter(|| infer_batch(&q, &d.data).unwrap())
    });
    group.bench_with_input(BenchmarkId::new("sequential", 2048), &data, |b, d| {
        b.iter(|| infer_batch_seq(&q, &d.data).unwrap())
    });
    group.finish();
}

fn bench_synth_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth_flows_50k");
    group.sample_size(10);
    group.bench_function("parallel_rows", |b| {
        b.iter(|| synth_flows(50_000, 0.5, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_forward_batch, bench_int8_infer, bench_synth_generation);
criterion_main!(benches);
