use criterion::{criterion_group, criterion_main, Criterion};
use metatta_bench::{desk_model, inner_stream};
use metatta_core::meta::{inner_loop_with, ssl_step, InnerMode};
use metatta_core::tensor::Conv2dOpts;
use metatta_core::{Tape, Tensor};

fn conv2d(c: &mut Criterion) {
    let x = Tensor::<f32>::new(vec![4, 16, 16, 16], (0..4 * 16 * 256).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
    let w = Tensor::<f32>::new(vec![16, 16, 5, 5], (0..16 * 16 * 25).map(|i| (i % 5) as f32 * 0.01).collect()).unwrap();
    c.bench_function("conv2d_fwd_bwd_4x16x16x16_k5", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x).unwrap();
            let wv = tape.leaf(&w).unwrap();
            let y = tape.conv2d(xv, wv, None, Conv2dOpts { stride: 1, padding: 2 }).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap()
        })
    });
}

fn adaptation_step(c: &mut Criterion) {
    let (net, params) = desk_model();
    let stream = inner_stream();
    let x = stream.input(0).unwrap();
    c.bench_function("ssl_step_single_sample", |b| {
        b.iter(|| {
            let mut p = params.clone();
            ssl_step(&net, &mut p, &x, 3e-4, 1.0).unwrap()
        })
    });
}

fn inner_loop(c: &mut Criterion) {
    let (net, params) = desk_model();
    let stream = inner_stream();
    let mut group = c.benchmark_group("inner_loop_d3_k5");
    group.sample_size(20);
    for (name, record) in [("first_order", false), ("recorded", true)] {
        group.bench_function(name, |b| b.iter(|| inner_loop_with(&net, &params, &stream, 3e-3, InnerMode::Sequential, record).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, conv2d, adaptation_step, inner_loop);
criterion_main!(benches);
