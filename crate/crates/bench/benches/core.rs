use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use mfcnet::controller::{estimate_f_integral, estimate_f_loop};
use mfcnet::transport::{decode, encode};
use mfcnet::{find, run, RunMode};
use mfcnet_bench::{control_datagram, window};

fn estimators(c: &mut Criterion) {
    let tank = window(30, 0.1);
    let aero = window(50, 0.01);
    c.bench_function("integral/tank window", |b| {
        b.iter(|| estimate_f_integral(black_box(&tank), 3.0, 0.1).unwrap())
    });
    c.bench_function("integral/aero window", |b| {
        b.iter(|| estimate_f_integral(black_box(&aero), 0.5, 5.0).unwrap())
    });
    c.bench_function("loop/aero window", |b| {
        b.iter(|| estimate_f_loop(black_box(&aero), 0.5, 5.0, -10.0).unwrap())
    });
}

fn codec(c: &mut Criterion) {
    let d = control_datagram(12345);
    let bytes = encode(&d).unwrap();
    c.bench_function("codec/encode", |b| b.iter(|| encode(black_box(&d)).unwrap()));
    c.bench_function("codec/decode", |b| b.iter(|| decode(black_box(&bytes)).unwrap()));
}

fn runs(c: &mut Criterion) {
    let tank = find("tank-1").unwrap();
    let mut g = c.benchmark_group("lockstep");
    g.sample_size(20);
    g.bench_function("tank-1", |b| b.iter(|| run(black_box(&tank), RunMode::lockstep()).unwrap()));
    g.finish();
}

criterion_group!(benches, estimators, codec, runs);
criterion_main!(benches);
