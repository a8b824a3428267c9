use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use isdet_bench::filled;
use isdet_core::attention::{fcgsa, reassemble, reconstruct, split_qkv};
use isdet_core::layers::{conv2d, ConvSpec};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for side in [16, 32, 64] {
        let spec = ConvSpec::same(32, 32, 3, false);
        let x = filled(&[1, 32, side, side]);
        let w = filled(&[32, 32, 3, 3]);
        group.throughput(Throughput::Elements((side * side) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| conv2d(black_box(&x), &w, None, &spec).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("fcgsa");
    for side in [32, 64, 128] {
        let l = (side / 4) * (side / 4);
        let (q, k, v) = (filled(&[1, 16, 8, l]), filled(&[1, 16, 8, l]), filled(&[1, 16, 8, l]));
        group.throughput(Throughput::Elements((side * side) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| fcgsa(black_box(&q), &k, &v).unwrap())
        });
    }
    group.finish();
}

fn patches(c: &mut Criterion) {
    let mut group = c.benchmark_group("reconstruct");
    for side in [32, 64, 128] {
        let x = filled(&[1, 24, side, side]);
        group.throughput(Throughput::Elements((side * side) as u64));
        group.bench_with_input(BenchmarkId::new("reconstruct", side), &side, |b, _| {
            b.iter(|| reconstruct(black_box(&x), 4).unwrap())
        });
        let y = reconstruct(&x, 4).unwrap();
        group.bench_with_input(BenchmarkId::new("reassemble", side), &side, |b, &s| {
            b.iter(|| reassemble(black_box(&y), 4, s, s).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("pipeline", side), &side, |b, &s| {
            b.iter(|| {
                let (q, k, v) = split_qkv(&reconstruct(black_box(&x), 4).unwrap()).unwrap();
                reassemble(&fcgsa(&q, &k, &v).unwrap(), 4, s, s).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, attention, patches);
criterion_main!(benches);
