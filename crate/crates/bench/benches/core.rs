// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sublab_bench::{desk_params, token_stream};
use sublab_core::analysis::overlap_test;
use sublab_core::bigram::count_bigrams;
use sublab_core::mask::{mask_objective, random_matched_mask, MaskProvenance, TargetKind};
use sublab_core::model::forward;
use sublab_core::{BinaryMask, MaskSet, Tensor};

fn matmul(c: &mut Criterion) {
    let a = Tensor::<f32>::from_fn(&[1024, 64], |i| (i % 7) as f32 * 0.1);
    let b = Tensor::<f32>::from_fn(&[64, 256], |i| (i % 5) as f32 * 0.1);
    c.bench_function("matmul 1024x64x256", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let p = desk_params();
    let stream = token_stream(16 * 64, 1024);
    let ids: Vec<usize> = stream.ids.iter().map(|&i| i as usize).collect();
    c.bench_function("forward desk batch 16x64", |bench| {
        bench.iter(|| forward(&p, black_box(&ids), 16, false, None).unwrap())
    });

    let mask = MaskSet::<f32>::filled(&p, 0.0, 10.0, TargetKind::Bigram, 1.0).unwrap();
    let ids = &ids[..4 * 64];
    let targets = vec![1.0 / 1024.0; ids.len() * 1024];
    let mut g = c.benchmark_group("mask");
    g.sample_size(10);
    g.bench_function("objective+grad desk batch 4x64", |bench| {
        bench.iter(|| mask_objective(&p, &mask, black_box(ids), 4, &targets, false).unwrap())
    });
    // Late in training most entries sit far below zero at a small temperature.
    let mut late = MaskSet::<f32>::filled(&p, -1.0, 10.0, TargetKind::Bigram, 1.0).unwrap();
    late.temperature = 0.01;
    g.bench_function("objective+grad saturated batch 4x64", |bench| {
        bench.iter(|| mask_objective(&p, &late, black_box(ids), 4, &targets, false).unwrap())
    });
    g.finish();
}

fn counting(c: &mut Criterion) {
    let stream = token_stream(1_000_000, 1024);
    c.bench_function("count bigrams 1M tokens", |bench| {
        bench.iter(|| count_bigrams(black_box(&stream), 1024, 1e-6).unwrap())
    });

    let p = desk_params();
    let mut m = BinaryMask::constant(&p, false, MaskProvenance::manual("bench"));
    for bits in &mut m.bits {
        let k = bits.len() / 20;
        bits[..k].iter_mut().for_each(|b| *b = true);
    }
    let a = random_matched_mask(&m, 1);
    let b = random_matched_mask(&m, 2);
    let mut g = c.benchmark_group("overlap");
    g.sample_size(10);
    g.bench_function("overlap null 1000 samples", |bench| {
        bench.iter(|| overlap_test(&a, &b, 1000, 0).unwrap())
    });
    g.finish();
}

criterion_group!(benches, matmul, model, counting);
criterion_main!(benches);
