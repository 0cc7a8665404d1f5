use std::hint::black_box;

use autofocus::field::{grid_moments, mixture_moments};
use autofocus::geometry::ImageSize;
use autofocus::proposals::{nms, plan_focus, ProposalConfig};
use autofocus::uncertainty::UncertaintyConfig;
use autofocus_bench::{boxes, kernels, samples};
use criterion::{criterion_group, criterion_main, Criterion};

fn moments(c: &mut Criterion) {
    let k = kernels(1, 5);
    c.bench_function("mixture_moments/5", |b| {
        b.iter(|| mixture_moments(black_box(&k)))
    });
    let extent = ImageSize::new(1200, 900).unwrap();
    c.bench_function("grid_moments/5/cell4", |b| {
        b.iter(|| grid_moments(black_box(&k), 4.0, extent))
    });
}

fn suppression(c: &mut Criterion) {
    let (bx, sc) = boxes(2, 8);
    c.bench_function("nms/8", |b| {
        b.iter(|| nms(black_box(&bx), black_box(&sc), 0.5, 3))
    });
    let (bx, sc) = boxes(3, 256);
    c.bench_function("nms/256", |b| {
        b.iter(|| nms(black_box(&bx), black_box(&sc), 0.5, 16))
    });
}

fn focus(c: &mut Criterion) {
    let s = samples(4, 5);
    let (u, p) = (UncertaintyConfig::default(), ProposalConfig::default());
    let image = ImageSize::new(1920, 1080).unwrap();
    c.bench_function("plan_focus/5", |b| {
        b.iter(|| plan_focus(black_box(&s), &u, &p, image))
    });
}

criterion_group!(benches, moments, suppression, focus);
criterion_main!(benches);
