use std::sync::Arc;

use autofocus::mock_world::{benchmark_items, render_scene, BenchmarkSpec, MockVisionModel};
use autofocus::pipeline::{run, Backends, PipelineConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn mock_query(c: &mut Criterion) {
    let items = benchmark_items(&BenchmarkSpec {
        n_scenes: 4,
        ..Default::default()
    })
    .unwrap();
    let model = MockVisionModel::default();
    let images: Vec<_> = items
        .iter()
        .map(|i| Arc::new(render_scene(&i.scene)))
        .collect();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for (name, refine) in [("baseline", false), ("full", true)] {
        let cfg = PipelineConfig {
            refinement_enabled: refine,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                for (item, img) in items.iter().zip(&images) {
                    run(
                        img.clone(),
                        &item.target().instruction(),
                        &cfg,
                        Backends::single(&model),
                    )
                    .unwrap();
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, mock_query);
criterion_main!(benches);
