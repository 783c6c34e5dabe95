use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use crowdped_bench::{crowded_detections, random_boxes};
use crowdped_core::data::{generate_scene, SceneSpec};
use crowdped_core::geometry::iou;
use crowdped_core::netcore::{roi_align_batch, FeatureMap};
use crowdped_core::pipeline::{InferConfig, Model, ModelConfig, Variant};
use crowdped_core::postprocess::{greedy_nms, NmsMode};
use ndarray::Array3;

fn bench_iou(c: &mut Criterion) {
    let boxes = random_boxes(100, 128.0, 1);
    c.bench_function("iou 100x100", |b| {
        b.iter(|| {
            let mut s = 0.0;
            for p in &boxes {
                for q in &boxes {
                    s += iou(black_box(p), black_box(q));
                }
            }
            s
        })
    });
}

fn bench_nms(c: &mut Criterion) {
    let dets = crowded_detections(300, 2);
    let mut g = c.benchmark_group("greedy_nms 300");
    for (name, mode) in [("full", NmsMode::Full), ("visible", NmsMode::Visible)] {
        g.bench_function(name, |b| b.iter(|| greedy_nms(black_box(&dets), mode, 0.5).unwrap()));
    }
    g.finish();
}

fn bench_roi_align(c: &mut Criterion) {
    let fm = FeatureMap {
        values: Array3::from_shape_fn((32, 16, 16), |(k, i, j)| ((k * 31 + i * 7 + j) % 13) as f64 / 13.0),
        stride: 8,
    };
    let boxes = random_boxes(64, 128.0, 3);
    c.bench_function("roi_align 64 boxes 7x7x32", |b| b.iter(|| roi_align_batch(&fm, black_box(&boxes), 7).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let scene = generate_scene(&SceneSpec::default(), 4).unwrap();
    let mut g = c.benchmark_group("infer 128x128");
    g.sample_size(20);
    for variant in [Variant::F, Variant::V2F] {
        let model = Model::new(variant, &ModelConfig::default());
        let params = model.init_params(0);
        let config = InferConfig::default();
        g.bench_function(variant.to_string(), |b| b.iter(|| model.infer(&params, black_box(&scene.image), &config).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_iou, bench_nms, bench_roi_align, bench_forward);
criterion_main!(benches);
