use criterion::{black_box, criterion_group, criterion_main, Criterion};

use advdet_core::data::{generate_synthetic, RegisteredDataset, Split, SyntheticSceneSpec};
use advdet_core::defenses::{down_up_sample, tv_denoise};
use advdet_core::detector::{default_classes, Architecture, Detector, DetectorModel};
use advdet_core::geometry::Point;
use advdet_core::registration::{composite, estimate_homography, PlanarCorrespondenceSet};

fn fixture() -> RegisteredDataset {
    let spec = SyntheticSceneSpec {
        sequences: 2,
        ..SyntheticSceneSpec::default()
    };
    let generated = generate_synthetic(&spec, None).expect("synthetic dataset");
    RegisteredDataset::from_generated(&generated).expect("registration")
}

fn registration(c: &mut Criterion) {
    let dataset = fixture();
    let (frames, views) = dataset.all();
    let texture = dataset.texture.texture_map().expect("texture");
    c.bench_function("composite", |b| {
        b.iter(|| composite(black_box(&frames[0].image), &texture, &views[0]).unwrap())
    });

    let pairs: Vec<(Point, Point)> = (0..12)
        .map(|i| {
            let (x, y) = ((i % 4) as f64 * 40.0, (i / 4) as f64 * 40.0);
            let w = 1.0 + 0.001 * x - 0.0005 * y;
            ([x, y], [(1.1 * x + 0.1 * y + 20.0) / w, (0.95 * y - 0.05 * x + 7.0) / w])
        })
        .collect();
    let corr = PlanarCorrespondenceSet::new(pairs).unwrap();
    c.bench_function("estimate_homography_12", |b| b.iter(|| estimate_homography(black_box(&corr)).unwrap()));
}

fn detectors(c: &mut Criterion) {
    let dataset = fixture();
    let (frames, _) = dataset.split(Split::Train);
    let image = &frames[0].image;
    for (name, arch) in [("grid", Architecture::grid()), ("two_stage", Architecture::two_stage())] {
        let model = DetectorModel::new(name, arch, default_classes(), 0);
        c.bench_function(&format!("forward_{name}"), |b| b.iter(|| model.forward(black_box(image)).unwrap()));
    }
}

fn defenses(c: &mut Criterion) {
    let dataset = fixture();
    let (frames, _) = dataset.all();
    let image = &frames[0].image;
    c.bench_function("down_up", |b| b.iter(|| down_up_sample(black_box(image)).unwrap()));
    let mut group = c.benchmark_group("tv");
    group.sample_size(10);
    group.bench_function("tv_denoise_0.1", |b| b.iter(|| tv_denoise(black_box(image), 0.1).unwrap()));
    group.finish();
}

criterion_group!(benches, registration, detectors, defenses);
criterion_main!(benches);
