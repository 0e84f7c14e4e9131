//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use advdet_core::attack::{evaluate_objective, prepare_views, AttackConfig};
use advdet_core::data::{Distance, Split};
use advdet_core::detector::{default_classes, Architecture, DetectorModel};
use advdet_core::evaluation::FactorRecord;
use advdet_core::image::{Image, Mask};
use advdet_core::registration::{backproject_gradient, composite, Frame, FrameMeta, Homography, TextureMap, ViewMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

pub fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, 3, |_, _, _| rng.gen_range(0.2..0.8))
}

pub fn untrained_models() -> Vec<DetectorModel> {
    vec![
        DetectorModel::new("grid", Architecture::grid(), default_classes(), 11),
        DetectorModel::new("two_stage", Architecture::two_stage(), default_classes(), 12),
    ]
}

pub fn octagon_mask(size: usize) -> Mask {
    let c = (size as f64 - 1.0) / 2.0;
    Mask::from_fn(size, size, |x, y| {
        let (dx, dy) = ((x as f64 - c).abs(), (y as f64 - c).abs());
        dx.max(dy) <= 0.45 * size as f64 && dx + dy <= 0.6 * size as f64
    })
}

pub fn oblique_view(illumination: f64) -> ViewMap {
    let h = Homography::from_rows([[1.1, 0.15, 20.0], [-0.1, 1.05, 12.0], [0.0015, -0.001, 1.0]]).unwrap();
    ViewMap::new(h, illumination).unwrap()
}

fn perturbed_texture(rng: &mut ChaCha8Rng, seed: u64) -> TextureMap {
    let mut texture = TextureMap::perturbable(random_image(40, 40, seed), octagon_mask(40)).unwrap();
    texture.pixels.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    texture
}

/// Worst relative error between central differences of `f` and `grad` over
/// `count` random channels of texels inside the mask.
fn worst_texel_error(
    rng: &mut ChaCha8Rng,
    texture: &TextureMap,
    grad: &Image,
    count: usize,
    f: impl Fn(&TextureMap) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < count {
        let (x, y, c) = (rng.gen_range(0..texture.width()), rng.gen_range(0..texture.height()), rng.gen_range(0..3));
        if !texture.mask.get(x, y) {
            continue;
        }
        let i = texture.pixels.index(x, y, c);
        let mut plus = texture.clone();
        plus.pixels.data_mut()[i] += h;
        let mut minus = texture.clone();
        minus.pixels.data_mut()[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(fd, grad.data()[i]));
        checked += 1;
    }
    worst
}

/// Backprojected gradient of a random linear functional of the composite.
pub fn backprojection_worst_error(texels: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = random_image(90, 70, 5);
    let texture = perturbed_texture(&mut rng, 6);
    let view = oblique_view(0.8);
    let weights = Image::from_fn(90, 70, 3, |_, _, _| rng.gen_range(-1.0..1.0));
    let grad = backproject_gradient(&weights, &view, &texture).unwrap();
    worst_texel_error(&mut rng, &texture, &grad, texels, |t| composite(&frame, t, &view).unwrap().dot(&weights))
}

/// Objective gradient (scores through an untrained detector plus the L2
/// penalty) with the box sets held fixed.
pub fn objective_worst_error(texels: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let texture = perturbed_texture(&mut rng, 8);
    let frames: Vec<Frame> = (0..2)
        .map(|k| Frame {
            image: random_image(96, 80, 20 + k),
            object_polygon: vec![[20.0, 12.0], [70.0, 12.0], [70.0, 60.0], [20.0, 60.0]],
            meta: FrameMeta {
                sequence_id: format!("s{k}"),
                index: 0,
                split: Split::Train,
                distance: Distance::Near,
                condition: "sky".into(),
            },
        })
        .collect();
    let views = vec![oblique_view(1.0), oblique_view(0.9)];
    let prepared = prepare_views(&frames, &views, &texture).unwrap();
    let model = &untrained_models()[0];
    let config = AttackConfig {
        lambda_l2: 0.3,
        ..AttackConfig::default()
    };
    let sets: Vec<Vec<usize>> = vec![vec![0, 7, 9, 12], vec![3, 8]];
    let eval = evaluate_objective(&texture, &prepared, model, &config, Some(&sets), true).unwrap();
    let grad = eval.gradient.unwrap();
    worst_texel_error(&mut rng, &texture, &grad, texels, |t| {
        evaluate_objective(t, &prepared, model, &config, Some(&sets), false).unwrap().value
    })
}

/// Random texture with energy only in spatial frequencies up to `cutoff`,
/// rescaled into [0.2, 0.8].
pub fn band_limited(size: usize, cutoff: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_inverse(size);
    let mut channels = Vec::new();
    for _ in 0..3 {
        let mut spec = vec![Complex::new(0.0, 0.0); size * size];
        for ky in 0..=cutoff {
            for kx in 0..=cutoff {
                for (sy, sx) in [(ky, kx), ((size - ky) % size, kx)] {
                    spec[sy * size + sx] = Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
        }
        // Rows, then columns.
        for row in spec.chunks_mut(size) {
            fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); size];
        for x in 0..size {
            for y in 0..size {
                col[y] = spec[y * size + x];
            }
            fft.process(&mut col);
            for y in 0..size {
                spec[y * size + x] = col[y];
            }
        }
        channels.push(spec.into_iter().map(|c| c.re).collect::<Vec<f64>>());
    }
    let (lo, hi) = channels
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Image::from_fn(size, size, 3, |x, y, c| 0.2 + 0.6 * (channels[c][y * size + x] - lo) / (hi - lo))
}

/// Forward warp into a frame, then the inverse warp back to root coordinates.
pub fn round_trip_error(texture: &Image, h: Homography, margin: usize) -> f64 {
    let size = texture.width();
    let full = Mask::from_fn(size, size, |_, _| true);
    let forward = TextureMap::new(texture.clone(), full).unwrap();
    let blank = Image::from_fn(320, 240, 3, |_, _, _| 0.0);
    let frame = composite(&blank, &forward, &ViewMap::new(h, 1.0).unwrap()).unwrap();

    let whole = Mask::from_fn(frame.width(), frame.height(), |_, _| true);
    let back = TextureMap::new(frame, whole).unwrap();
    let canvas = Image::from_fn(size, size, 3, |_, _, _| 0.0);
    let recovered = composite(&canvas, &back, &ViewMap::new(h.inverse(), 1.0).unwrap()).unwrap();

    let mut worst = 0.0f64;
    for y in margin..size - margin {
        for x in margin..size - margin {
            for c in 0..3 {
                worst = worst.max((recovered.get(x, y, c) - texture.get(x, y, c)).abs());
            }
        }
    }
    worst
}

/// Success log-odds `-0.4 + 1.5·[detector = two_stage] - 1.2·[distance = far]`;
/// physical flag, condition and tier have no effect.
pub fn sparse_records(n: usize, seed: u64) -> Vec<FactorRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let detector = if rng.gen_bool(0.5) { "two_stage" } else { "grid" };
            let distance = Distance::ALL[rng.gen_range(0..3)];
            let logit: f64 = -0.4 + if detector == "two_stage" { 1.5 } else { 0.0 }
                - if distance == Distance::Far { 1.2 } else { 0.0 };
            FactorRecord {
                detector: detector.into(),
                physical: rng.gen_bool(0.5),
                distance,
                condition: if rng.gen_bool(0.5) { "tree" } else { "sky" }.into(),
                tier: ["small", "large"][rng.gen_range(0..2)].into(),
                success: rng.gen::<f64>() < 1.0 / (1.0 + (-logit).exp()),
            }
        })
        .collect()
}

