//! Invariants over randomized inputs.

use advdet_core::attack::{descent_direction, linf_distance, step, AttackConfig};
use advdet_core::data::{Distance, Split};
use advdet_core::defenses::{down_up_sample, total_variation, tv_denoise, tv_objective};
use advdet_core::detector::{nms, DetectionBox};
use advdet_core::evaluation::{parse_csv, to_csv, CellKey, DetectionRateReport, FrameEvaluation};
use advdet_core::geometry::Rect;
use advdet_core::image::{Image, Mask};
use advdet_core::registration::TextureMap;
use proptest::prelude::*;

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..=1.0f64, w * h * 3).prop_map(move |v| Image::from_fn(w, h, 3, |x, y, c| v[(y * w + x) * 3 + c]))
}

fn rect() -> impl Strategy<Value = Rect> {
    (0.0..100.0f64, 0.0..100.0f64, 1.0..60.0f64, 1.0..60.0f64).prop_map(|(x, y, w, h)| Rect::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn signed_steps_stay_in_range_and_within_epsilon(
        pixels in image(12, 10),
        grad in prop::collection::vec(-1.0..1.0f64, 12 * 10 * 3),
        eps in 0.0..0.1f64,
        steps in 1usize..6,
    ) {
        let mask = Mask::from_fn(12, 10, |x, y| (x + y) % 3 != 0);
        let mut texture = TextureMap::perturbable(pixels, mask.clone()).unwrap();
        let config = AttackConfig { epsilon: eps, ..AttackConfig::default() };
        let gradient = Image::from_fn(12, 10, 3, |x, y, c| grad[(y * 12 + x) * 3 + c]);
        let direction = descent_direction(&gradient);
        for _ in 0..steps {
            let next = step(&texture, &direction, &config).unwrap();
            for y in 0..10 {
                for x in 0..12 {
                    for c in 0..3 {
                        let (a, b) = (texture.pixels.get(x, y, c), next.pixels.get(x, y, c));
                        prop_assert!((0.0..=1.0).contains(&b));
                        if mask.get(x, y) {
                            prop_assert!((a - b).abs() <= eps + 1e-15);
                        } else {
                            prop_assert_eq!(a, b);
                        }
                    }
                }
            }
            texture = next;
        }
        prop_assert!(linf_distance(&texture).unwrap() <= steps as f64 * eps + 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in rect(), b in rect()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_sorted_non_overlapping_subset(
        boxes in prop::collection::vec((rect(), 0.0..1.0f64), 0..30),
        threshold in 0.1..0.9f64,
    ) {
        let input: Vec<DetectionBox> = boxes
            .iter()
            .enumerate()
            .map(|(i, (r, s))| DetectionBox { rect: *r, class_scores: vec![1.0 - s, *s], objectness: 1.0, proposal: i })
            .collect();
        let kept = nms(input.clone(), 1, threshold);
        prop_assert!(kept.len() <= input.len());
        prop_assert_eq!(kept.is_empty(), input.is_empty());
        for w in kept.windows(2) {
            prop_assert!(w[0].score(1) >= w[1].score(1));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.rect.iou(&b.rect) <= threshold);
            }
        }
        // Every suppressed box overlaps a kept box of at least its score.
        for b in &input {
            if !kept.iter().any(|k| k.proposal == b.proposal) {
                prop_assert!(kept.iter().any(|k| k.score(1) >= b.score(1) && k.rect.iou(&b.rect) > threshold));
            }
        }
    }

    #[test]
    fn down_up_preserves_shape_and_range(img in image(9, 7)) {
        let out = down_up_sample(&img).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn down_up_fixes_constant_images(v in 0.0..=1.0f64, w in 2usize..20, h in 2usize..20) {
        let img = Image::from_fn(w, h, 3, |_, _, _| v);
        let out = down_up_sample(&img).unwrap();
        prop_assert!(out.data().iter().all(|o| (o - v).abs() < 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tv_denoise_lowers_the_objective_and_total_variation(img in image(10, 8), weight in 0.01..0.5f64) {
        let out = tv_denoise(&img, weight).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(tv_objective(&out, &img, weight) <= tv_objective(&img, &img, weight) + 1e-9);
        for c in 0..3 {
            let chan = |im: &Image| (0..8).flat_map(|y| (0..10).map(move |x| (x, y))).map(|(x, y)| im.get(x, y, c)).collect::<Vec<_>>();
            prop_assert!(total_variation(&chan(&out), 10, 8) <= total_variation(&chan(&img), 10, 8) + 1e-9);
        }
    }
}

fn evaluation() -> impl Strategy<Value = FrameEvaluation> {
    (
        prop::sample::select(vec![Split::Train, Split::Val, Split::Test]),
        prop::sample::select(vec![Distance::Far, Distance::Medium, Distance::Near]),
        prop::sample::select(vec!["sky", "tree"]),
        prop::sample::select(vec!["grid", "two_stage"]),
        prop::sample::select(vec!["none", "down_up"]),
        prop::sample::select(vec!["clean", "cross_view"]),
        any::<bool>(),
        0usize..50,
    )
        .prop_map(|(split, distance, condition, detector, defense, attack, detected, index)| FrameEvaluation {
            key: CellKey {
                split,
                distance,
                condition: condition.into(),
                detector: detector.into(),
                defense: defense.into(),
                attack: attack.into(),
            },
            sequence_id: format!("seq_{index:03}"),
            frame_index: index,
            detected,
            best_iou: if detected { 0.7 } else { 0.0 },
            mislabeled_as: None,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cell_counts_partition_the_records(records in prop::collection::vec(evaluation(), 0..80)) {
        let report = DetectionRateReport { records: records.clone() };
        let cells = report.cells();
        prop_assert_eq!(cells.values().map(|c| c.total).sum::<usize>(), records.len());
        prop_assert_eq!(
            cells.values().map(|c| c.detected).sum::<usize>(),
            records.iter().filter(|r| r.detected).count()
        );
        for c in cells.values() {
            prop_assert!(c.detected <= c.total && c.total > 0);
            prop_assert!((0.0..=1.0).contains(&c.rate()));
        }
        let all = report.totals(|_| true);
        prop_assert_eq!(all.total, records.len());
    }

    #[test]
    fn csv_round_trips_the_cells(records in prop::collection::vec(evaluation(), 0..80)) {
        let report = DetectionRateReport { records };
        let parsed = parse_csv(&to_csv(&report).unwrap()).unwrap();
        prop_assert_eq!(parsed, report.cells());
    }

    #[test]
    fn merge_concatenates(a in prop::collection::vec(evaluation(), 0..20), b in prop::collection::vec(evaluation(), 0..20)) {
        let mut merged = DetectionRateReport { records: a.clone() };
        merged.merge(DetectionRateReport { records: b.clone() });
        prop_assert_eq!(merged.records.len(), a.len() + b.len());
    }
}
