use crowdped_core::eval::*;
use crowdped_core::BBox;
use crowdped_core::data::GroundTruthPedestrian;
use proptest::prelude::*;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn gt(f: BBox) -> GroundTruthPedestrian {
    GroundTruthPedestrian {
        visible: f,
        full: f,
        ignore: false,
    }
}

/// Builds a match result directly from a flag sequence.
fn seq(flags: &[MatchFlag], num_gt: usize) -> MatchResult {
    let n = flags.len();
    MatchResult {
        scores: (0..n).map(|i| 1.0 - i as f64 / (n + 1) as f64).collect(),
        flags: flags.to_vec(),
        det_index: (0..n).collect(),
        gt_matched: (0..num_gt)
            .map(|i| i < flags.iter().filter(|&&f| f == MatchFlag::TruePositive).count())
            .collect(),
        num_gt,
    }
}

use MatchFlag::*;

#[test]
fn match_examples() {
    let g = b(0.0, 0.0, 10.0, 30.0);
    let r = match_detections(&[(g, 0.9)], &[gt(g)], 0.5);
    assert_eq!(r.flags, vec![TruePositive]);

    let r = match_detections(&[(g, 0.6), (g, 0.9)], &[gt(g)], 0.5);
    assert_eq!(r.flags, vec![TruePositive, FalsePositive]);
    assert_eq!(r.det_index, vec![1, 0]);
}

#[test]
fn ignore_regions_neutralize() {
    let ig = GroundTruthPedestrian {
        ignore: true,
        ..gt(b(0.0, 0.0, 20.0, 20.0))
    };
    let r = match_detections(&[(b(1.0, 1.0, 9.0, 9.0), 0.5), (b(50.0, 50.0, 60.0, 60.0), 0.4)], &[ig], 0.5);
    assert_eq!(r.flags, vec![Ignored, FalsePositive]);
    assert_eq!(r.num_gt, 0);
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[seq(&[TruePositive, TruePositive], 2)]), 1.0);
    assert_eq!(average_precision(&[seq(&[], 3)]), 0.0);
    let ap = average_precision(&[seq(&[TruePositive, FalsePositive, TruePositive], 2)]);
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn recall_examples() {
    assert_eq!(recall(&[seq(&[TruePositive, TruePositive], 2)]), 1.0);
    assert_eq!(recall(&[seq(&[FalsePositive], 2)]), 0.0);
    assert_eq!(recall(&[seq(&[TruePositive, TruePositive, TruePositive], 4)]), 0.75);
}

#[test]
fn miss_rate_limits() {
    assert_eq!(log_average_miss_rate(&[seq(&[], 3), seq(&[], 1)]), 1.0);
    let perfect = log_average_miss_rate(&[seq(&[TruePositive, TruePositive], 2)]);
    assert!(perfect <= 1e-10 * (1.0 + 1e-9));
}

proptest! {
    #[test]
    fn sweep_is_monotone(
        raw_d in prop::collection::vec((0.0..30.0f64, 0.0..30.0f64, 2.0..15.0f64, 2.0..15.0f64, 0.0..1.0f64), 0..10),
        raw_g in prop::collection::vec((0.0..30.0f64, 0.0..30.0f64, 2.0..15.0f64, 2.0..15.0f64, prop::bool::weighted(0.2)), 0..5),
    ) {
        let dets: Vec<(BBox, f64)> = raw_d.iter().map(|r| (BBox::from_xywh(r.0, r.1, r.2, r.3).unwrap(), r.4)).collect();
        let gts: Vec<GroundTruthPedestrian> = raw_g.iter().map(|r| {
            let f = BBox::from_xywh(r.0, r.1, r.2, r.3).unwrap();
            GroundTruthPedestrian { visible: f, full: f, ignore: r.4 }
        }).collect();
        let set = EvalSet { images: vec![(dets, gts)] };
        let rows = set.threshold_sweep(&SWEEP_THRESHOLDS);
        for w in rows.windows(2) {
            prop_assert!(w[1].ap >= w[0].ap - 1e-12);
            prop_assert!(w[1].mr2 <= w[0].mr2 + 1e-12);
            prop_assert!(w[1].recall >= w[0].recall - 1e-12);
        }
    }
}
