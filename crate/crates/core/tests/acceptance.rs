//! Acceptance criteria A1-A10. Each test prints one `A<n> PASS|FAIL` line to
//! stdout (bypassing capture) and then asserts. Tests run one at a time so
//! the timings reported by A1 and A6 are not inflated by each other.

mod common;

use std::fmt::Display;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use common::{check_term, tiny_setup, GradCheck};
use crowdped_core::data::{Dataset, GroundTruthPedestrian, SceneSpec};
use crowdped_core::epm::{part_labels, LabelMode};
use crowdped_core::eval::{
    average_precision, log_average_miss_rate, match_detections, recall, EvalMetrics, EvalSet, MatchFlag,
    SWEEP_THRESHOLDS,
};
use crowdped_core::fen::{assign_visible_to_gt, AssignmentResult};
use crowdped_core::geometry::{decode_offsets, encode_offsets, ioa, iou};
use crowdped_core::netcore::{BackboneConfig, ModelParams};
use crowdped_core::pipeline::*;
use crowdped_core::postprocess::{greedy_nms, Detection, NmsMode};
use crowdped_core::vdn::{assign_rpn_targets, AnchorLabel, ProposalConfig};
use crowdped_core::{BBox, ImageBounds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, pass: bool, detail: impl Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    writeln!(std::io::stdout(), "{id} {verdict} {detail}").unwrap();
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn int_box(rng: &mut ChaCha8Rng, extent: i32, max_side: i32) -> BBox {
    let x = rng.random_range(0..extent) as f64;
    let y = rng.random_range(0..extent) as f64;
    let w = rng.random_range(1..=max_side) as f64;
    let h = rng.random_range(1..=max_side) as f64;
    BBox::from_xywh(x, y, w, h).unwrap()
}

// ---------------------------------------------------------------------------
// A1

const A1_TOL: f64 = 1e-4;
const A1_BUDGET_S: f64 = 120.0;

#[test]
fn a1_gradient_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = GradCheck::default();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut run = |label: String, r: GradCheck| {
        if !(r.max_rel_err < A1_TOL) || r.nonzero == 0 {
            failures.push(format!("{label}: {r:?}"));
        }
        worst.merge(&r);
    };
    for variant in [Variant::V2F, Variant::F2, Variant::VF] {
        let (model, params, sample, config, plan) = tiny_setup(variant, 1);
        for term in LossTerm::ALL {
            let absent =
                (term == LossTerm::Epm && !variant.has_epm()) || (term == LossTerm::Fen && !variant.has_second_stage());
            if !absent {
                let r = check_term(&model, &params, &sample, &config, &plan, term, 2, 1, &mut rng);
                run(format!("{variant} {term:?}"), r);
            }
        }
    }
    let (model, params, sample, mut config, plan) = tiny_setup(Variant::V2F, 2);
    config.label_mode = LabelMode::Soft;
    let r = check_term(&model, &params, &sample, &config, &plan, LossTerm::Epm, 2, 1, &mut rng);
    run("V2F Epm soft".into(), r);

    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < A1_BUDGET_S;
    report(
        "A1",
        pass,
        format!(
            "max rel err {:.2e} (< {A1_TOL:.0e}), {} probes checked, {} skipped at kinks, {:.1}s (< {A1_BUDGET_S}s) {}",
            worst.max_rel_err,
            worst.checked,
            worst.skipped,
            secs,
            failures.join("; ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A2

/// Exhaustive reference: among all subsets, the greedy result is the unique
/// one where a detection is kept exactly when no kept detection ahead of it
/// in (score desc, index asc) order overlaps it above the threshold.
fn nms_reference(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let n = boxes.len();
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && kept(j) && ahead(j, i) && iou(&boxes[i], &boxes[j]) > threshold);
            kept(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "greedy fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|i| found[0] & (1 << i) != 0).collect();
    kept.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(a.cmp(&c)));
    kept
}

#[test]
fn a2_nms_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut with_ties = 0;
    let instances = 1000;
    for _ in 0..instances {
        let n = rng.random_range(1..=12);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let full = int_box(&mut rng, 16, 12);
                let vis = int_box(&mut rng, 16, 10);
                // Scores on a coarse grid so ties are common.
                let score = rng.random_range(1..=6) as f64 / 6.0;
                Detection {
                    full: Some(full),
                    visible: Some(vis),
                    score,
                    part_scores: None,
                }
            })
            .collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        if (0..n).any(|i| (0..i).any(|j| scores[i] == scores[j])) {
            with_ties += 1;
        }
        let threshold = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        for mode in [NmsMode::Full, NmsMode::Visible] {
            let boxes: Vec<BBox> = dets
                .iter()
                .map(|d| match mode {
                    NmsMode::Full => d.full.unwrap(),
                    NmsMode::Visible => d.visible.unwrap(),
                })
                .collect();
            if greedy_nms(&dets, mode, threshold).unwrap() != nms_reference(&boxes, &scores, threshold) {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(
        "A2",
        pass,
        format!("{mismatches} mismatches over {instances} instances x 2 modes ({with_ties} with score ties)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A3

/// Pixel-count areas of intersection and union on a unit raster.
fn raster_counts(a: &BBox, c: &BBox) -> (f64, f64, f64) {
    let (mut inter, mut uni, mut area_a) = (0.0, 0.0, 0.0);
    for y in 0..40 {
        for x in 0..40 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let ia = px > a.x1() && px < a.x2() && py > a.y1() && py < a.y2();
            let ic = px > c.x1() && px < c.x2() && py > c.y1() && py < c.y2();
            inter += (ia && ic) as u8 as f64;
            uni += (ia || ic) as u8 as f64;
            area_a += ia as u8 as f64;
        }
    }
    (inter, uni, area_a)
}

#[test]
fn a3_geometry_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_iou, mut worst_ioa, mut bound_violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let a = int_box(&mut rng, 24, 14);
        let c = int_box(&mut rng, 24, 14);
        let (inter, uni, area_a) = raster_counts(&a, &c);
        let e_iou = (iou(&a, &c) - inter / uni).abs();
        let e_ioa = (ioa(&a, &c) - inter / area_a).abs();
        worst_iou = worst_iou.max(e_iou);
        worst_ioa = worst_ioa.max(e_ioa);
        if e_iou > 2.0 / uni || e_ioa > 2.0 / area_a {
            bound_violations += 1;
        }
    }
    // Round trip with bounds far away so nothing is clipped.
    let bounds = ImageBounds::new(1e6, 1e6);
    let mut worst_rt = 0.0f64;
    for _ in 0..1000 {
        // Sides in [4, 200]: size ratios stay below e^4, the log-size clamp.
        let mut real_box = || {
            let x = rng.random_range(100.0..900.0);
            let y = rng.random_range(100.0..900.0);
            BBox::from_xywh(x, y, rng.random_range(4.0..200.0), rng.random_range(4.0..200.0)).unwrap()
        };
        let (r, t) = (real_box(), real_box());
        let back = decode_offsets(&r, &encode_offsets(&r, &t), bounds).unwrap();
        for (u, v) in [(back.x1(), t.x1()), (back.y1(), t.y1()), (back.x2(), t.x2()), (back.y2(), t.y2())] {
            worst_rt = worst_rt.max((u - v).abs());
        }
    }
    let pass = bound_violations == 0 && worst_rt < 1e-6;
    report(
        "A3",
        pass,
        format!(
            "raster oracle: {bound_violations} of 1000 pairs outside 2/area, max |d iou| {worst_iou:.1e}, max |d ioa| {worst_ioa:.1e}; encode/decode max error {worst_rt:.1e} (< 1e-6)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A4

fn visible_oracle(v: &BBox, gts: &[GroundTruthPedestrian]) -> AssignmentResult {
    let mut expected = AssignmentResult::NEGATIVE;
    let mut best = -1.0;
    for (k, g) in gts.iter().enumerate() {
        let o = iou(v, &g.visible);
        if !g.ignore && o >= 0.5 && o > best {
            best = o;
            expected = AssignmentResult::positive(k);
        }
    }
    expected
}

fn rpn_oracle(anchors: &[BBox], gts: &[BBox]) -> Vec<(AnchorLabel, Option<usize>)> {
    anchors
        .iter()
        .map(|a| {
            if gts.is_empty() {
                return (AnchorLabel::Negative, None);
            }
            let mut best_gt = 0;
            for g in 1..gts.len() {
                if iou(a, &gts[g]) > iou(a, &gts[best_gt]) {
                    best_gt = g;
                }
            }
            let best = iou(a, &gts[best_gt]);
            let argmax_of_some_gt = gts.iter().any(|g| {
                let top = anchors.iter().map(|x| iou(x, g)).fold(0.0, f64::max);
                top > 0.0 && iou(a, g) == top
            });
            if best >= 0.7 || argmax_of_some_gt {
                (AnchorLabel::Positive, Some(best_gt))
            } else if best < 0.3 {
                (AnchorLabel::Negative, None)
            } else {
                (AnchorLabel::Ignore, None)
            }
        })
        .collect()
}

#[test]
fn a4_assignment_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut vis_bad, mut rpn_bad) = (0, 0);
    for _ in 0..1000 {
        let gts: Vec<GroundTruthPedestrian> = (0..rng.random_range(0..5))
            .map(|_| {
                let v = int_box(&mut rng, 10, 8);
                GroundTruthPedestrian {
                    visible: v,
                    full: v,
                    ignore: rng.random_range(0..5) == 0,
                }
            })
            .collect();
        for _ in 0..10 {
            let v = int_box(&mut rng, 10, 8);
            if assign_visible_to_gt(&v, &gts) != visible_oracle(&v, &gts) {
                vis_bad += 1;
            }
        }

        let anchors: Vec<BBox> = (0..rng.random_range(1..8)).map(|_| int_box(&mut rng, 12, 8)).collect();
        let boxes: Vec<BBox> = (0..rng.random_range(0..4)).map(|_| int_box(&mut rng, 12, 8)).collect();
        let t = assign_rpn_targets(&anchors, &boxes);
        let ok = rpn_oracle(&anchors, &boxes).into_iter().enumerate().all(|(k, (label, gt))| {
            t.labels[k] == label
                && t.gt_index[k] == gt
                && gt.is_none_or(|g| t.offsets[k] == Some(encode_offsets(&anchors[k], &boxes[g])))
        });
        if !ok {
            rpn_bad += 1;
        }
    }
    let pass = vis_bad == 0 && rpn_bad == 0;
    report(
        "A4",
        pass,
        format!("assign_visible_to_gt: {vis_bad} mismatches / 10000 queries; assign_rpn_targets: {rpn_bad} mismatching instances / 1000"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A5

fn gt(f: BBox) -> GroundTruthPedestrian {
    GroundTruthPedestrian {
        visible: f,
        full: f,
        ignore: false,
    }
}

/// Builds per-image detections where `true` entries copy the next unused
/// ground truth and `false` entries land in empty space.
fn image_case(num_gt: usize, dets: &[(f64, bool)]) -> (Vec<(BBox, f64)>, Vec<GroundTruthPedestrian>) {
    let gts: Vec<GroundTruthPedestrian> = (0..num_gt).map(|k| gt(b(30.0 * k as f64, 0.0, 30.0 * k as f64 + 10.0, 30.0))).collect();
    let mut next = 0;
    let boxes = dets
        .iter()
        .map(|&(score, hit)| {
            if hit {
                next += 1;
                (gts[next - 1].full, score)
            } else {
                (b(500.0, 500.0, 510.0, 530.0), score)
            }
        })
        .collect();
    (boxes, gts)
}

fn metrics_of(images: &[(Vec<(BBox, f64)>, Vec<GroundTruthPedestrian>)]) -> EvalMetrics {
    EvalSet { images: images.to_vec() }.evaluate(0.5)
}

#[test]
fn a5_metric_oracles() {
    let _g = serial();
    let close = |a: f64, c: f64| (a - c).abs() < 1e-12;
    let mut notes = Vec::new();

    // Case 1: TP, FP, TP over two ground truths. AP = 1*(1/2) + (2/3)*(1/2).
    let c1 = metrics_of(&[image_case(2, &[(0.9, true), (0.8, false), (0.7, true)])]);
    let ok1 = close(c1.ap, 5.0 / 6.0) && close(c1.recall, 1.0);
    notes.push(format!("case1 AP {:.6} (5/6)", c1.ap));

    // Case 2: three of four ground truths found, no false positives.
    let c2 = metrics_of(&[image_case(4, &[(0.9, true), (0.8, true), (0.7, true)])]);
    let ok2 = close(c2.recall, 0.75) && close(c2.ap, 0.75);
    notes.push(format!("case2 recall {:.4} (0.75)", c2.recall));

    // Case 3, three images, four ground truths. Pooled order by score:
    // .9 TP, .8 TP, .7 FP, .6 TP, .5 FP, .3 FP. Curve (fppi, miss):
    // (0,.75) (0,.5) (1/3,.5) (1/3,.25) (2/3,.25) (1,.25). Reference points
    // 10^(-2+i/4): the first seven are below 1/3 and read .5, the last two
    // read .25. MR = exp((7 ln .5 + 2 ln .25)/9) = .5^(11/9).
    // AP = (1/1 + 2/2 + 3/4) / 4 = .6875.
    let c3 = metrics_of(&[
        image_case(1, &[(0.9, true), (0.5, false)]),
        image_case(1, &[(0.8, true), (0.3, false)]),
        image_case(2, &[(0.7, false), (0.6, true)]),
    ]);
    let ok3 = close(c3.mr2, 0.5f64.powf(11.0 / 9.0)) && close(c3.ap, 0.6875) && close(c3.recall, 0.75);
    notes.push(format!("case3 MR-2 {:.6} ({:.6}) AP {:.4}", c3.mr2, 0.5f64.powf(11.0 / 9.0), c3.ap));

    // Independent cross-check of the building blocks on case 3.
    let results: Vec<_> = [
        image_case(1, &[(0.9, true), (0.5, false)]),
        image_case(1, &[(0.8, true), (0.3, false)]),
        image_case(2, &[(0.7, false), (0.6, true)]),
    ]
    .iter()
    .map(|(d, g)| match_detections(d, g, 0.5))
    .collect();
    let flags_ok = results[2].flags == vec![MatchFlag::FalsePositive, MatchFlag::TruePositive];
    let blocks_ok = flags_ok
        && close(average_precision(&results), c3.ap)
        && close(recall(&results), c3.recall)
        && close(log_average_miss_rate(&results), c3.mr2);

    // Sweep monotonicity on random sets.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sweep_bad = 0;
    for _ in 0..300 {
        let images: Vec<_> = (0..3)
            .map(|_| {
                let gts: Vec<_> = (0..rng.random_range(0..5))
                    .map(|_| GroundTruthPedestrian {
                        ignore: rng.random_range(0..6) == 0,
                        ..gt(int_box(&mut rng, 30, 14))
                    })
                    .collect();
                let dets: Vec<_> =
                    (0..rng.random_range(0..10)).map(|_| (int_box(&mut rng, 30, 14), rng.random_range(0.0..1.0))).collect();
                (dets, gts)
            })
            .collect();
        let rows = EvalSet { images }.threshold_sweep(&SWEEP_THRESHOLDS);
        if rows.windows(2).any(|w| w[1].ap < w[0].ap - 1e-12 || w[1].mr2 > w[0].mr2 + 1e-12) {
            sweep_bad += 1;
        }
    }
    notes.push(format!("threshold sweep monotonicity violations {sweep_bad}/300"));

    let pass = ok1 && ok2 && ok3 && blocks_ok && sweep_bad == 0;
    report("A5", pass, notes.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared synthetic benchmark for A6, A7, A8 and A10.

const BENCH_TRAIN: usize = 600;
const BENCH_TEST: usize = 500;
const BENCH_TEST_SEED: u64 = 1_000_000;
const BENCH_EPOCHS: usize = 16;
const A6_BUDGET_S: f64 = 45.0 * 60.0;

fn bench_spec() -> SceneSpec {
    SceneSpec {
        count: [5, 10],
        crowding: 0.7,
        ..SceneSpec::default()
    }
}

/// Desk-scale architecture and schedule shared by every trained criterion.
fn desk_config(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        model: ModelConfig {
            backbone: BackboneConfig {
                layers: vec![(16, 2), (32, 2), (32, 2), (32, 1)],
            },
            fc_width: 128,
            ..ModelConfig::default()
        },
        epochs,
        lr: 0.01,
        lr_decay_epochs: vec![epochs * 3 / 4],
        warmup_iters: 100,
        clip_grad_norm: Some(10.0),
        batch_size: 2,
        sample_cap: 64,
        sampling: SamplingConfig {
            roi_batch: 128,
            proposals: ProposalConfig {
                top_n: 64,
                ..Default::default()
            },
            ..Default::default()
        },
        infer: InferConfig {
            proposals: ProposalConfig {
                top_n: 100,
                ..Default::default()
            },
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

struct Trained {
    config: TrainConfig,
    model: Model,
    params: ModelParams,
    train_secs: f64,
}

struct Bench {
    train: Dataset,
    test: Dataset,
    mean_peds: f64,
    v2f: Trained,
    f: Trained,
    v2f_visible: EvalMetrics,
    v2f_full: EvalMetrics,
    f_full: EvalMetrics,
    eval_secs: f64,
}

fn train_variant(data: &Dataset, variant: Variant, label_mode: LabelMode) -> Trained {
    let config = TrainConfig {
        label_mode,
        ..desk_config(variant, BENCH_EPOCHS)
    };
    let start = Instant::now();
    let (params, _) = train(data, &config).expect("benchmark training");
    Trained {
        model: Model::new(variant, &config.model),
        config,
        params,
        train_secs: start.elapsed().as_secs_f64(),
    }
}

fn evaluate(t: &Trained, test: &Dataset, nms: NmsMode) -> EvalMetrics {
    let infer = InferConfig {
        nms_mode: Some(nms),
        ..t.config.infer
    };
    evaluation_set(&t.model, &t.params, test, &infer).unwrap().evaluate(0.5)
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let spec = bench_spec();
        let train_set = Dataset::synthetic(&spec, 0, BENCH_TRAIN).unwrap();
        let test = Dataset::synthetic(&spec, BENCH_TEST_SEED, BENCH_TEST).unwrap();
        let v2f = train_variant(&train_set, Variant::V2F, LabelMode::Hard);
        let f = train_variant(&train_set, Variant::F, LabelMode::Hard);
        let start = Instant::now();
        let v2f_visible = evaluate(&v2f, &test, NmsMode::Visible);
        let v2f_full = evaluate(&v2f, &test, NmsMode::Full);
        let f_full = evaluate(&f, &test, NmsMode::Full);
        Bench {
            train: train_set,
            mean_peds: test.mean_pedestrians(),
            test,
            v2f,
            f,
            v2f_visible,
            v2f_full,
            f_full,
            eval_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn fmt_metrics(m: &EvalMetrics) -> String {
    format!("AP {:.2} MR-2 {:.2} recall {:.2}", 100.0 * m.ap, 100.0 * m.mr2, 100.0 * m.recall)
}

// ---------------------------------------------------------------------------
// A6

#[test]
fn a6_end_to_end_trend() {
    let _g = serial();
    let bench = bench();
    let spec = bench_spec();
    let (v, vf, f) = (&bench.v2f_visible, &bench.v2f_full, &bench.f_full);
    let recall_gain = 100.0 * (v.recall - f.recall);
    let ap_gain = 100.0 * (v.ap - f.ap);
    let secs = bench.v2f.train_secs + bench.f.train_secs + bench.eval_secs;
    let setup_ok = bench.test.len() == 500 && bench.mean_peds >= 6.0 && spec.crowding >= 0.7;
    let pass = setup_ok && recall_gain >= 3.0 && ap_gain >= 2.0 && v.recall >= vf.recall && secs < A6_BUDGET_S;
    report(
        "A6",
        pass,
        format!(
            "{} test scenes, {:.2} pedestrians/scene, crowding {}; V2F visible-NMS {} | V2F full-NMS {} | F {} | recall +{recall_gain:.2} (>= 3), AP +{ap_gain:.2} (>= 2); train+eval {:.0}s (< {:.0}s)",
            bench.test.len(),
            bench.mean_peds,
            spec.crowding,
            fmt_metrics(v),
            fmt_metrics(vf),
            fmt_metrics(f),
            secs,
            A6_BUDGET_S
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A7

#[test]
fn a7_diagnostics_ordering() {
    let _g = serial();
    let bench = bench();
    let t = &bench.v2f;
    let infer = InferConfig {
        nms_mode: Some(NmsMode::Visible),
        ..t.config.infer
    };
    let run = |mode| run_diagnostic(mode, &t.model, &t.params, &bench.test, &infer).unwrap();
    let (pv, pvn, pf) = (run(DiagnosticMode::PVdn), run(DiagnosticMode::PVdnNms), run(DiagnosticMode::PFen));
    let v = &bench.v2f_visible;
    let pass = pvn.ap >= pv.ap && pv.ap >= v.ap && pvn.mr2 <= v.mr2;
    report(
        "A7",
        pass,
        format!(
            "P-VDN+NMS {} | P-VDN {} | V2F {} | P-FEN {} (info); need AP(P-VDN+NMS) >= AP(P-VDN) >= AP(V2F) and MR-2(P-VDN+NMS) <= MR-2(V2F)",
            fmt_metrics(&pvn),
            fmt_metrics(&pv),
            fmt_metrics(v),
            fmt_metrics(&pf)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A8

#[test]
fn a8_epm_is_inference_free() {
    let _g = serial();
    let bench = bench();
    let t = &bench.v2f;
    let stripped = without_epm(&t.params);
    assert!(stripped.get(crowdped_core::epm::EMBEDDING).is_err());
    let (mut images, mut dets, mut differing) = (0, 0, 0);
    for nms in [NmsMode::Visible, NmsMode::Full] {
        let infer = InferConfig {
            nms_mode: Some(nms),
            ..t.config.infer
        };
        for sample in bench.test.samples.iter().take(100) {
            let a = t.model.infer(&t.params, &sample.image, &infer).unwrap();
            let c = t.model.infer(&stripped, &sample.image, &infer).unwrap();
            let same = a.len() == c.len()
                && a.iter().zip(&c).all(|(x, y)| {
                    x.score.to_bits() == y.score.to_bits()
                        && bits(x.full) == bits(y.full)
                        && bits(x.visible) == bits(y.visible)
                        && x.part_scores.is_none()
                        && y.part_scores.is_none()
                });
            images += 1;
            dets += a.len();
            differing += (!same) as usize;
        }
    }
    let pass = differing == 0 && dets > 0;
    report(
        "A8",
        pass,
        format!("{differing} of {images} inference runs differ with vs without the part embedding ({dets} detections compared bitwise)"),
    );
    assert!(pass);
}

fn bits(b: Option<BBox>) -> Option<[u64; 4]> {
    b.map(|b| [b.x1().to_bits(), b.y1().to_bits(), b.x2().to_bits(), b.y2().to_bits()])
}

// ---------------------------------------------------------------------------
// A9

const SMOKE_SCENES: usize = 48;
const SMOKE_EPOCHS: usize = 8;

#[test]
fn a9_hard_and_soft_labels_converge() {
    let _g = serial();
    let spec = bench_spec();
    let smoke = Dataset::synthetic(&spec, 500_000, SMOKE_SCENES).unwrap();
    let held_out = Dataset::synthetic(&spec, 600_000, 48).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for mode in [LabelMode::Hard, LabelMode::Soft] {
        let config = TrainConfig {
            label_mode: mode,
            ..desk_config(Variant::V2F, SMOKE_EPOCHS)
        };
        let (params, log) = train(&smoke, &config).unwrap();
        let first = log.epochs.first().unwrap();
        let last = log.epochs.last().unwrap();
        let ratio = last.total / first.total;
        pass &= ratio < 0.5;
        let model = Model::new(Variant::V2F, &config.model);
        let m = evaluation_set(&model, &params, &held_out, &config.infer).unwrap().evaluate(0.5);
        lines.push(format!(
            "{mode:?}: loss {:.3} -> {:.3} (ratio {ratio:.2} < 0.5), EPM loss {:.4} -> {:.4}, held-out {}",
            first.total,
            last.total,
            first.losses.epm,
            last.losses.epm,
            fmt_metrics(&m)
        ));
    }
    report("A9", pass, lines.join(" | "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// A10

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, c) in x.iter().zip(y) {
        sxy += (a - mx) * (c - my);
        sxx += (a - mx) * (a - mx);
        syy += (c - my) * (c - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Part responses of `t` on every non-ignored test pedestrian's visible box,
/// with the soft labels and hard labels of the same parts.
fn part_samples(t: &Trained, test: &Dataset) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut responses, mut soft, mut hard) = (Vec::new(), Vec::new(), Vec::new());
    let den = t.config.ioa_denominator;
    for sample in &test.samples {
        let gts: Vec<&GroundTruthPedestrian> = sample.pedestrians.iter().filter(|p| !p.ignore).collect();
        if gts.is_empty() {
            continue;
        }
        let visible: Vec<BBox> = gts.iter().map(|g| g.visible).collect();
        let scores = t.model.part_scores(&t.params, &sample.image, &visible).unwrap();
        for (g, r) in gts.iter().zip(scores) {
            responses.extend(r);
            soft.extend(part_labels(&g.visible, &g.full, LabelMode::Soft, den));
            hard.extend(part_labels(&g.visible, &g.full, LabelMode::Hard, den));
        }
    }
    (responses, soft, hard)
}

// The criterion fixes the target (soft labels) but not the training label
// mode. A model trained on hard labels can at best reproduce the hard labels,
// whose own correlation with the soft labels is printed as its ceiling; the
// criterion is judged on the model trained towards soft labels.
#[test]
fn a10_part_scores_track_visibility() {
    let _g = serial();
    let bench = bench();
    let soft_model = train_variant(&bench.train, Variant::V2F, LabelMode::Soft);
    let (r_soft, y_soft, _) = part_samples(&soft_model, &bench.test);
    let (r_hard, y, y_hard) = part_samples(&bench.v2f, &bench.test);
    let rho = pearson(&r_soft, &y_soft);
    let pass = rho >= 0.8;
    report(
        "A10",
        pass,
        format!(
            "Pearson r = {rho:.3} (>= 0.8) between part responses of the soft-label model and soft labels over {} parts of {} test pedestrians; hard-label model r = {:.3}, ceiling for hard labels r(hard, soft) = {:.3}",
            r_soft.len(),
            r_soft.len() / 5,
            pearson(&r_hard, &y),
            pearson(&y_hard, &y),
        ),
    );
    assert!(pass);
}
