//! Detection evaluation: greedy score-ordered matching with ignore regions,
//! un-interpolated average precision, log-average miss rate over
//! `[1e-2, 1e0]` false positives per image, and recall.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::GroundTruthPedestrian;
use crate::error::{Error, Result};
use crate::geometry::{ioa, iou, BBox, NUM_PARTS};
use crate::postprocess::{score_order, Detection};

/// IoA with an ignore region above which a detection is neutralized.
pub const IGNORE_IOA: f64 = 0.5;

/// Matching thresholds of the threshold sweep, strictest first.
pub const SWEEP_THRESHOLDS: [f64; 5] = [0.5, 0.4, 0.3, 0.2, 0.1];

const MISS_RATE_FLOOR: f64 = 1e-10;
const FPPI_POINTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Outcome of matching one image, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub scores: Vec<f64>,
    pub flags: Vec<MatchFlag>,
    /// Input index of each sorted detection.
    pub det_index: Vec<usize>,
    /// Per ground truth, in input order; ignore entries stay `false`.
    pub gt_matched: Vec<bool>,
    /// Number of non-ignore ground truths.
    pub num_gt: usize,
}

impl MatchResult {
    pub fn count(&self, flag: MatchFlag) -> usize {
        self.flags.iter().filter(|&&f| f == flag).count()
    }

    pub fn matched(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| m).count()
    }
}

/// Pairwise overlaps for one image, computed once and reused across thresholds.
#[derive(Debug, Clone)]
pub struct ImageOverlaps {
    scores: Vec<f64>,
    order: Vec<usize>,
    /// `dets x gts` IoU on full boxes.
    iou: Array2<f64>,
    /// Best IoA of each detection against any ignore ground truth.
    ignore_ioa: Vec<f64>,
    ignore: Vec<bool>,
}

impl ImageOverlaps {
    pub fn new(dets: &[(BBox, f64)], gts: &[GroundTruthPedestrian]) -> Self {
        let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
        let iou_m = Array2::from_shape_fn((dets.len(), gts.len()), |(i, j)| iou(&dets[i].0, &gts[j].full));
        let ignore_ioa = dets
            .iter()
            .map(|d| {
                gts.iter()
                    .filter(|g| g.ignore)
                    .map(|g| ioa(&d.0, &g.full))
                    .fold(0.0, f64::max)
            })
            .collect();
        ImageOverlaps {
            order: score_order(&scores),
            scores,
            iou: iou_m,
            ignore_ioa,
            ignore: gts.iter().map(|g| g.ignore).collect(),
        }
    }

    pub fn match_at(&self, iou_threshold: f64) -> MatchResult {
        let n_gt = self.ignore.len();
        let mut gt_matched = vec![false; n_gt];
        let mut flags = Vec::with_capacity(self.order.len());
        for &d in &self.order {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..n_gt {
                if self.ignore[g] || gt_matched[g] {
                    continue;
                }
                let v = self.iou[[d, g]];
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            let flag = match best {
                Some((g, v)) if v >= iou_threshold => {
                    gt_matched[g] = true;
                    MatchFlag::TruePositive
                }
                _ if self.ignore_ioa[d] >= IGNORE_IOA => MatchFlag::Ignored,
                _ => MatchFlag::FalsePositive,
            };
            flags.push(flag);
        }
        MatchResult {
            scores: self.order.iter().map(|&d| self.scores[d]).collect(),
            flags,
            det_index: self.order.clone(),
            gt_matched,
            num_gt: self.ignore.iter().filter(|&&i| !i).count(),
        }
    }
}

/// Matches one image's detections (full boxes with scores) against its ground truth.
pub fn match_detections(dets: &[(BBox, f64)], gts: &[GroundTruthPedestrian], iou_threshold: f64) -> MatchResult {
    ImageOverlaps::new(dets, gts).match_at(iou_threshold)
}

/// Detections of all images pooled and sorted by score. Ties keep image order,
/// then within-image order. Ignored detections are dropped.
fn pooled(results: &[MatchResult]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| {
            r.scores
                .iter()
                .zip(&r.flags)
                .filter(|(_, f)| **f != MatchFlag::Ignored)
                .map(|(s, f)| (*s, *f == MatchFlag::TruePositive))
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

fn total_gt(results: &[MatchResult]) -> usize {
    results.iter().map(|r| r.num_gt).sum()
}

/// Precision/recall after each (non-ignored) detection, in score order.
pub fn pr_curve(results: &[MatchResult]) -> Vec<(f64, f64)> {
    let n_gt = total_gt(results).max(1) as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    pooled(results)
        .into_iter()
        .map(|(_, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / n_gt, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// Area under the un-interpolated precision/recall curve: every true positive
/// contributes its precision times a recall step of `1 / num_gt`.
pub fn average_precision(results: &[MatchResult]) -> f64 {
    let n_gt = total_gt(results);
    if n_gt == 0 {
        return 0.0;
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, is_tp) in pooled(results) {
        seen += 1;
        if is_tp {
            tp += 1;
            ap += tp as f64 / seen as f64;
        }
    }
    ap / n_gt as f64
}

/// Miss rate against false positives per image, after each detection.
pub fn fppi_curve(results: &[MatchResult]) -> Vec<(f64, f64)> {
    let n_img = results.len().max(1) as f64;
    let n_gt = total_gt(results);
    let (mut tp, mut fp) = (0usize, 0usize);
    pooled(results)
        .into_iter()
        .map(|(_, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let miss = if n_gt == 0 { 0.0 } else { 1.0 - tp as f64 / n_gt as f64 };
            (fp as f64 / n_img, miss)
        })
        .collect()
}

/// The nine FPPI reference points, evenly spaced in log between 1e-2 and 1e0.
pub fn fppi_reference_points() -> [f64; FPPI_POINTS] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (FPPI_POINTS - 1) as f64))
}

/// Log-average miss rate. At each reference FPPI the miss rate is taken at the
/// last curve point whose FPPI does not exceed it (the first point if none
/// does); the result is the geometric mean of those miss rates.
pub fn log_average_miss_rate(results: &[MatchResult]) -> f64 {
    let curve = fppi_curve(results);
    if curve.is_empty() {
        return 1.0;
    }
    let mean_log: f64 = fppi_reference_points()
        .iter()
        .map(|&r| {
            let at = curve.iter().rposition(|&(f, _)| f <= r).unwrap_or(0);
            curve[at].1.max(MISS_RATE_FLOOR).ln()
        })
        .sum::<f64>()
        / FPPI_POINTS as f64;
    mean_log.exp()
}

/// Matched non-ignore ground truths over all non-ignore ground truths.
pub fn recall(results: &[MatchResult]) -> f64 {
    let n_gt = total_gt(results);
    if n_gt == 0 {
        return 0.0;
    }
    results.iter().map(MatchResult::matched).sum::<usize>() as f64 / n_gt as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub iou_threshold: f64,
    pub ap: f64,
    pub mr2: f64,
    pub recall: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    /// `(recall, precision)` points.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pr_curve: Vec<(f64, f64)>,
    /// `(fppi, miss rate)` points.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fppi_curve: Vec<(f64, f64)>,
}

impl EvalMetrics {
    pub fn from_results(results: &[MatchResult], iou_threshold: f64) -> Self {
        EvalMetrics {
            iou_threshold,
            ap: average_precision(results),
            mr2: log_average_miss_rate(results),
            recall: recall(results),
            num_images: results.len(),
            num_gt: total_gt(results),
            num_detections: results.iter().map(|r| r.flags.len()).sum(),
            pr_curve: pr_curve(results),
            fppi_curve: fppi_curve(results),
        }
    }

    /// Drops the curves, keeping only scalar metrics.
    pub fn summary(&self) -> EvalMetrics {
        EvalMetrics {
            pr_curve: Vec::new(),
            fppi_curve: Vec::new(),
            ..self.clone()
        }
    }
}

/// Per-image detections paired with ground truth.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub images: Vec<(Vec<(BBox, f64)>, Vec<GroundTruthPedestrian>)>,
}

impl EvalSet {
    pub fn push(&mut self, dets: &[Detection], gts: &[GroundTruthPedestrian]) {
        let boxes = dets.iter().filter_map(|d| d.full.map(|f| (f, d.score))).collect();
        self.images.push((boxes, gts.to_vec()));
    }

    pub fn overlaps(&self) -> Vec<ImageOverlaps> {
        self.images.iter().map(|(d, g)| ImageOverlaps::new(d, g)).collect()
    }

    pub fn evaluate(&self, iou_threshold: f64) -> EvalMetrics {
        let results: Vec<MatchResult> = self.overlaps().iter().map(|o| o.match_at(iou_threshold)).collect();
        EvalMetrics::from_results(&results, iou_threshold)
    }

    /// One row per threshold, sharing the overlap computations.
    pub fn threshold_sweep(&self, thresholds: &[f64]) -> Vec<EvalMetrics> {
        let overlaps = self.overlaps();
        thresholds
            .iter()
            .map(|&t| {
                let results: Vec<MatchResult> = overlaps.iter().map(|o| o.match_at(t)).collect();
                EvalMetrics::from_results(&results, t).summary()
            })
            .collect()
    }
}

/// One line of a detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub score: f64,
    /// `[x, y, w, h]`
    pub fbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<[f64; NUM_PARTS]>,
}

impl DetectionRecord {
    pub fn from_detection(image_id: &str, d: &Detection) -> Option<Self> {
        Some(DetectionRecord {
            image_id: image_id.to_string(),
            score: d.score,
            fbox: d.full?.to_xywh(),
            vbox: d.visible.map(|v| v.to_xywh()),
            parts: d.part_scores,
        })
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let f = self.fbox;
        Ok(Detection {
            full: Some(BBox::from_xywh(f[0], f[1], f[2], f[3])?),
            visible: self.vbox.map(|v| BBox::from_xywh(v[0], v[1], v[2], v[3])).transpose()?,
            score: self.score,
            part_scores: self.parts,
        })
    }
}

pub fn write_detections(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
