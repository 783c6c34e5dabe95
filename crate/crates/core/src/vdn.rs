//! Two-stage detector: region proposal network plus a region head.
//!
//! The same machinery serves every pipeline variant; the caller decides
//! whether the regression targets are visible or full-body boxes.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hash;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{decode_offsets, encode_offsets, iou, BBox, ImageBounds, OffsetVector};
use crate::netcore::{
    bce_with_logit, relu, relu_backward, sigmoid, smooth_l1, Conv2d, ConvCache, FeatureMap, Linear, ModelParams,
    RoiMlp, RoiMlpCache,
};
use crate::postprocess::nms_boxes;

/// Anchor shapes. Each cell gets one anchor per `(scale, ratio)` pair; ratio is
/// height over width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Base side length as a multiple of the feature stride.
    pub base_factor: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorConfig {
    /// Visible regions range from head-only strips to whole bodies, so their
    /// anchors span three sizes and four shapes (height over width).
    pub const VISIBLE_SCALES: [f64; 3] = [0.5, 1.0, 1.5];
    pub const VISIBLE_RATIOS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];
    /// Full bodies have a narrow aspect range; one size suffices.
    pub const FULL_RATIOS: [f64; 3] = [1.0, 2.0, 3.0];

    pub fn visible() -> Self {
        AnchorConfig {
            base_factor: 4.0,
            scales: Self::VISIBLE_SCALES.to_vec(),
            ratios: Self::VISIBLE_RATIOS.to_vec(),
        }
    }

    pub fn full() -> Self {
        AnchorConfig {
            base_factor: 4.0,
            scales: vec![1.0],
            ratios: Self::FULL_RATIOS.to_vec(),
        }
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Anchor `(i * width + j) * per_cell + a` sits at cell `(i, j)`.
    pub boxes: Vec<BBox>,
    pub stride: usize,
    pub base: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl AnchorSet {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Anchors centred on every cell of an `fm_h x fm_w` map. Anchors may extend
/// past the image; they are only clipped when decoded.
pub fn generate_anchors(fm_h: usize, fm_w: usize, stride: usize, base: f64, scales: &[f64], ratios: &[f64]) -> AnchorSet {
    let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
    for &scale in scales {
        for &r in ratios {
            let side = base * scale;
            shapes.push((side / r.sqrt(), side * r.sqrt()));
        }
    }
    let s = stride as f64;
    let mut boxes = Vec::with_capacity(fm_h * fm_w * shapes.len());
    for i in 0..fm_h {
        for j in 0..fm_w {
            let (cx, cy) = (s * (j as f64 + 0.5), s * (i as f64 + 0.5));
            for &(w, h) in &shapes {
                boxes.push(BBox::from_center(cx, cy, w, h).expect("anchor shape is positive"));
            }
        }
    }
    AnchorSet {
        boxes,
        stride,
        base,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        height: fm_h,
        width: fm_w,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground truth of each positive anchor.
    pub gt_index: Vec<Option<usize>>,
    /// Unweighted regression target of each positive anchor.
    pub offsets: Vec<Option<OffsetVector>>,
}

pub const RPN_POSITIVE_IOU: f64 = 0.7;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;

pub fn assign_rpn_targets(anchors: &[BBox], gts: &[BBox]) -> RpnTargets {
    assign_rpn_targets_with(anchors, gts, RPN_POSITIVE_IOU, RPN_NEGATIVE_IOU)
}

/// Anchor labelling: positive at IoU >= `pos_iou` with some box or when the
/// anchor attains a box's best (non-zero) IoU; negative when the best IoU is
/// below `neg_iou`; ignored otherwise.
pub fn assign_rpn_targets_with(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> RpnTargets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut gt_index = vec![None; n];
    let mut offsets = vec![None; n];
    if gts.is_empty() {
        return RpnTargets { labels, gt_index, offsets };
    }
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut gt_best = vec![0.0f64; gts.len()];
    for row in &overlaps {
        for (best, &v) in gt_best.iter_mut().zip(row) {
            *best = best.max(v);
        }
    }
    for (a, row) in overlaps.iter().enumerate() {
        let (best_gt, best) = argmax_first(row);
        let is_gt_best = row.iter().zip(&gt_best).any(|(&v, &b)| b > 0.0 && v == b);
        if best >= pos_iou || is_gt_best {
            labels[a] = AnchorLabel::Positive;
            gt_index[a] = Some(best_gt);
            offsets[a] = Some(encode_offsets(&anchors[a], &gts[best_gt]));
        } else if best >= neg_iou {
            labels[a] = AnchorLabel::Ignore;
        }
    }
    RpnTargets { labels, gt_index, offsets }
}

/// Index and value of the maximum, preferring the lowest index on ties.
pub(crate) fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Draws up to `batch` indices with at most `batch * pos_fraction` positives;
/// negatives fill the remainder.
pub fn sample_balanced(
    mut positives: Vec<usize>,
    mut negatives: Vec<usize>,
    batch: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let max_pos = (batch as f64 * pos_fraction).floor() as usize;
    positives.shuffle(rng);
    positives.truncate(max_pos);
    negatives.shuffle(rng);
    negatives.truncate(batch - positives.len());
    (positives, negatives)
}

pub fn weighted_offsets(o: &OffsetVector, weights: [f64; 4]) -> [f64; 4] {
    let a = o.to_array();
    [a[0] * weights[0], a[1] * weights[1], a[2] * weights[2], a[3] * weights[3]]
}

/// Decodes a raw network output trained against weighted targets.
pub fn decode_weighted(reference: &BBox, raw: &[f64], weights: [f64; 4], bounds: ImageBounds) -> Result<BBox> {
    let o = OffsetVector::new(raw[0] / weights[0], raw[1] / weights[1], raw[2] / weights[2], raw[3] / weights[3]);
    decode_offsets(reference, &o, bounds)
}

/// Mean binary cross-entropy over the sampled `(row, label)` pairs. Returns the
/// loss and a gradient with one entry per logit.
pub fn sampled_bce(logits: &[f64], samples: &[(usize, bool)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    if samples.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    for &(i, label) in samples {
        let (l, d) = bce_with_logit(logits[i], if label { 1.0 } else { 0.0 });
        loss += l;
        grad[i] += d * scale;
    }
    (loss * scale, grad)
}

/// Smooth-L1 between predicted rows and targets, summed over coordinates and
/// divided by the number of targets (at least one). Branch choices are folded
/// into `hasher`.
pub fn sampled_smooth_l1(
    pred: &Array2<f64>,
    targets: &[(usize, [f64; 4])],
    beta: f64,
    hasher: &mut DefaultHasher,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(pred.dim());
    let scale = 1.0 / targets.len().max(1) as f64;
    let mut loss = 0.0;
    for &(i, t) in targets {
        for d in 0..4 {
            let diff = pred[[i, d]] - t[d];
            (diff.abs() < beta).hash(hasher);
            let (l, g) = smooth_l1(diff, beta);
            loss += l;
            grad[[i, d]] += g * scale;
        }
    }
    (loss * scale, grad)
}

/// 3x3 convolution with a rectifier, then sibling 1x1 objectness and offset
/// convolutions.
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub per_cell: usize,
}

pub struct RpnOutput {
    /// One objectness logit per anchor, in anchor order.
    pub logits: Vec<f64>,
    /// `num_anchors x 4` raw offsets.
    pub offsets: Array2<f64>,
    hidden: Array3<f64>,
    conv_cache: ConvCache,
    cls_cache: ConvCache,
    reg_cache: ConvCache,
}

impl RpnOutput {
    pub fn signature(&self, hasher: &mut DefaultHasher) {
        crate::netcore::activation_signature(hasher, self.hidden.iter());
    }
}

impl RpnHead {
    pub fn new(channels: usize, per_cell: usize) -> Self {
        RpnHead {
            conv: Conv2d::new("rpn.conv", channels, channels, 3, 1),
            cls: Conv2d::new("rpn.cls", channels, per_cell, 1, 1),
            reg: Conv2d::new("rpn.reg", channels, 4 * per_cell, 1, 1),
            per_cell,
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.conv.init_he(params, rng);
        self.cls.init(params, 0.01, rng);
        self.reg.init(params, 0.01, rng);
    }

    pub fn forward(&self, params: &ModelParams, fm: &FeatureMap) -> Result<RpnOutput> {
        let (mut hidden, conv_cache) = self.conv.forward(params, &fm.values)?;
        relu(&mut hidden);
        let (cls, cls_cache) = self.cls.forward(params, &hidden)?;
        let (reg, reg_cache) = self.reg.forward(params, &hidden)?;
        let (_, h, w) = hidden.dim();
        let a = self.per_cell;
        let mut logits = Vec::with_capacity(h * w * a);
        let mut offsets = Array2::zeros((h * w * a, 4));
        for i in 0..h {
            for j in 0..w {
                for k in 0..a {
                    let idx = (i * w + j) * a + k;
                    logits.push(cls[[k, i, j]]);
                    for d in 0..4 {
                        offsets[[idx, d]] = reg[[4 * k + d, i, j]];
                    }
                }
            }
        }
        Ok(RpnOutput {
            logits,
            offsets,
            hidden,
            conv_cache,
            cls_cache,
            reg_cache,
        })
    }

    /// Returns the gradient with respect to the feature map.
    pub fn backward(
        &self,
        params: &ModelParams,
        out: &RpnOutput,
        d_logits: &[f64],
        d_offsets: &Array2<f64>,
        grads: &mut ModelParams,
    ) -> Result<Array3<f64>> {
        let (_, h, w) = out.hidden.dim();
        let a = self.per_cell;
        let mut d_cls = Array3::zeros((a, h, w));
        let mut d_reg = Array3::zeros((4 * a, h, w));
        for i in 0..h {
            for j in 0..w {
                for k in 0..a {
                    let idx = (i * w + j) * a + k;
                    d_cls[[k, i, j]] = d_logits[idx];
                    for d in 0..4 {
                        d_reg[[4 * k + d, i, j]] = d_offsets[[idx, d]];
                    }
                }
            }
        }
        let mut d_hidden = self.cls.backward(params, &out.cls_cache, &d_cls, grads)?;
        d_hidden += &self.reg.backward(params, &out.reg_cache, &d_reg, grads)?;
        relu_backward(&out.hidden, &mut d_hidden);
        self.conv.backward(params, &out.conv_cache, &d_hidden, grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Candidates kept by score before proposal NMS.
    pub pre_nms_top_n: usize,
    pub nms_threshold: f64,
    /// Proposals kept after NMS.
    pub top_n: usize,
    /// Minimum side length in pixels.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: 1000,
            nms_threshold: 0.7,
            top_n: 300,
            min_size: 2.0,
        }
    }
}

/// Decodes, clips and filters anchor predictions, then applies proposal NMS.
/// Returns `(box, objectness probability)` sorted by score.
pub fn rpn_proposals(
    anchors: &AnchorSet,
    out: &RpnOutput,
    weights: [f64; 4],
    bounds: ImageBounds,
    config: &ProposalConfig,
) -> Vec<(BBox, f64)> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| out.logits[b].total_cmp(&out.logits[a]));
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for &i in &order {
        if boxes.len() >= config.pre_nms_top_n {
            break;
        }
        let raw = out.offsets.row(i);
        let Ok(b) = decode_weighted(&anchors.boxes[i], raw.as_slice().expect("contiguous row"), weights, bounds) else {
            continue;
        };
        if b.width() < config.min_size || b.height() < config.min_size {
            continue;
        }
        boxes.push(b);
        scores.push(sigmoid(out.logits[i]));
    }
    let mut kept = nms_boxes(&boxes, &scores, config.nms_threshold);
    kept.truncate(config.top_n);
    kept.into_iter().map(|k| (boxes[k], scores[k])).collect()
}

/// Region head: RoI trunk, one classification logit, a primary regression
/// branch and an optional auxiliary one (used by the joint visible/full head).
#[derive(Debug, Clone)]
pub struct RegionHead {
    pub trunk: RoiMlp,
    pub cls: Linear,
    pub reg: Linear,
    pub reg_aux: Option<Linear>,
}

pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub offsets: Array2<f64>,
    pub offsets_aux: Option<Array2<f64>>,
    pub trunk: RoiMlpCache,
}

impl RegionHead {
    pub fn new(channels: usize, roi_size: usize, width: usize, auxiliary: bool) -> Self {
        RegionHead {
            trunk: RoiMlp::new("head", channels, roi_size, width, width),
            cls: Linear::new("head.cls", width, 1),
            reg: Linear::new("head.reg", width, 4),
            reg_aux: auxiliary.then(|| Linear::new("head.reg_aux", width, 4)),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.trunk.init(params, rng);
        self.cls.init(params, 0.01, rng);
        self.reg.init(params, 0.001, rng);
        if let Some(aux) = &self.reg_aux {
            aux.init(params, 0.001, rng);
        }
    }

    pub fn forward(&self, params: &ModelParams, fm: &FeatureMap, boxes: &[BBox]) -> Result<HeadOutput> {
        let trunk = self.trunk.forward(params, fm, boxes)?;
        let logits = self.cls.forward(params, &trunk.h2)?.column(0).to_vec();
        let offsets = self.reg.forward(params, &trunk.h2)?;
        let offsets_aux = match &self.reg_aux {
            Some(aux) => Some(aux.forward(params, &trunk.h2)?),
            None => None,
        };
        Ok(HeadOutput {
            logits,
            offsets,
            offsets_aux,
            trunk,
        })
    }

    pub fn backward(
        &self,
        params: &ModelParams,
        out: &HeadOutput,
        d_logits: &[f64],
        d_offsets: &Array2<f64>,
        d_offsets_aux: Option<&Array2<f64>>,
        grads: &mut ModelParams,
        d_fm: &mut Array3<f64>,
    ) -> Result<()> {
        let h2 = &out.trunk.h2;
        let d_cls = Array2::from_shape_vec((d_logits.len(), 1), d_logits.to_vec()).expect("column");
        let mut d_h2 = self.cls.backward(params, h2, &d_cls, grads)?;
        d_h2 += &self.reg.backward(params, h2, d_offsets, grads)?;
        if let (Some(aux), Some(d)) = (&self.reg_aux, d_offsets_aux) {
            d_h2 += &aux.backward(params, h2, d, grads)?;
        }
        self.trunk.backward(params, &out.trunk, d_h2, grads, d_fm)
    }

    /// Classification probabilities for the supplied boxes.
    pub fn score_boxes(&self, params: &ModelParams, fm: &FeatureMap, boxes: &[BBox]) -> Result<Vec<f64>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.forward(params, fm, boxes)?;
        Ok(out.logits.iter().map(|&l| sigmoid(l)).collect())
    }
}

/// A region-head detection before any pipeline-level NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdnDetection {
    pub visible: BBox,
    pub score: f64,
}

/// The four detector loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VdnLoss {
    pub cls1: f64,
    pub reg1: f64,
    pub cls2: f64,
    pub reg2: f64,
}

impl VdnLoss {
    pub fn total(&self) -> f64 {
        self.cls1 + self.reg1 + self.cls2 + self.reg2
    }
}

/// Detector loss from already-assigned samples.
///
/// `rpn_samples` / `roi_samples` hold `(row, positive)`; the target lists hold
/// weighted regression targets of positive rows.
#[allow(clippy::too_many_arguments)]
pub fn vdn_loss(
    rpn_logits: &[f64],
    rpn_offsets: &Array2<f64>,
    rpn_samples: &[(usize, bool)],
    rpn_targets: &[(usize, [f64; 4])],
    rpn_beta: f64,
    head_logits: &[f64],
    head_offsets: &Array2<f64>,
    roi_samples: &[(usize, bool)],
    roi_targets: &[(usize, [f64; 4])],
    head_beta: f64,
) -> VdnLoss {
    let mut h = DefaultHasher::new();
    VdnLoss {
        cls1: sampled_bce(rpn_logits, rpn_samples).0,
        reg1: sampled_smooth_l1(rpn_offsets, rpn_targets, rpn_beta, &mut h).0,
        cls2: sampled_bce(head_logits, roi_samples).0,
        reg2: sampled_smooth_l1(head_offsets, roi_targets, head_beta, &mut h).0,
    }
}
