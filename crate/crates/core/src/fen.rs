//! Full-body estimation from visible boxes.

use std::collections::hash_map::DefaultHasher;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::data::GroundTruthPedestrian;
use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, iou, BBox, ImageBounds};
use crate::netcore::{FeatureMap, Linear, ModelParams, RoiMlp, RoiMlpCache};
use crate::vdn::{argmax_first, decode_weighted, sampled_smooth_l1, weighted_offsets};

/// IoU a visible box needs with a ground-truth visible box to be positive.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssignmentStatus {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AssignmentResult {
    pub status: AssignmentStatus,
    pub gt_index: Option<usize>,
}

impl AssignmentResult {
    pub const NEGATIVE: AssignmentResult = AssignmentResult {
        status: AssignmentStatus::Negative,
        gt_index: None,
    };

    pub fn positive(index: usize) -> Self {
        AssignmentResult {
            status: AssignmentStatus::Positive,
            gt_index: Some(index),
        }
    }

    pub fn is_positive(&self) -> bool {
        self.status == AssignmentStatus::Positive
    }
}

/// Matches a detected visible box to the ground truth whose visible box it
/// overlaps most. Ignore-flagged pedestrians never match.
pub fn assign_visible_to_gt(v: &BBox, gts: &[GroundTruthPedestrian]) -> AssignmentResult {
    let candidates: Vec<Option<BBox>> = gts.iter().map(|g| (!g.ignore).then_some(g.visible)).collect();
    assign_to_boxes(v, &candidates, POSITIVE_IOU)
}

/// Generic form of [`assign_visible_to_gt`]: `None` entries are excluded, ties
/// go to the lowest index, and a positive needs IoU >= `threshold`.
pub fn assign_to_boxes(b: &BBox, candidates: &[Option<BBox>], threshold: f64) -> AssignmentResult {
    let overlaps: Vec<f64> = candidates
        .iter()
        .map(|c| c.as_ref().map_or(f64::NEG_INFINITY, |c| iou(b, c)))
        .collect();
    if overlaps.is_empty() {
        return AssignmentResult::NEGATIVE;
    }
    let (best, value) = argmax_first(&overlaps);
    if value >= threshold {
        AssignmentResult::positive(best)
    } else {
        AssignmentResult::NEGATIVE
    }
}

/// Two rectified fully connected layers producing the transformed feature,
/// then an affine map to full-body offsets.
#[derive(Debug, Clone)]
pub struct FenHead {
    pub trunk: RoiMlp,
    pub reg: Linear,
}

pub struct FenOutput {
    /// `n x 4` raw (weighted) offsets.
    pub offsets: Array2<f64>,
    pub trunk: RoiMlpCache,
}

impl FenOutput {
    /// `n x d_p` transformed features, one row per input box.
    pub fn features(&self) -> &Array2<f64> {
        &self.trunk.h2
    }

    pub fn signature(&self, hasher: &mut DefaultHasher) {
        self.trunk.signature(hasher);
    }
}

impl FenHead {
    pub fn new(prefix: &str, channels: usize, roi_size: usize, width: usize, feature_dim: usize) -> Self {
        FenHead {
            trunk: RoiMlp::new(prefix, channels, roi_size, width, feature_dim),
            reg: Linear::new(&format!("{prefix}.reg"), feature_dim, 4),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.reg.input
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.trunk.init(params, rng);
        self.reg.init(params, 0.001, rng);
    }

    pub fn forward(&self, params: &ModelParams, fm: &FeatureMap, boxes: &[BBox]) -> Result<FenOutput> {
        let trunk = self.trunk.forward(params, fm, boxes)?;
        let offsets = self.reg.forward(params, &trunk.h2)?;
        Ok(FenOutput { offsets, trunk })
    }

    /// `d_features` is an extra gradient on the transformed features (from the
    /// part module); it is added to the one coming back from the offsets.
    pub fn backward(
        &self,
        params: &ModelParams,
        out: &FenOutput,
        d_offsets: &Array2<f64>,
        d_features: Option<&Array2<f64>>,
        grads: &mut ModelParams,
        d_fm: &mut Array3<f64>,
    ) -> Result<()> {
        let mut d_h2 = self.reg.backward(params, &out.trunk.h2, d_offsets, grads)?;
        if let Some(d) = d_features {
            d_h2 += d;
        }
        self.trunk.backward(params, &out.trunk, d_h2, grads, d_fm)
    }
}

/// Full boxes estimated from `visible_boxes`, clipped to the image, plus the
/// transformed feature of each box. Fails if any estimate clips to nothing.
pub fn fen_estimate(
    head: &FenHead,
    fm: &FeatureMap,
    visible_boxes: &[BBox],
    params: &ModelParams,
    weights: [f64; 4],
    bounds: ImageBounds,
) -> Result<(Vec<BBox>, Array2<f64>)> {
    let (full, features) = fen_estimate_each(head, fm, visible_boxes, params, weights, bounds)?;
    Ok((full.into_iter().collect::<Result<_>>()?, features))
}

/// Like [`fen_estimate`], but reports a fully clipped estimate per box so the
/// caller can drop it and keep the rest.
pub fn fen_estimate_each(
    head: &FenHead,
    fm: &FeatureMap,
    visible_boxes: &[BBox],
    params: &ModelParams,
    weights: [f64; 4],
    bounds: ImageBounds,
) -> Result<(Vec<Result<BBox>>, Array2<f64>)> {
    if visible_boxes.is_empty() {
        return Ok((Vec::new(), Array2::zeros((0, head.feature_dim()))));
    }
    let out = head.forward(params, fm, visible_boxes)?;
    let full = visible_boxes
        .iter()
        .zip(out.offsets.rows())
        .map(|(v, o)| decode_weighted(v, o.as_slice().expect("contiguous row"), weights, bounds))
        .collect();
    Ok((full, out.trunk.h2))
}

/// Smooth-L1 regression loss of predicted (weighted) offsets against the
/// encoding of each visible box onto its assigned full box, averaged over
/// samples. Returns the loss and its gradient with respect to `pred`.
pub fn fen_loss(
    pred: &Array2<f64>,
    visible: &[BBox],
    gt_full: &[BBox],
    weights: [f64; 4],
    beta: f64,
    hasher: &mut DefaultHasher,
) -> Result<(f64, Array2<f64>)> {
    if visible.is_empty() {
        return Err(Error::EmptyBatch("full-body regression has no positive samples"));
    }
    if pred.nrows() != visible.len() || gt_full.len() != visible.len() {
        return Err(Error::ShapeMismatch(format!(
            "fen_loss: {} predictions, {} visible boxes, {} targets",
            pred.nrows(),
            visible.len(),
            gt_full.len()
        )));
    }
    let targets: Vec<(usize, [f64; 4])> = visible
        .iter()
        .zip(gt_full)
        .enumerate()
        .map(|(i, (v, f))| (i, weighted_offsets(&encode_offsets(v, f), weights)))
        .collect();
    Ok(sampled_smooth_l1(pred, &targets, beta, hasher))
}
