//! Greedy non-maximum suppression over full or visible boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, NUM_PARTS};

/// NMS threshold used at inference, for either box source.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub full: Option<BBox>,
    pub visible: Option<BBox>,
    pub score: f64,
    pub part_scores: Option<[f64; NUM_PARTS]>,
}

impl Detection {
    pub fn full(full: BBox, score: f64) -> Self {
        Detection {
            full: Some(full),
            visible: None,
            score,
            part_scores: None,
        }
    }

    pub fn visible(visible: BBox, score: f64) -> Self {
        Detection {
            full: None,
            visible: Some(visible),
            score,
            part_scores: None,
        }
    }

    pub fn pair(full: BBox, visible: BBox, score: f64) -> Self {
        Detection {
            full: Some(full),
            visible: Some(visible),
            score,
            part_scores: None,
        }
    }

    pub fn boxed(&self, mode: NmsMode) -> Option<&BBox> {
        match mode {
            NmsMode::Full => self.full.as_ref(),
            NmsMode::Visible => self.visible.as_ref(),
        }
    }
}

/// Which box of a detection the suppression overlap test uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    Full,
    Visible,
}

impl NmsMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NmsMode::Full => "full",
            NmsMode::Visible => "visible",
        }
    }
}

impl std::fmt::Display for NmsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NmsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(NmsMode::Full),
            "visible" => Ok(NmsMode::Visible),
            other => Err(Error::Config(format!("unknown NMS mode `{other}`"))),
        }
    }
}

/// Indices of `scores` sorted by descending score; equal scores keep input order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy NMS on bare boxes. A box is suppressed when its IoU with an already
/// kept box is strictly greater than `threshold`. Returns kept indices in
/// score order.
pub fn nms_boxes(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn greedy_nms(dets: &[Detection], mode: NmsMode, threshold: f64) -> Result<Vec<usize>> {
    let boxes = dets
        .iter()
        .enumerate()
        .map(|(index, d)| {
            d.boxed(mode).copied().ok_or(Error::MissingBox {
                index,
                mode: mode.as_str(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    Ok(nms_boxes(&boxes, &scores, threshold))
}

/// Order-preserving subset of detections scoring at least `min_score`.
pub fn filter_by_score(dets: &[Detection], min_score: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= min_score).copied().collect()
}
