//! Axis-aligned rectangle arithmetic.
//!
//! All boxes use continuous pixel coordinates in corner form `(x1, y1, x2, y2)`
//! with `x1 < x2` and `y1 < y2`. A [`BBox`] can only be built through a
//! validating constructor, so every other routine in the crate may assume a
//! strictly positive area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of body parts a full-body box is divided into.
pub const NUM_PARTS: usize = 5;

/// Default clamp applied to the log-size offsets before exponentiation.
pub const DEFAULT_OFFSET_CLAMP: f64 = 4.0;

/// Fraction of the full height taken by the head row.
const HEAD_FRACTION: f64 = 0.2;
/// Fraction of the full height where the leg rows begin.
const LEGS_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::DegenerateBox(format!("[{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Builds a box from `(x, y, w, h)`, the convention of odgt files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::DegenerateBox(format!(
                "non-positive size in [x={x}, y={y}, w={w}, h={h}]"
            )));
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// The overlapping rectangle, if it has positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, bounds: ImageBounds) -> Result<BBox> {
        BBox::new(
            self.x1.clamp(0.0, bounds.width),
            self.y1.clamp(0.0, bounds.height),
            self.x2.clamp(0.0, bounds.width),
            self.y2.clamp(0.0, bounds.height),
        )
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageBounds {
    pub width: f64,
    pub height: f64,
}

impl ImageBounds {
    pub fn new(width: f64, height: f64) -> Self {
        ImageBounds { width, height }
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Intersection over the area of `a`. Asymmetric: `ioa(a, b) = 1` when `a` lies inside `b`.
pub fn ioa(a: &BBox, b: &BBox) -> f64 {
    a.intersection_area(b) / a.area()
}

/// Box-regression parameterization: center shifts relative to the reference
/// size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffsetVector {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl OffsetVector {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        OffsetVector { tx, ty, tw, th }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        OffsetVector::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode_offsets(reference: &BBox, target: &BBox) -> OffsetVector {
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    OffsetVector {
        tx: (tcx - rcx) / rw,
        ty: (tcy - rcy) / rh,
        tw: (target.width() / rw).ln(),
        th: (target.height() / rh).ln(),
    }
}

/// Inverse of [`encode_offsets`] followed by clipping to the image.
pub fn decode_offsets(
    reference: &BBox,
    offsets: &OffsetVector,
    bounds: ImageBounds,
) -> Result<BBox> {
    decode_offsets_with_clamp(reference, offsets, bounds, DEFAULT_OFFSET_CLAMP)
}

pub fn decode_offsets_with_clamp(
    reference: &BBox,
    offsets: &OffsetVector,
    bounds: ImageBounds,
    clamp: f64,
) -> Result<BBox> {
    if !offsets.is_finite() {
        return Err(Error::DegenerateBox(format!("non-finite offsets {offsets:?}")));
    }
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rcx + offsets.tx * rw;
    let cy = rcy + offsets.ty * rh;
    let w = rw * offsets.tw.clamp(-clamp, clamp).exp();
    let h = rh * offsets.th.clamp(-clamp, clamp).exp();
    let x1 = (cx - 0.5 * w).clamp(0.0, bounds.width);
    let y1 = (cy - 0.5 * h).clamp(0.0, bounds.height);
    let x2 = (cx + 0.5 * w).clamp(0.0, bounds.width);
    let y2 = (cy + 0.5 * h).clamp(0.0, bounds.height);
    BBox::new(x1, y1, x2, y2)
}

/// The five body parts of a full-body box, in a fixed order: head, upper-left,
/// upper-right, lower-left, lower-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartBoxes {
    pub parts: [BBox; NUM_PARTS],
}

impl PartBoxes {
    pub fn iter(&self) -> impl Iterator<Item = &BBox> {
        self.parts.iter()
    }
}

/// Divides a full-body box into the part grid: the top 20% of the height is
/// the head; rows `[20%, 60%)` and `[60%, 100%]` are each split into a left and
/// a right half.
pub fn divide_parts(full: &BBox) -> PartBoxes {
    let h = full.height();
    let y_head = full.y1 + HEAD_FRACTION * h;
    let y_legs = full.y1 + LEGS_FRACTION * h;
    let x_mid = 0.5 * (full.x1 + full.x2);
    // Every piece has positive extent because `full` does.
    let mk = |x1, y1, x2, y2| BBox { x1, y1, x2, y2 };
    PartBoxes {
        parts: [
            mk(full.x1, full.y1, full.x2, y_head),
            mk(full.x1, y_head, x_mid, y_legs),
            mk(x_mid, y_head, full.x2, y_legs),
            mk(full.x1, y_legs, x_mid, full.y2),
            mk(x_mid, y_legs, full.x2, full.y2),
        ],
    }
}
