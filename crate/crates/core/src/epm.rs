//! Part-aware auxiliary supervision. Used only during training.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hash;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{divide_parts, BBox, NUM_PARTS};
use crate::netcore::{sigmoid, uniform_tensor, ModelParams};

/// Parameter name of the part embedding matrix.
pub const EMBEDDING: &str = "epm.embedding";
/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.0005;
/// Response clamp used inside the logarithms.
pub const EPS: f64 = 1e-7;

pub type PartVector = [f64; NUM_PARTS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Hard,
    Soft,
}

/// Denominator of the overlap ratio used for part labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoaDenominator {
    /// Area of the visible box.
    #[default]
    Visible,
    /// Area of the part.
    Part,
}

pub fn init_embedding(params: &mut ModelParams, feature_dim: usize, rng: &mut impl Rng) {
    params.insert(EMBEDDING, uniform_tensor(&[NUM_PARTS, feature_dim], INIT_RANGE, rng));
}

/// `r_i = sigmoid(f . E_i)` for each part.
pub fn part_response(f: &[f64], e: ArrayView2<'_, f64>) -> Result<PartVector> {
    if e.dim() != (NUM_PARTS, f.len()) {
        return Err(Error::ShapeMismatch(format!(
            "part response: feature of length {} against embedding {:?}",
            f.len(),
            e.dim()
        )));
    }
    let mut r = [0.0; NUM_PARTS];
    for (ri, row) in r.iter_mut().zip(e.rows()) {
        *ri = sigmoid(row.iter().zip(f).map(|(a, b)| a * b).sum());
    }
    Ok(r)
}

/// Visibility label of each part of `full` given the visible box `v`.
pub fn part_labels(v: &BBox, full: &BBox, mode: LabelMode, denominator: IoaDenominator) -> PartVector {
    let parts = divide_parts(full);
    let mut y = [0.0; NUM_PARTS];
    for (yi, p) in y.iter_mut().zip(parts.iter()) {
        let inter = v.intersection_area(p);
        let ratio = match denominator {
            IoaDenominator::Visible => inter / v.area(),
            IoaDenominator::Part => inter / p.area(),
        };
        *yi = match mode {
            LabelMode::Hard => f64::from(u8::from(ratio >= 0.5)),
            LabelMode::Soft => ratio,
        };
    }
    y
}

fn clamped(r: f64) -> f64 {
    r.clamp(EPS, 1.0 - EPS)
}

/// Binary cross-entropy summed over the parts, with responses clamped to
/// `[EPS, 1 - EPS]`.
pub fn epm_loss(r: &PartVector, y: &PartVector) -> f64 {
    r.iter()
        .zip(y)
        .map(|(&ri, &yi)| {
            let c = clamped(ri);
            -(yi * c.ln() + (1.0 - yi) * (1.0 - c).ln())
        })
        .sum()
}

/// Mean part loss over a batch of features, with gradients for the features
/// and the embedding. Clamp activity is folded into `hasher`.
pub fn epm_batch_loss(
    features: &Array2<f64>,
    e: ArrayView2<'_, f64>,
    labels: &[PartVector],
    hasher: &mut DefaultHasher,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = features.nrows();
    if labels.len() != n || e.dim() != (NUM_PARTS, features.ncols()) {
        return Err(Error::ShapeMismatch(format!(
            "part loss: {n} features, {} label rows, embedding {:?}",
            labels.len(),
            e.dim()
        )));
    }
    let mut d_features = Array2::zeros(features.dim());
    let mut d_e = Array2::zeros(e.dim());
    if n == 0 {
        return Ok((0.0, d_features, d_e));
    }
    let logits = features.dot(&e.t());
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(logits.dim());
    for i in 0..n {
        let mut r = [0.0; NUM_PARTS];
        for p in 0..NUM_PARTS {
            r[p] = sigmoid(logits[[i, p]]);
            let inside = r[p] > EPS && r[p] < 1.0 - EPS;
            inside.hash(hasher);
            if inside {
                d_logits[[i, p]] = (r[p] - labels[i][p]) * scale;
            }
        }
        loss += epm_loss(&r, &labels[i]);
    }
    d_features += &d_logits.dot(&e);
    d_e += &d_logits.t().dot(features);
    Ok((loss * scale, d_features, d_e))
}
