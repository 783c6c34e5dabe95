//! Differentiable building blocks shared by every head: a strided
//! convolutional feature extractor, fully connected layers and RoI-Align.
//!
//! Every layer exposes an explicit `forward` returning a cache and a `backward`
//! consuming it. Backward passes accumulate into a [`ModelParams`] used as a
//! gradient buffer, so several heads can feed the same parameter set.

use std::collections::BTreeMap;
use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::Hash;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Named parameter arrays. Also used as the gradient accumulator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter `{name}`")))
    }

    /// Views a parameter as a matrix of `rows x (len / rows)`.
    pub fn matrix(&self, name: &str, rows: usize) -> Result<ArrayView2<'_, f64>> {
        let t = self.get(name)?;
        let cols = if rows == 0 { 0 } else { t.len() / rows };
        if rows * cols != t.len() || !t.is_standard_layout() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` with shape {:?} cannot be viewed as {rows} rows",
                t.shape()
            )));
        }
        Ok(t.view().into_shape_with_order((rows, cols)).expect("checked").into_dimensionality::<Ix2>().expect("2d"))
    }

    pub fn matrix_mut(&mut self, name: &str, rows: usize) -> Result<ArrayViewMut2<'_, f64>> {
        let t = self.get_mut(name)?;
        let cols = if rows == 0 { 0 } else { t.len() / rows };
        if rows * cols != t.len() {
            return Err(Error::ShapeMismatch(format!("`{name}` cannot be viewed as {rows} rows")));
        }
        Ok(t.view_mut().into_shape_with_order((rows, cols)).expect("checked"))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        self.get(name)?
            .as_slice()
            .ok_or_else(|| Error::ShapeMismatch(format!("`{name}` is not contiguous")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.tensors.values_mut() {
            v.fill(0.0);
        }
    }

    /// `self += scale * other` for every tensor present in both.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (k, v) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                v.scaled_add(scale, o);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Sum of squares over all entries.
    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().flat_map(|v| v.iter()).map(|x| x * x).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }
}

/// Fully connected layer `y = x W^T + b` on a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            input,
            output,
        }
    }

    pub fn init(&self, params: &mut ModelParams, std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = ArrayD::from_shape_fn(IxDyn(&[self.output, self.input]), |_| normal.sample(rng));
        params.insert(self.weight.clone(), w);
        params.insert(self.bias.clone(), ArrayD::zeros(IxDyn(&[self.output])));
    }

    /// He-normal initialization for layers followed by a rectifier.
    pub fn init_he(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.init(params, (2.0 / self.input as f64).sqrt(), rng);
    }

    pub fn forward(&self, params: &ModelParams, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} inputs, got {}",
                self.weight,
                self.input,
                x.ncols()
            )));
        }
        let w = params.matrix(&self.weight, self.output)?;
        let b = params.vector(&self.bias)?;
        if w.ncols() != self.input || b.len() != self.output {
            return Err(Error::ShapeMismatch(format!("{}: parameter shape disagrees with layer", self.weight)));
        }
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &ModelParams,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut ModelParams,
    ) -> Result<Array2<f64>> {
        let w = params.matrix(&self.weight, self.output)?;
        {
            let mut gw = grads.matrix_mut(&self.weight, self.output)?;
            ndarray::linalg::general_mat_mul(1.0, &dy.t(), x, 1.0, &mut gw);
        }
        let gb = grads.get_mut(&self.bias)?;
        for row in dy.rows() {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok(dy.dot(&w))
    }
}

/// Square convolution with zero padding on a single `C x H x W` image.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn init(&self, params: &mut ModelParams, std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        params.insert(self.weight.clone(), ArrayD::from_shape_fn(IxDyn(&shape), |_| normal.sample(rng)));
        params.insert(self.bias.clone(), ArrayD::zeros(IxDyn(&[self.out_channels])));
    }

    pub fn init_he(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        self.init(params, (2.0 / fan_in as f64).sqrt(), rng);
    }

    pub fn output_dim(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.output_dim(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let xs = x.as_standard_layout();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("row contiguous");
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = xs[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dim;
        let (ho, wo) = self.output_dim(h, w);
        let k = self.kernel;
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = cols.row(row);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &ModelParams, x: &Array3<f64>) -> Result<(Array3<f64>, ConvCache)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} input channels, got {c}",
                self.weight, self.in_channels
            )));
        }
        let wm = params.matrix(&self.weight, self.out_channels)?;
        let b = params.vector(&self.bias)?;
        if wm.ncols() != c * self.kernel * self.kernel || b.len() != self.out_channels {
            return Err(Error::ShapeMismatch(format!("{}: parameter shape disagrees with layer", self.weight)));
        }
        let cols = self.im2col(x);
        let (ho, wo) = self.output_dim(h, w);
        let mut y = wm.dot(&cols);
        for (mut row, bb) in y.rows_mut().into_iter().zip(b) {
            row += *bb;
        }
        let y = y.into_shape_with_order((self.out_channels, ho, wo)).expect("shape");
        Ok((y, ConvCache { cols, in_dim: (c, h, w) }))
    }

    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grads: &mut ModelParams,
    ) -> Result<Array3<f64>> {
        let (co, ho, wo) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, ho * wo))
            .expect("shape");
        {
            let mut gw = grads.matrix_mut(&self.weight, self.out_channels)?;
            ndarray::linalg::general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut gw);
        }
        let gb = grads.get_mut(&self.bias)?;
        for (g, row) in gb.iter_mut().zip(dy2.rows()) {
            *g += row.sum();
        }
        let wm = params.matrix(&self.weight, self.out_channels)?;
        let dcols = wm.t().dot(&dy2);
        Ok(self.col2im(&dcols, cache.in_dim))
    }
}

pub fn relu<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the rectifier output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(out: &ndarray::Array<f64, D>, grad: &mut ndarray::Array<f64, D>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Folds the sign pattern of rectifier outputs into a hash, so callers can
/// tell whether two evaluations took the same piecewise-linear branch.
pub fn activation_signature<'a>(hasher: &mut DefaultHasher, values: impl IntoIterator<Item = &'a f64>) {
    let mut word = 0u64;
    let mut bits = 0;
    for v in values {
        word = (word << 1) | u64::from(*v > 0.0);
        bits += 1;
        if bits == 64 {
            word.hash(hasher);
            word = 0;
            bits = 0;
        }
    }
    (word, bits).hash(hasher);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// `(out_channels, stride)` of each 3x3 convolution.
    pub layers: Vec<(usize, usize)>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: vec![(16, 2), (32, 2), (64, 2), (64, 1)],
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.1).product()
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(3, |l| l.0)
    }

    fn convs(&self) -> Vec<Conv2d> {
        let mut cin = 3;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, &(cout, stride))| {
                let c = Conv2d::new(&format!("backbone.conv{}", i + 1), cin, cout, 3, stride);
                cin = cout;
                c
            })
            .collect()
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        for conv in self.convs() {
            conv.init_he(params, rng);
        }
    }
}

/// Stride-`s` feature map with values laid out `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

pub struct BackboneCache {
    convs: Vec<ConvCache>,
    /// Rectified outputs of every layer.
    outputs: Vec<Array3<f64>>,
}

impl BackboneCache {
    pub fn signature(&self, hasher: &mut DefaultHasher) {
        for o in &self.outputs {
            activation_signature(hasher, o.iter());
        }
    }
}

/// Converts an `H x W x 3` image to a zero-centered `3 x H' x W'` tensor padded
/// with zeros to a multiple of `stride`.
pub fn image_tensor(image: &Array3<f64>, stride: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    let mut t = Array3::zeros((c, ph, pw));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                t[[ch, y, x]] = image[[y, x, ch]] - 0.5;
            }
        }
    }
    t
}

/// Runs the strided convolution stack. Returns the feature map and a cache for
/// [`backbone_backward`].
pub fn extract_features(
    image: &Array3<f64>,
    params: &ModelParams,
    config: &BackboneConfig,
) -> Result<(FeatureMap, BackboneCache)> {
    if image.dim().2 != 3 {
        return Err(Error::ShapeMismatch(format!("expected an H x W x 3 image, got {:?}", image.dim())));
    }
    let stride = config.stride();
    let mut x = image_tensor(image, stride);
    let mut cache = BackboneCache {
        convs: Vec::new(),
        outputs: Vec::new(),
    };
    for conv in config.convs() {
        let (mut y, c) = conv.forward(params, &x)?;
        relu(&mut y);
        cache.convs.push(c);
        cache.outputs.push(y.clone());
        x = y;
    }
    Ok((FeatureMap { values: x, stride }, cache))
}

pub fn backbone_backward(
    params: &ModelParams,
    config: &BackboneConfig,
    cache: &BackboneCache,
    d_features: Array3<f64>,
    grads: &mut ModelParams,
) -> Result<()> {
    let convs = config.convs();
    let mut d = d_features;
    for (i, conv) in convs.iter().enumerate().rev() {
        relu_backward(&cache.outputs[i], &mut d);
        let dx = conv.backward(params, &cache.convs[i], &d, grads)?;
        if i > 0 {
            d = dx;
        }
    }
    Ok(())
}

/// Pooled `C x k x k` features of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoIFeature {
    pub values: Array3<f64>,
}

/// Bilinear sampling plan for one box: for each output bin, the feature-map
/// cells it reads and their weights (already divided by the sample count).
#[derive(Debug, Clone)]
pub struct RoiSampling {
    k: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

const ROI_SAMPLES: usize = 2;

impl RoiSampling {
    /// Plans RoI-Align for `b` on an `h x w` map of the given stride. Sample
    /// points sit at regular sub-bin positions; feature cell `(i, j)` is
    /// centered at `((j + 0.5) s, (i + 0.5) s)` in image coordinates.
    pub fn new(b: &BBox, h: usize, w: usize, stride: usize, k: usize) -> Result<Self> {
        if b.area() < 1.0 {
            return Err(Error::DegenerateBox(format!("RoI {:?} has area < 1 px^2", b.to_array())));
        }
        let s = stride as f64;
        let (x0, y0) = (b.x1() / s - 0.5, b.y1() / s - 0.5);
        let bin_w = b.width() / s / k as f64;
        let bin_h = b.height() / s / k as f64;
        let norm = 1.0 / (ROI_SAMPLES * ROI_SAMPLES) as f64;
        let mut taps = Vec::with_capacity(k * k);
        for by in 0..k {
            for bx in 0..k {
                let mut bin: Vec<(usize, f64)> = Vec::with_capacity(16);
                for iy in 0..ROI_SAMPLES {
                    let y = y0 + (by as f64 + (iy as f64 + 0.5) / ROI_SAMPLES as f64) * bin_h;
                    for ix in 0..ROI_SAMPLES {
                        let x = x0 + (bx as f64 + (ix as f64 + 0.5) / ROI_SAMPLES as f64) * bin_w;
                        for (idx, wt) in bilinear_taps(y, x, h, w) {
                            if wt != 0.0 {
                                match bin.iter_mut().find(|t| t.0 == idx) {
                                    Some(t) => t.1 += wt * norm,
                                    None => bin.push((idx, wt * norm)),
                                }
                            }
                        }
                    }
                }
                taps.push(bin);
            }
        }
        Ok(RoiSampling { k, taps })
    }

    /// Pools from a `C x (h*w)` view into a flat `C*k*k` row (channel-major).
    pub fn pool_into(&self, fm: ArrayView2<'_, f64>, out: &mut [f64]) {
        let kk = self.k * self.k;
        for (c, row) in fm.rows().into_iter().enumerate() {
            let row = row.as_slice().expect("contiguous");
            let dst = &mut out[c * kk..(c + 1) * kk];
            for (bin, taps) in self.taps.iter().enumerate() {
                dst[bin] = taps.iter().map(|&(i, w)| w * row[i]).sum();
            }
        }
    }

    /// Scatters a flat `C*k*k` gradient row back onto a `C x (h*w)` buffer.
    pub fn scatter_from(&self, grad: &[f64], mut d_fm: ArrayViewMut2<'_, f64>) {
        let kk = self.k * self.k;
        for (c, mut row) in d_fm.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("contiguous");
            let src = &grad[c * kk..(c + 1) * kk];
            for (bin, taps) in self.taps.iter().enumerate() {
                let g = src[bin];
                if g != 0.0 {
                    for &(i, w) in taps {
                        row[i] += w * g;
                    }
                }
            }
        }
    }
}

/// Corner indices and weights of a bilinear sample; empty outside the
/// `[-1, h] x [-1, w]` margin.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

fn fm_view(fm: &FeatureMap) -> ArrayView2<'_, f64> {
    let (c, h, w) = fm.values.dim();
    fm.values.view().into_shape_with_order((c, h * w)).expect("feature maps are contiguous")
}

pub fn roi_align(fm: &FeatureMap, b: &BBox, k: usize) -> Result<RoIFeature> {
    let (c, h, w) = fm.values.dim();
    let plan = RoiSampling::new(b, h, w, fm.stride, k)?;
    let mut out = vec![0.0; c * k * k];
    plan.pool_into(fm_view(fm), &mut out);
    Ok(RoIFeature {
        values: Array3::from_shape_vec((c, k, k), out).expect("shape"),
    })
}

/// RoI-Align over many boxes: returns `n x (C*k*k)` rows and the sampling plans.
pub fn roi_align_batch(fm: &FeatureMap, boxes: &[BBox], k: usize) -> Result<(Array2<f64>, Vec<RoiSampling>)> {
    let (c, h, w) = fm.values.dim();
    let view = fm_view(fm);
    let mut out = Array2::zeros((boxes.len(), c * k * k));
    let mut plans = Vec::with_capacity(boxes.len());
    for (b, mut row) in boxes.iter().zip(out.rows_mut()) {
        let plan = RoiSampling::new(b, h, w, fm.stride, k)?;
        plan.pool_into(view, row.as_slice_mut().expect("contiguous"));
        plans.push(plan);
    }
    Ok((out, plans))
}

/// Accumulates the gradient of pooled rows into `d_fm` (`C x H x W`).
pub fn roi_align_backward(plans: &[RoiSampling], d_rows: &Array2<f64>, d_fm: &mut Array3<f64>) {
    let (c, h, w) = d_fm.dim();
    let mut view = d_fm.view_mut().into_shape_with_order((c, h * w)).expect("contiguous");
    for (plan, row) in plans.iter().zip(d_rows.rows()) {
        plan.scatter_from(row.as_slice().expect("contiguous"), view.view_mut());
    }
}

/// RoI-Align followed by two rectified fully connected layers, the trunk of
/// every region head.
#[derive(Debug, Clone)]
pub struct RoiMlp {
    pub roi_size: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct RoiMlpCache {
    pooled: Array2<f64>,
    plans: Vec<RoiSampling>,
    h1: Array2<f64>,
    /// Output of the second layer, after the rectifier.
    pub h2: Array2<f64>,
}

impl RoiMlpCache {
    pub fn signature(&self, hasher: &mut DefaultHasher) {
        activation_signature(hasher, self.h1.iter());
        activation_signature(hasher, self.h2.iter());
    }
}

impl RoiMlp {
    pub fn new(prefix: &str, channels: usize, roi_size: usize, hidden: usize, output: usize) -> Self {
        RoiMlp {
            roi_size,
            fc1: Linear::new(&format!("{prefix}.fc1"), channels * roi_size * roi_size, hidden),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, output),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        self.fc1.init_he(params, rng);
        self.fc2.init_he(params, rng);
    }

    pub fn forward(&self, params: &ModelParams, fm: &FeatureMap, boxes: &[BBox]) -> Result<RoiMlpCache> {
        let (pooled, plans) = roi_align_batch(fm, boxes, self.roi_size)?;
        let mut h1 = self.fc1.forward(params, &pooled)?;
        relu(&mut h1);
        let mut h2 = self.fc2.forward(params, &h1)?;
        relu(&mut h2);
        Ok(RoiMlpCache { pooled, plans, h1, h2 })
    }

    /// Backpropagates `d_h2` (gradient w.r.t. the rectified output) into the
    /// parameters and into `d_fm`.
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &RoiMlpCache,
        mut d_h2: Array2<f64>,
        grads: &mut ModelParams,
        d_fm: &mut Array3<f64>,
    ) -> Result<()> {
        relu_backward(&cache.h2, &mut d_h2);
        let mut d_h1 = self.fc2.backward(params, &cache.h1, &d_h2, grads)?;
        relu_backward(&cache.h1, &mut d_h1);
        let d_pooled = self.fc1.backward(params, &cache.pooled, &d_h1, grads)?;
        roi_align_backward(&cache.plans, &d_pooled, d_fm);
        Ok(())
    }
}

/// Row-wise flatten of a batch of RoI features into an `n x (C*k*k)` matrix.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((n, d));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    out
}

/// Numerically stable binary cross-entropy on a logit. Returns the loss and its
/// derivative with respect to the logit.
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 of a residual. Returns the loss and its derivative.
pub fn smooth_l1(diff: f64, beta: f64) -> (f64, f64) {
    let a = diff.abs();
    if a < beta {
        (0.5 * diff * diff / beta, diff / beta)
    } else {
        (a - 0.5 * beta, diff.signum())
    }
}

/// Uniform initialization in `[-range, range]`.
pub fn uniform_tensor(shape: &[usize], range: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let u = Uniform::new_inclusive(-range, range).expect("valid range");
    ArrayD::from_shape_fn(IxDyn(shape), |_| u.sample(rng))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CRWDPED1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes one archive: magic, manifest length, JSON manifest, then all tensors
/// as little-endian `f64` in manifest order.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: serde_json::Value,
    config_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    let manifest = CheckpointManifest {
        dtype: "f64".into(),
        config_hash: config_hash.to_string(),
        config,
        tensors: params
            .iter()
            .map(|(k, v)| TensorEntry {
                name: k.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * params.num_values());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, v) in params.iter() {
        for x in v.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointManifest)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(header)?;
    if manifest.dtype != "f64" {
        return Err(bad(&format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut off = 16 + hlen;
    let mut params = ModelParams::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let end = off + 8 * n;
        let raw = bytes.get(off..end).ok_or_else(|| bad(&format!("truncated tensor {}", t.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data).map_err(|e| bad(&e.to_string()))?;
        params.insert(t.name.clone(), arr);
        off = end;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((params, manifest))
}

/// Crops rows `[r0, r1)` of a matrix into an owned copy.
pub fn rows_slice(m: &Array2<f64>, r0: usize, r1: usize) -> Array2<f64> {
    m.slice(s![r0..r1, ..]).to_owned()
}
