//! Training and inference for the four pipeline variants.
//!
//! * `F`: a detector regressing full-body boxes, NMS on full boxes.
//! * `V&F`: one region head predicting a full and a visible box per proposal.
//! * `F2`: `F` followed by a second regression head refining full boxes.
//! * `V2F`: a detector regressing visible boxes, NMS on visible boxes, then a
//!   full-body estimation head; part-aware supervision during training.
//!
//! A training step is split into discrete decisions (sampled anchors, RoIs and
//! second-stage boxes, kept in a [`StepPlan`]) and a smooth loss evaluated
//! under those decisions. Replaying a plan makes the loss a deterministic,
//! piecewise-smooth function of the parameters, which is what the gradient
//! checks rely on.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, GroundTruthPedestrian, SceneSample};
use crate::epm::{self, epm_batch_loss, part_labels, part_response, IoaDenominator, LabelMode, PartVector};
use crate::error::{Error, Result};
use crate::eval::{EvalMetrics, EvalSet};
use crate::fen::{assign_to_boxes, assign_visible_to_gt, fen_loss, AssignmentResult, FenHead};
use crate::geometry::{BBox, ImageBounds, NUM_PARTS};
use crate::netcore::{
    backbone_backward, extract_features, load_checkpoint, save_checkpoint, sigmoid, BackboneCache, BackboneConfig,
    CheckpointManifest, FeatureMap, ModelParams,
};
use crate::postprocess::{greedy_nms, Detection, NmsMode, DEFAULT_NMS_THRESHOLD};
use crate::vdn::{
    assign_rpn_targets_with, decode_weighted, generate_anchors, rpn_proposals, sample_balanced, sampled_bce,
    sampled_smooth_l1, weighted_offsets, AnchorConfig, AnchorLabel, AnchorSet, ProposalConfig, RegionHead, RpnHead,
    VdnLoss,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    F,
    #[serde(rename = "V&F", alias = "VF")]
    VF,
    #[serde(rename = "F2", alias = "F²")]
    F2,
    V2F,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::F, Variant::VF, Variant::F2, Variant::V2F];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::F => "F",
            Variant::VF => "V&F",
            Variant::F2 => "F2",
            Variant::V2F => "V2F",
        }
    }

    /// Box kind the detector (RPN and region head) regresses.
    pub fn detector_target(&self) -> BoxKind {
        match self {
            Variant::V2F => BoxKind::Visible,
            _ => BoxKind::Full,
        }
    }

    pub fn default_nms_mode(&self) -> NmsMode {
        match self {
            Variant::V2F | Variant::VF => NmsMode::Visible,
            Variant::F | Variant::F2 => NmsMode::Full,
        }
    }

    pub fn default_anchors(&self) -> AnchorConfig {
        match self.detector_target() {
            BoxKind::Visible => AnchorConfig::visible(),
            BoxKind::Full => AnchorConfig::full(),
        }
    }

    pub fn has_second_stage(&self) -> bool {
        matches!(self, Variant::V2F | Variant::F2)
    }

    pub fn has_epm(&self) -> bool {
        *self == Variant::V2F
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Variant::F),
            "V&F" | "VF" => Ok(Variant::VF),
            "F2" | "F²" => Ok(Variant::F2),
            "V2F" => Ok(Variant::V2F),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected F, V&F, F2 or V2F)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoxKind {
    Visible,
    Full,
}

impl BoxKind {
    pub fn pick(&self, g: &GroundTruthPedestrian) -> BBox {
        match self {
            BoxKind::Visible => g.visible,
            BoxKind::Full => g.full,
        }
    }
}

/// Architecture settings. Two checkpoints are compatible iff their variant
/// and model config hash equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` selects the variant's default anchor ratios.
    pub anchors: Option<AnchorConfig>,
    pub roi_size: usize,
    pub fc_width: usize,
    /// Width of the transformed feature shared with the part module.
    pub part_dim: usize,
    pub rpn_reg_weights: [f64; 4],
    pub head_reg_weights: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            anchors: None,
            roi_size: 7,
            fc_width: 256,
            part_dim: 64,
            rpn_reg_weights: [1.0; 4],
            head_reg_weights: [10.0, 10.0, 5.0, 5.0],
        }
    }
}

/// Variant plus model config: everything that determines parameter shapes and
/// their meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub variant: Variant,
    pub model: ModelConfig,
}

impl Architecture {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapRule {
    /// Draw `min(cap, |candidates|)` samples.
    #[default]
    Min,
    /// Draw `max(cap, |candidates|)`, which without replacement means all.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_pos_iou: f64,
    pub rpn_beta: f64,
    pub head_beta: f64,
    pub proposals: ProposalConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch: 256,
            roi_pos_fraction: 0.5,
            roi_pos_iou: 0.5,
            rpn_beta: 1.0 / 9.0,
            head_beta: 1.0,
            proposals: ProposalConfig {
                top_n: 256,
                ..ProposalConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// `None` selects the variant's default.
    pub nms_mode: Option<NmsMode>,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub proposals: ProposalConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            nms_mode: None,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            score_threshold: 0.05,
            max_detections: 100,
            proposals: ProposalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub alpha: f64,
    pub beta: f64,
    pub label_mode: LabelMode,
    pub ioa_denominator: IoaDenominator,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (1-based) after which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    /// Linear warm-up length in iterations.
    pub warmup_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Optional global gradient-norm clip.
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
    pub sample_cap: usize,
    pub cap_rule: CapRule,
    pub pos_fraction: f64,
    pub sampling: SamplingConfig,
    pub infer: InferConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::V2F,
            model: ModelConfig::default(),
            alpha: 0.3,
            beta: 1.0,
            label_mode: LabelMode::Hard,
            ioa_denominator: IoaDenominator::Visible,
            epochs: 20,
            lr: 1e-3,
            lr_decay_epochs: vec![14, 18],
            lr_decay: 0.1,
            warmup_iters: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 2,
            clip_grad_norm: None,
            seed: 0,
            sample_cap: 1000,
            cap_rule: CapRule::Min,
            pos_fraction: 0.9,
            sampling: SamplingConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            variant: self.variant,
            model: self.model.clone(),
        }
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            cap: self.sample_cap,
            cap_rule: self.cap_rule,
            pos_fraction: self.pos_fraction,
        }
    }

    /// Learning rate for 1-based `epoch` at global `iteration`.
    pub fn lr_at(&self, epoch: usize, iteration: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch > e).count();
        let mut lr = self.lr * self.lr_decay.powi(decays as i32);
        if iteration < self.warmup_iters {
            lr *= (iteration + 1) as f64 / self.warmup_iters as f64;
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction <= 1.0) {
            return bad(format!("pos_fraction must lie in (0, 1], got {}", self.pos_fraction));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.sample_cap == 0 {
            return bad("sample_cap must be at least 1".into());
        }
        let m = &self.model;
        if m.backbone.layers.is_empty() || m.backbone.layers.iter().any(|l| l.0 == 0 || l.1 == 0) {
            return bad("backbone layers need positive channels and strides".into());
        }
        if m.roi_size == 0 || m.fc_width == 0 || m.part_dim == 0 {
            return bad("roi_size, fc_width and part_dim must be positive".into());
        }
        let anchors = m.anchors.clone().unwrap_or_else(|| self.variant.default_anchors());
        if anchors.per_cell() == 0
            || anchors.scales.iter().chain(&anchors.ratios).any(|v| !(v.is_finite() && *v > 0.0))
            || !(anchors.base_factor > 0.0)
        {
            return bad("anchor scales, ratios and base factor must be positive".into());
        }
        if m.rpn_reg_weights.iter().chain(&m.head_reg_weights).any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("regression weights must be positive".into());
        }
        let s = &self.sampling;
        if s.rpn_batch == 0 || s.roi_batch == 0 || !(s.rpn_beta > 0.0) || !(s.head_beta > 0.0) {
            return bad("sampling batches and smooth-L1 betas must be positive".into());
        }
        if self.infer.nms_mode == Some(NmsMode::Visible) && matches!(self.variant, Variant::F | Variant::F2) {
            return bad(format!("variant {} has no visible boxes for visible-box NMS", self.variant));
        }
        Ok(())
    }
}

/// `L_VDN + alpha * L_FEN + beta * L_EPM`.
pub fn total_loss(l_vdn: f64, l_fen: f64, l_epm: f64, alpha: f64, beta: f64) -> f64 {
    l_vdn + alpha * l_fen + beta * l_epm
}

/// Per-term multipliers applied during backpropagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls1: f64,
    pub reg1: f64,
    pub cls2: f64,
    pub reg2: f64,
    pub fen: f64,
    pub epm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Cls1,
    Reg1,
    Cls2,
    Reg2,
    Fen,
    Epm,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Cls1,
        LossTerm::Reg1,
        LossTerm::Cls2,
        LossTerm::Reg2,
        LossTerm::Fen,
        LossTerm::Epm,
    ];
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        LossWeights {
            cls1: 1.0,
            reg1: 1.0,
            cls2: 1.0,
            reg2: 1.0,
            fen: alpha,
            epm: beta,
        }
    }

    /// Weight one on `term`, zero elsewhere.
    pub fn only(term: LossTerm) -> Self {
        let mut w = LossWeights {
            cls1: 0.0,
            reg1: 0.0,
            cls2: 0.0,
            reg2: 0.0,
            fen: 0.0,
            epm: 0.0,
        };
        *match term {
            LossTerm::Cls1 => &mut w.cls1,
            LossTerm::Reg1 => &mut w.reg1,
            LossTerm::Cls2 => &mut w.cls2,
            LossTerm::Reg2 => &mut w.reg2,
            LossTerm::Fen => &mut w.fen,
            LossTerm::Epm => &mut w.epm,
        } = 1.0;
        w
    }

    fn second_stage(&self) -> bool {
        self.fen != 0.0 || self.epm != 0.0
    }
}

/// Loss values of one step (or an average of steps).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub vdn: VdnLoss,
    pub fen: f64,
    pub epm: f64,
}

impl StepLosses {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.cls1 * self.vdn.cls1
            + w.reg1 * self.vdn.reg1
            + w.cls2 * self.vdn.cls2
            + w.reg2 * self.vdn.reg2
            + w.fen * self.fen
            + w.epm * self.epm
    }

    pub fn total(&self, alpha: f64, beta: f64) -> f64 {
        total_loss(self.vdn.total(), self.fen, self.epm, alpha, beta)
    }

    fn components(&self) -> [f64; 6] {
        [self.vdn.cls1, self.vdn.reg1, self.vdn.cls2, self.vdn.reg2, self.fen, self.epm]
    }

    fn add_scaled(&mut self, o: &StepLosses, s: f64) {
        self.vdn.cls1 += s * o.vdn.cls1;
        self.vdn.reg1 += s * o.vdn.reg1;
        self.vdn.cls2 += s * o.vdn.cls2;
        self.vdn.reg2 += s * o.vdn.reg2;
        self.fen += s * o.fen;
        self.epm += s * o.epm;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub cap: usize,
    pub cap_rule: CapRule,
    pub pos_fraction: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            cap: 1000,
            cap_rule: CapRule::Min,
            pos_fraction: 0.9,
        }
    }
}

/// The augmented candidate set (detections followed by ground-truth boxes),
/// the assignment of every candidate and the sampled subset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatchSamples {
    pub candidates: Vec<BBox>,
    pub num_detected: usize,
    pub assignments: Vec<AssignmentResult>,
    /// Indices into `candidates`.
    pub sampled: Vec<usize>,
}

impl TrainingBatchSamples {
    pub fn positive_mask(&self) -> Vec<bool> {
        self.sampled.iter().map(|&i| self.assignments[i].is_positive()).collect()
    }
}

/// Builds the second-stage batch for visible boxes.
pub fn build_training_batch(
    detected: &[BBox],
    gts: &[GroundTruthPedestrian],
    config: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> TrainingBatchSamples {
    build_training_batch_for(detected, gts, BoxKind::Visible, config, rng)
}

/// Candidates are `detected` plus the `kind` boxes of every non-ignored
/// ground truth, with no NMS. Draws the configured number of samples aiming
/// at `pos_fraction` positives and backfilling from whichever class remains.
pub fn build_training_batch_for(
    detected: &[BBox],
    gts: &[GroundTruthPedestrian],
    kind: BoxKind,
    config: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> TrainingBatchSamples {
    let targets: Vec<Option<BBox>> = gts.iter().map(|g| (!g.ignore).then(|| kind.pick(g))).collect();
    let mut candidates = detected.to_vec();
    candidates.extend(targets.iter().flatten());
    let assignments: Vec<AssignmentResult> = match kind {
        BoxKind::Visible => candidates.iter().map(|c| assign_visible_to_gt(c, gts)).collect(),
        BoxKind::Full => candidates
            .iter()
            .map(|c| assign_to_boxes(c, &targets, crate::fen::POSITIVE_IOU))
            .collect(),
    };
    let n = match config.cap_rule {
        CapRule::Min => config.cap.min(candidates.len()),
        CapRule::Max => candidates.len(),
    };
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..candidates.len()).partition(|&i| assignments[i].is_positive());
    pos.shuffle(rng);
    neg.shuffle(rng);
    let want_pos = (config.pos_fraction * n as f64).round() as usize;
    let mut n_pos = want_pos.min(pos.len());
    let n_neg = (n - n_pos).min(neg.len());
    n_pos = (n - n_neg).min(pos.len());
    let mut sampled: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    sampled.sort_unstable();
    TrainingBatchSamples {
        candidates,
        num_detected: detected.len(),
        assignments,
        sampled,
    }
}

/// Discrete decisions of one training step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepPlan {
    pub rpn_samples: Vec<(usize, bool)>,
    pub rpn_targets: Vec<(usize, [f64; 4])>,
    /// Proposals followed by ground-truth boxes.
    pub rois: Vec<BBox>,
    pub num_proposals: usize,
    pub roi_samples: Vec<(usize, bool)>,
    pub roi_targets: Vec<(usize, [f64; 4])>,
    pub roi_aux_targets: Vec<(usize, [f64; 4])>,
    pub second: Option<SecondPlan>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SecondPlan {
    pub boxes: Vec<BBox>,
    /// `(row, ground-truth full box)` of positive rows.
    pub targets: Vec<(usize, BBox)>,
    /// Part labels of every row; empty when the variant has no part module.
    pub labels: Vec<PartVector>,
}

pub enum PlanSource<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Replay(&'a StepPlan),
}

pub struct StepOutput {
    pub plan: StepPlan,
    pub losses: StepLosses,
    /// Hash of every piecewise branch taken (rectifiers, smooth-L1 pieces,
    /// response clamps). Equal signatures mean the same smooth piece.
    pub signature: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagnosticMode {
    #[serde(rename = "p-vdn")]
    PVdn,
    #[serde(rename = "p-vdn+nms")]
    PVdnNms,
    #[serde(rename = "p-fen")]
    PFen,
}

impl DiagnosticMode {
    pub const ALL: [DiagnosticMode; 3] = [DiagnosticMode::PVdn, DiagnosticMode::PVdnNms, DiagnosticMode::PFen];

    pub fn as_str(&self) -> &'static str {
        match self {
            DiagnosticMode::PVdn => "p-vdn",
            DiagnosticMode::PVdnNms => "p-vdn+nms",
            DiagnosticMode::PFen => "p-fen",
        }
    }
}

impl FromStr for DiagnosticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DiagnosticMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown diagnostic `{s}` (expected p-vdn, p-vdn+nms or p-fen)")))
    }
}

/// Pre-NMS candidates, the indices NMS kept, and the final detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferTrace {
    pub candidates: Vec<Detection>,
    pub kept: Vec<usize>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub anchors: AnchorConfig,
    pub rpn: RpnHead,
    pub head: RegionHead,
    /// Full-body estimation head (`V2F`) or refinement head (`F2`).
    pub second: Option<FenHead>,
}

fn non_ignored(gts: &[GroundTruthPedestrian]) -> Vec<GroundTruthPedestrian> {
    gts.iter().filter(|g| !g.ignore).copied().collect()
}

fn row(m: &Array2<f64>, r: usize) -> &[f64] {
    // Rows of standard-layout matrices are contiguous.
    let cols = m.ncols();
    &m.as_slice().expect("standard layout")[r * cols..(r + 1) * cols]
}

impl Model {
    pub fn new(variant: Variant, config: &ModelConfig) -> Self {
        let channels = config.backbone.channels();
        let anchors = config.anchors.clone().unwrap_or_else(|| variant.default_anchors());
        let second = match variant {
            Variant::V2F => Some(FenHead::new("fen", channels, config.roi_size, config.fc_width, config.part_dim)),
            Variant::F2 => Some(FenHead::new("refine", channels, config.roi_size, config.fc_width, config.part_dim)),
            _ => None,
        };
        Model {
            variant,
            config: config.clone(),
            rpn: RpnHead::new(channels, anchors.per_cell()),
            head: RegionHead::new(channels, config.roi_size, config.fc_width, variant == Variant::VF),
            second,
            anchors,
        }
    }

    pub fn from_architecture(arch: &Architecture) -> Self {
        Model::new(arch.variant, &arch.model)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            variant: self.variant,
            model: self.config.clone(),
        }
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        self.config.backbone.init(&mut params, &mut rng);
        self.rpn.init(&mut params, &mut rng);
        self.head.init(&mut params, &mut rng);
        if let Some(second) = &self.second {
            second.init(&mut params, &mut rng);
        }
        if self.variant.has_epm() {
            epm::init_embedding(&mut params, self.config.part_dim, &mut rng);
        }
        params
    }

    /// Whether an optimizer step may change `name` under `weights`: tensors
    /// that only receive gradient from zero-weighted terms stay frozen.
    pub fn is_trainable(&self, name: &str, weights: &LossWeights) -> bool {
        if name.starts_with("epm.") {
            weights.epm != 0.0
        } else if name.starts_with("fen.") || name.starts_with("refine.") {
            weights.fen != 0.0 || (self.variant.has_epm() && weights.epm != 0.0)
        } else {
            true
        }
    }

    pub fn features(&self, params: &ModelParams, image: &Array3<f64>) -> Result<(FeatureMap, BackboneCache)> {
        extract_features(image, params, &self.config.backbone)
    }

    pub fn anchors_for(&self, fm: &FeatureMap) -> AnchorSet {
        let a = &self.anchors;
        let base = a.base_factor * fm.stride as f64;
        generate_anchors(fm.height(), fm.width(), fm.stride, base, &a.scales, &a.ratios)
    }

    fn second_head(&self) -> Result<&FenHead> {
        self.second
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no second-stage head", self.variant)))
    }

    /// One forward pass (and optionally backward pass) of the training loss.
    pub fn train_step(
        &self,
        params: &ModelParams,
        sample: &SceneSample,
        config: &TrainConfig,
        source: PlanSource<'_>,
        weights: &LossWeights,
        grads: Option<&mut ModelParams>,
    ) -> Result<StepOutput> {
        let bounds = sample.bounds();
        let kind = self.variant.detector_target();
        let gts = non_ignored(&sample.pedestrians);
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| kind.pick(g)).collect();
        let s = &config.sampling;
        let rpn_w = self.config.rpn_reg_weights;
        let head_w = self.config.head_reg_weights;
        let mut hasher = DefaultHasher::new();

        let (fm, backbone_cache) = self.features(params, &sample.image)?;
        backbone_cache.signature(&mut hasher);
        let rpn_out = self.rpn.forward(params, &fm)?;
        rpn_out.signature(&mut hasher);

        let (mut plan, mut rng) = match source {
            PlanSource::Fresh(rng) => (StepPlan::default(), Some(rng)),
            PlanSource::Replay(plan) => (plan.clone(), None),
        };

        if let Some(rng) = rng.as_deref_mut() {
            let anchors = self.anchors_for(&fm);
            let t = assign_rpn_targets_with(&anchors.boxes, &gt_boxes, s.rpn_pos_iou, s.rpn_neg_iou);
            let pick = |label| (0..anchors.len()).filter(|&i| t.labels[i] == label).collect::<Vec<_>>();
            let (pos, neg) = sample_balanced(
                pick(AnchorLabel::Positive),
                pick(AnchorLabel::Negative),
                s.rpn_batch,
                s.rpn_pos_fraction,
                rng,
            );
            plan.rpn_targets = pos
                .iter()
                .map(|&i| (i, weighted_offsets(&t.offsets[i].expect("positive has target"), rpn_w)))
                .collect();
            plan.rpn_samples = pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))).collect();

            let proposals = rpn_proposals(&anchors, &rpn_out, rpn_w, bounds, &s.proposals);
            plan.rois = proposals.iter().map(|p| p.0).collect();
            plan.num_proposals = plan.rois.len();
            plan.rois.extend(&gt_boxes);
            let candidates: Vec<Option<BBox>> = gt_boxes.iter().copied().map(Some).collect();
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            let mut matched = vec![None; plan.rois.len()];
            for (r, roi) in plan.rois.iter().enumerate() {
                let a = assign_to_boxes(roi, &candidates, s.roi_pos_iou);
                matched[r] = a.gt_index;
                if a.is_positive() {
                    pos.push(r)
                } else {
                    neg.push(r)
                }
            }
            let (pos, neg) = sample_balanced(pos, neg, s.roi_batch, s.roi_pos_fraction, rng);
            let encode = |r: usize, target: BBox| (r, weighted_offsets(&crate::geometry::encode_offsets(&plan.rois[r], &target), head_w));
            plan.roi_targets = pos.iter().map(|&r| encode(r, gt_boxes[matched[r].unwrap()])).collect();
            if self.variant == Variant::VF {
                plan.roi_aux_targets = pos.iter().map(|&r| encode(r, gts[matched[r].unwrap()].visible)).collect();
            }
            plan.roi_samples = pos.iter().map(|&r| (r, true)).chain(neg.iter().map(|&r| (r, false))).collect();
        }

        let mut losses = StepLosses::default();
        let (cls1, d_rpn_logits) = sampled_bce(&rpn_out.logits, &plan.rpn_samples);
        let (reg1, d_rpn_offsets) = sampled_smooth_l1(&rpn_out.offsets, &plan.rpn_targets, s.rpn_beta, &mut hasher);
        losses.vdn.cls1 = cls1;
        losses.vdn.reg1 = reg1;

        let head_out = if plan.rois.is_empty() {
            None
        } else {
            Some(self.head.forward(params, &fm, &plan.rois)?)
        };
        let mut head_grads = None;
        if let Some(out) = &head_out {
            out.trunk.signature(&mut hasher);
            let (cls2, d_logits) = sampled_bce(&out.logits, &plan.roi_samples);
            let (reg2, d_offsets) = sampled_smooth_l1(&out.offsets, &plan.roi_targets, s.head_beta, &mut hasher);
            losses.vdn.cls2 = cls2;
            losses.vdn.reg2 = reg2;
            let d_aux = match &out.offsets_aux {
                Some(aux) => {
                    let (l, d) = sampled_smooth_l1(aux, &plan.roi_aux_targets, s.head_beta, &mut hasher);
                    losses.vdn.reg2 += l;
                    Some(d)
                }
                None => None,
            };
            head_grads = Some((d_logits, d_offsets, d_aux));
        }

        // Second stage: build the batch from this step's detections.
        let run_second = self.variant.has_second_stage() && weights.second_stage();
        if let (true, Some(rng), Some(out)) = (run_second, rng.as_deref_mut(), &head_out) {
            let detected: Vec<BBox> = (0..plan.num_proposals)
                .filter_map(|r| decode_weighted(&plan.rois[r], row(&out.offsets, r), head_w, bounds).ok())
                .filter(|b| b.width() >= s.proposals.min_size && b.height() >= s.proposals.min_size)
                .collect();
            let batch = build_training_batch_for(&detected, &sample.pedestrians, kind, &config.batch_config(), rng);
            let mut second = SecondPlan::default();
            for &c in &batch.sampled {
                let b = batch.candidates[c];
                let a = batch.assignments[c];
                let rowi = second.boxes.len();
                second.boxes.push(b);
                if let Some(j) = a.gt_index {
                    second.targets.push((rowi, sample.pedestrians[j].full));
                }
                if self.variant.has_epm() {
                    second.labels.push(match a.gt_index {
                        Some(j) => part_labels(&b, &sample.pedestrians[j].full, config.label_mode, config.ioa_denominator),
                        None => [0.0; NUM_PARTS],
                    });
                }
            }
            plan.second = Some(second);
        }

        let mut second_out = None;
        if let (true, Some(plan2)) = (run_second, &plan.second) {
            if !plan2.boxes.is_empty() {
                let head2 = self.second_head()?;
                let out = head2.forward(params, &fm, &plan2.boxes)?;
                out.signature(&mut hasher);
                let mut d_offsets = Array2::zeros(out.offsets.dim());
                if !plan2.targets.is_empty() {
                    let rows: Vec<usize> = plan2.targets.iter().map(|t| t.0).collect();
                    let pred = out.offsets.select(ndarray::Axis(0), &rows);
                    let visible: Vec<BBox> = rows.iter().map(|&r| plan2.boxes[r]).collect();
                    let full: Vec<BBox> = plan2.targets.iter().map(|t| t.1).collect();
                    let (l, d) = fen_loss(&pred, &visible, &full, head_w, s.head_beta, &mut hasher)?;
                    losses.fen = l;
                    for (k, &r) in rows.iter().enumerate() {
                        d_offsets.row_mut(r).assign(&d.row(k));
                    }
                }
                let mut epm_grads = None;
                if self.variant.has_epm() {
                    let e = params.matrix(epm::EMBEDDING, NUM_PARTS)?;
                    let (l, d_feat, d_e) = epm_batch_loss(out.features(), e, &plan2.labels, &mut hasher)?;
                    losses.epm = l;
                    epm_grads = Some((d_feat, d_e));
                }
                second_out = Some((out, d_offsets, epm_grads));
            }
        }

        for v in losses.components() {
            if !v.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch: 0,
                    iteration: 0,
                    detail: format!("non-finite loss component in {losses:?}"),
                });
            }
        }

        if let Some(grads) = grads {
            let mut d_fm = Array3::zeros(fm.values.dim());
            if weights.cls1 != 0.0 || weights.reg1 != 0.0 {
                let d_logits: Vec<f64> = d_rpn_logits.iter().map(|d| d * weights.cls1).collect();
                let d_offsets = d_rpn_offsets * weights.reg1;
                d_fm += &self.rpn.backward(params, &rpn_out, &d_logits, &d_offsets, grads)?;
            }
            if let (Some(out), Some((d_logits, d_offsets, d_aux))) = (&head_out, head_grads) {
                if weights.cls2 != 0.0 || weights.reg2 != 0.0 {
                    let d_logits: Vec<f64> = d_logits.iter().map(|d| d * weights.cls2).collect();
                    let d_aux = d_aux.map(|d| d * weights.reg2);
                    self.head.backward(params, out, &d_logits, &(d_offsets * weights.reg2), d_aux.as_ref(), grads, &mut d_fm)?;
                }
            }
            if let Some((out, d_offsets, epm_grads)) = second_out {
                let head2 = self.second_head()?;
                let d_feat = match &epm_grads {
                    Some((d_feat, d_e)) if weights.epm != 0.0 => {
                        let mut g = grads.matrix_mut(epm::EMBEDDING, NUM_PARTS)?;
                        g.scaled_add(weights.epm, d_e);
                        Some(d_feat * weights.epm)
                    }
                    _ => None,
                };
                head2.backward(params, &out, &(d_offsets * weights.fen), d_feat.as_ref(), grads, &mut d_fm)?;
            }
            backbone_backward(params, &self.config.backbone, &backbone_cache, d_fm, grads)?;
        }

        Ok(StepOutput {
            plan,
            losses,
            signature: hasher.finish(),
        })
    }

    /// Region-head probabilities for caller-supplied boxes, bypassing the RPN.
    pub fn score_given_boxes(&self, params: &ModelParams, image: &Array3<f64>, boxes: &[BBox]) -> Result<Vec<f64>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let (fm, _) = self.features(params, image)?;
        self.head.score_boxes(params, &fm, boxes)
    }

    fn second_boxes(
        &self,
        params: &ModelParams,
        fm: &FeatureMap,
        inputs: &[BBox],
        bounds: ImageBounds,
    ) -> Result<(Vec<Result<BBox>>, Array2<f64>)> {
        crate::fen::fen_estimate_each(self.second_head()?, fm, inputs, params, self.config.head_reg_weights, bounds)
    }

    /// Full-body estimates and transformed features for given visible boxes.
    pub fn estimate_full(&self, params: &ModelParams, image: &Array3<f64>, visible: &[BBox]) -> Result<(Vec<BBox>, Array2<f64>)> {
        let (fm, _) = self.features(params, image)?;
        let (full, features) = self.second_boxes(params, &fm, visible, image_bounds(image))?;
        Ok((full.into_iter().collect::<Result<_>>()?, features))
    }

    /// Part responses for given visible boxes. Requires the part embedding.
    pub fn part_scores(&self, params: &ModelParams, image: &Array3<f64>, visible: &[BBox]) -> Result<Vec<PartVector>> {
        let (fm, _) = self.features(params, image)?;
        let (_, features) = self.second_boxes(params, &fm, visible, image_bounds(image))?;
        let e = params.matrix(epm::EMBEDDING, NUM_PARTS)?;
        features
            .rows()
            .into_iter()
            .map(|f| part_response(f.as_slice().expect("contiguous row"), e))
            .collect()
    }

    /// Region-head detections before pipeline NMS, with primary boxes filled in.
    fn candidates(&self, params: &ModelParams, fm: &FeatureMap, bounds: ImageBounds, config: &InferConfig) -> Result<Vec<Detection>> {
        let anchors = self.anchors_for(fm);
        let rpn_out = self.rpn.forward(params, fm)?;
        let proposals = rpn_proposals(&anchors, &rpn_out, self.config.rpn_reg_weights, bounds, &config.proposals);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.0).collect();
        let out = self.head.forward(params, fm, &boxes)?;
        let w = self.config.head_reg_weights;
        let mut dets = Vec::new();
        for (r, b) in boxes.iter().enumerate() {
            let score = sigmoid(out.logits[r]);
            if score < config.score_threshold {
                continue;
            }
            // Boxes clipped thinner than the proposal minimum cannot be pooled
            // by a second stage; training drops them the same way.
            let min = config.proposals.min_size;
            let Some(primary) = decode_weighted(b, row(&out.offsets, r), w, bounds)
                .ok()
                .filter(|p| p.width() >= min && p.height() >= min)
            else {
                continue;
            };
            let det = match self.variant {
                Variant::V2F => Detection::visible(primary, score),
                Variant::F | Variant::F2 => Detection::full(primary, score),
                Variant::VF => {
                    let aux = out.offsets_aux.as_ref().expect("joint head has auxiliary branch");
                    let Ok(visible) = decode_weighted(b, row(aux, r), w, bounds) else {
                        continue;
                    };
                    Detection::pair(primary, visible, score)
                }
            };
            dets.push(det);
        }
        Ok(dets)
    }

    /// Fills in full boxes from the second stage (estimation from visible
    /// boxes, or refinement of full boxes). Detections whose full box falls
    /// entirely outside the image are dropped.
    fn apply_second(&self, params: &ModelParams, fm: &FeatureMap, dets: &mut Vec<Detection>, bounds: ImageBounds) -> Result<()> {
        let inputs: Vec<BBox> = dets
            .iter()
            .map(|d| match self.variant {
                Variant::V2F => d.visible.expect("visible detection"),
                _ => d.full.expect("full detection"),
            })
            .collect();
        let (full, _) = self.second_boxes(params, fm, &inputs, bounds)?;
        let mut estimates = full.into_iter();
        dets.retain_mut(|d| match estimates.next().expect("one estimate per detection") {
            Ok(f) => {
                d.full = Some(f);
                true
            }
            Err(_) => false,
        });
        Ok(())
    }

    fn nms_and_finish(
        &self,
        params: &ModelParams,
        fm: &FeatureMap,
        mut candidates: Vec<Detection>,
        bounds: ImageBounds,
        config: &InferConfig,
        apply_nms: bool,
    ) -> Result<InferTrace> {
        let mode = config.nms_mode.unwrap_or_else(|| self.variant.default_nms_mode());
        let late_second = self.variant == Variant::V2F && mode == NmsMode::Visible;
        if self.variant.has_second_stage() && !late_second && !candidates.is_empty() {
            self.apply_second(params, fm, &mut candidates, bounds)?;
        }
        let kept = if apply_nms {
            greedy_nms(&candidates, mode, config.nms_threshold)?
        } else {
            crate::postprocess::score_order(&candidates.iter().map(|d| d.score).collect::<Vec<_>>())
        };
        let mut detections: Vec<Detection> = kept.iter().map(|&k| candidates[k]).collect();
        detections.truncate(config.max_detections);
        if late_second && !detections.is_empty() {
            self.apply_second(params, fm, &mut detections, bounds)?;
        }
        Ok(InferTrace {
            candidates,
            kept,
            detections,
        })
    }

    pub fn infer_trace(&self, params: &ModelParams, image: &Array3<f64>, config: &InferConfig) -> Result<InferTrace> {
        let bounds = image_bounds(image);
        let (fm, _) = self.features(params, image)?;
        let candidates = self.candidates(params, &fm, bounds, config)?;
        self.nms_and_finish(params, &fm, candidates, bounds, config, true)
    }

    pub fn infer(&self, params: &ModelParams, image: &Array3<f64>, config: &InferConfig) -> Result<Vec<Detection>> {
        Ok(self.infer_trace(params, image, config)?.detections)
    }

    /// Detections of one image with a component replaced by ground truth.
    pub fn diagnostic_detections(
        &self,
        mode: DiagnosticMode,
        params: &ModelParams,
        sample: &SceneSample,
        config: &InferConfig,
    ) -> Result<Vec<Detection>> {
        if self.variant != Variant::V2F {
            return Err(Error::Config(format!("diagnostics need the V2F variant, not {}", self.variant)));
        }
        let bounds = sample.bounds();
        let (fm, _) = self.features(params, &sample.image)?;
        let gts = non_ignored(&sample.pedestrians);
        let visible_config = InferConfig {
            nms_mode: Some(NmsMode::Visible),
            ..*config
        };
        match mode {
            DiagnosticMode::PVdn | DiagnosticMode::PVdnNms => {
                let boxes: Vec<BBox> = gts.iter().map(|g| g.visible).collect();
                let scores = self.head.score_boxes(params, &fm, &boxes)?;
                let candidates = boxes.iter().zip(scores).map(|(b, s)| Detection::visible(*b, s)).collect();
                let nms = mode == DiagnosticMode::PVdn;
                Ok(self.nms_and_finish(params, &fm, candidates, bounds, &visible_config, nms)?.detections)
            }
            DiagnosticMode::PFen => {
                let candidates = self.candidates(params, &fm, bounds, &visible_config)?;
                let mut dets = self.nms_and_finish(params, &fm, candidates, bounds, &visible_config, true)?.detections;
                for d in &mut dets {
                    let a = assign_visible_to_gt(&d.visible.expect("visible detection"), &sample.pedestrians);
                    if let Some(j) = a.gt_index {
                        d.full = Some(sample.pedestrians[j].full);
                    }
                }
                Ok(dets)
            }
        }
    }
}

pub fn image_bounds(image: &Array3<f64>) -> ImageBounds {
    let (h, w, _) = image.dim();
    ImageBounds::new(w as f64, h as f64)
}

/// Runs inference over a dataset and collects detections for evaluation.
pub fn evaluation_set(model: &Model, params: &ModelParams, dataset: &Dataset, config: &InferConfig) -> Result<EvalSet> {
    let mut set = EvalSet::default();
    for sample in &dataset.samples {
        let dets = model.infer(params, &sample.image, config)?;
        set.push(&dets, &sample.pedestrians);
    }
    Ok(set)
}

pub fn diagnostic_set(
    mode: DiagnosticMode,
    model: &Model,
    params: &ModelParams,
    dataset: &Dataset,
    config: &InferConfig,
) -> Result<EvalSet> {
    let mut set = EvalSet::default();
    for sample in &dataset.samples {
        let dets = model.diagnostic_detections(mode, params, sample, config)?;
        set.push(&dets, &sample.pedestrians);
    }
    Ok(set)
}

/// Metrics at matching IoU 0.5 of a diagnostic run.
pub fn run_diagnostic(
    mode: DiagnosticMode,
    model: &Model,
    params: &ModelParams,
    dataset: &Dataset,
    config: &InferConfig,
) -> Result<EvalMetrics> {
    Ok(diagnostic_set(mode, model, params, dataset, config)?.evaluate(0.5))
}

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepLosses,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,cls1,reg1,cls2,reg2,vdn,fen,epm,total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let l = &e.losses;
            out.push_str(&format!(
                "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch,
                e.lr,
                l.vdn.cls1,
                l.vdn.reg1,
                l.vdn.cls2,
                l.vdn.reg2,
                l.vdn.total(),
                l.fen,
                l.epm,
                e.total
            ));
        }
        out
    }
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainingLog)> {
    train_with_progress(dataset, config, |_| {})
}

/// Momentum SGD with L2 weight decay and a stepped learning rate. `progress` sees each epoch's log as it finishes.
pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(ModelParams, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch("training set is empty"));
    }
    let model = Model::new(config.variant, &config.model);
    let mut params = model.init_params(config.seed);
    let mut velocity = params.zeros_like();
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let weights = LossWeights::new(config.alpha, config.beta);
    let trainable: Vec<bool> = params.names().map(|n| model.is_trainable(n, &weights)).collect();
    let mut log = TrainingLog::default();
    let mut iteration = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let lr_epoch = config.lr_at(epoch, usize::MAX);
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            for &i in batch {
                let out = model
                    .train_step(&params, &dataset.samples[i], config, PlanSource::Fresh(&mut rng), &weights, Some(&mut grads))
                    .map_err(|e| match e {
                        Error::DivergedLoss { detail, .. } => Error::DivergedLoss { epoch, iteration, detail },
                        other => other,
                    })?;
                sums.add_scaled(&out.losses, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in grads.iter_mut() {
                *g *= scale;
            }
            if let Some(max_norm) = config.clip_grad_norm {
                let norm = grads.sq_norm().sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    for (_, g) in grads.iter_mut() {
                        *g *= s;
                    }
                }
            }
            let lr = config.lr_at(epoch, iteration);
            sgd_update(&mut params, &mut velocity, &grads, &trainable, lr, config.momentum, config.weight_decay);
            if !params.all_finite() {
                return Err(Error::DivergedLoss {
                    epoch,
                    iteration,
                    detail: "parameters became non-finite".into(),
                });
            }
            iteration += 1;
        }
        let mut mean = StepLosses::default();
        mean.add_scaled(&sums, 1.0 / dataset.len() as f64);
        let entry = EpochLog {
            epoch,
            lr: lr_epoch,
            losses: mean,
            total: mean.total(config.alpha, config.beta),
        };
        if !entry.total.is_finite() {
            return Err(Error::DivergedLoss {
                epoch,
                iteration,
                detail: format!("epoch mean loss {mean:?}"),
            });
        }
        progress(&entry);
        log.epochs.push(entry);
    }
    Ok((params, log))
}

fn sgd_update(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    trainable: &[bool],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let entries = params.iter_mut().zip(velocity.iter_mut()).zip(grads.iter()).zip(trainable);
    for ((((_, p), (_, v)), (_, g)), &active) in entries {
        if !active {
            continue;
        }
        ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        });
    }
}

/// Writes parameters with the architecture as checkpoint metadata.
pub fn save_model(path: impl AsRef<Path>, params: &ModelParams, arch: &Architecture) -> Result<()> {
    let json = serde_json::to_value(arch)?;
    save_checkpoint(path, params, json, &arch.hash())
}

/// Reads a checkpoint and rebuilds its model. Parameter shapes are checked
/// against the recorded architecture.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, ModelParams, CheckpointManifest)> {
    let path = path.as_ref();
    let (params, manifest) = load_checkpoint(path)?;
    let arch: Architecture = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable architecture: {e}", path.display())))?;
    if arch.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(format!("{}: architecture hash does not match its config", path.display())));
    }
    let model = Model::from_architecture(&arch);
    let expected = model.init_params(0);
    for (name, value) in expected.iter() {
        let found = params.get(name).map_err(|_| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
        if found.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} has shape {:?}, expected {:?}",
                path.display(),
                found.shape(),
                value.shape()
            )));
        }
    }
    Ok((model, params, manifest))
}

/// Copy of `params` without the part embedding.
pub fn without_epm(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    p.remove(epm::EMBEDDING);
    p
}

