//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use crowdped_core::data::{generate_scene, SceneSample, SceneSpec};
use crowdped_core::netcore::{BackboneConfig, ModelParams};
use crowdped_core::pipeline::{LossTerm, LossWeights, Model, ModelConfig, PlanSource, StepPlan, TrainConfig, Variant};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smallest architecture that still has every component: a 128x128 scene
/// maps to a 16x16 feature map.
pub fn tiny_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        model: ModelConfig {
            backbone: BackboneConfig {
                layers: vec![(4, 2), (6, 2), (8, 2)],
            },
            roi_size: 3,
            fc_width: 12,
            part_dim: 6,
            ..ModelConfig::default()
        },
        sampling: crowdped_core::pipeline::SamplingConfig {
            rpn_batch: 64,
            roi_batch: 32,
            proposals: crowdped_core::vdn::ProposalConfig {
                top_n: 24,
                ..Default::default()
            },
            ..Default::default()
        },
        sample_cap: 24,
        ..TrainConfig::default()
    }
}

pub fn tiny_scene(seed: u64) -> SceneSample {
    generate_scene(&SceneSpec::default(), seed).expect("default spec is feasible")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub nonzero: usize,
}

impl GradCheck {
    pub fn merge(&mut self, o: &GradCheck) {
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.nonzero += o.nonzero;
    }
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero compare by absolute error instead.
pub const REL_FLOOR: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-3;

/// Central-difference check of one loss term against the analytic gradient,
/// replaying a fixed plan. Per tensor, probes the `largest` entries with the
/// biggest analytic gradient plus `random` further entries. Probes whose
/// +/- evaluations land on a different piecewise branch are skipped.
#[allow(clippy::too_many_arguments)]
pub fn check_term(
    model: &Model,
    params: &ModelParams,
    sample: &SceneSample,
    config: &TrainConfig,
    plan: &StepPlan,
    term: LossTerm,
    largest: usize,
    random: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let weights = LossWeights::only(term);
    let mut grads = params.zeros_like();
    let base = model
        .train_step(params, sample, config, PlanSource::Replay(plan), &weights, Some(&mut grads))
        .expect("replayed step");
    let eval = |p: &ModelParams| {
        let out = model
            .train_step(p, sample, config, PlanSource::Replay(plan), &weights, None)
            .expect("replayed step");
        (out.losses.weighted(&weights), out.signature)
    };
    let mut report = GradCheck::default();
    for (name, g) in grads.iter() {
        let flat: Vec<f64> = g.iter().copied().collect();
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()));
        let mut probes: Vec<usize> = order.iter().take(largest).copied().collect();
        let mut rest: Vec<usize> = order.iter().skip(largest).copied().collect();
        rest.shuffle(rng);
        probes.extend(rest.into_iter().take(random));
        for idx in probes {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += FD_STEP;
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= FD_STEP;
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != base.signature || sm != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = flat[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
            if analytic.abs() > REL_FLOOR {
                report.nonzero += 1;
            }
        }
    }
    report
}

/// A fresh plan and initial parameters for the tiny model of `variant`.
pub fn tiny_setup(variant: Variant, seed: u64) -> (Model, ModelParams, SceneSample, TrainConfig, StepPlan) {
    let config = tiny_config(variant);
    let model = Model::new(variant, &config.model);
    let params = model.init_params(seed);
    let sample = tiny_scene(seed + 100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::new(config.alpha, config.beta);
    let out = model
        .train_step(&params, &sample, &config, PlanSource::Fresh(&mut rng), &weights, None)
        .expect("fresh step");
    (model, params, sample, config, out.plan)
}
