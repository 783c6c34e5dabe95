use std::fs;
use std::path::{Path, PathBuf};

use crowdped_core::data::{self, Dataset, SceneSpec};
use crowdped_core::eval::{self, DetectionRecord, EvalMetrics};
use crowdped_core::pipeline::{self, DiagnosticMode, InferConfig, Model, Variant};
use crowdped_core::postprocess::{Detection, NmsMode};
use crowdped_core::BBox;
use serde::Serialize;

use crate::config::{create_dir, write_json, write_snapshot, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::render::{self, Axis, OverlayStyle, SERIES_COLORS};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const PR_PLOT_FILE: &str = "pr_curve.png";
pub const FPPI_PLOT_FILE: &str = "fppi_missrate.png";

#[derive(Debug, Serialize)]
struct GenDataSnapshot<'a> {
    spec: &'a SceneSpec,
    spec_hash: String,
    count: usize,
    seed: u64,
}

pub fn gen_data(spec_path: Option<&Path>, count: usize, seed: u64, out: &Path) -> CliResult<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid spec {}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    spec.validate()?;
    let dataset = Dataset::synthetic(&spec, seed, count)?;
    create_dir(out)?;
    data::write_dataset(out, &spec, &dataset)?;
    write_snapshot(
        out,
        &GenDataSnapshot {
            spec: &spec,
            spec_hash: spec.hash(),
            count,
            seed,
        },
    )?;
    eprintln!(
        "wrote {count} scenes to {} ({:.2} pedestrians per scene)",
        out.display(),
        dataset.mean_pedestrians()
    );
    Ok(())
}

fn read_dataset(path: &Path, what: &str) -> CliResult<Dataset> {
    data::read_dataset(path).map_err(CliError::input(format!("cannot load {what} dataset {}", path.display())))
}

#[derive(Debug, Serialize)]
struct TrainMetrics<'a> {
    data: &'a Path,
    sweep: Vec<EvalMetrics>,
}

pub fn train(config: &ExperimentConfig) -> CliResult<()> {
    config.validate()?;
    let train_path = config
        .train_data
        .as_deref()
        .ok_or_else(|| CliError::Usage("no training dataset: set `train_data` or pass --train-data".into()))?;
    let dataset = read_dataset(train_path, "training")?;
    let test = config.test_data.as_deref().map(|p| read_dataset(p, "test").map(|d| (p, d))).transpose()?;
    let out = &config.output_dir;
    create_dir(out)?;
    write_snapshot(out, config)?;

    let (params, log) = pipeline::train_with_progress(&dataset, &config.train, |e| {
        eprintln!("epoch {:>3}  lr {:.1e}  loss {:.4}", e.epoch, e.lr, e.total);
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    pipeline::save_model(&ckpt, &params, &config.train.architecture())?;
    let log_path = out.join(TRAIN_LOG_FILE);
    fs::write(&log_path, log.to_csv()).map_err(|e| crowdped_core::Error::io(&log_path, e))?;

    if let Some((path, test)) = test {
        let model = Model::new(config.train.variant, &config.train.model);
        let set = pipeline::evaluation_set(&model, &params, &test, &config.train.infer)?;
        let sweep = set.threshold_sweep(&config.iou_thresholds);
        write_json(&out.join(METRICS_FILE), &TrainMetrics { data: path, sweep })?;
    }
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

/// Options of the `eval` subcommand after flag parsing.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub infer: InferConfig,
    pub iou_thresholds: Vec<f64>,
    pub sweep: bool,
    pub diagnostics: Vec<DiagnosticMode>,
    pub plots: bool,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    data: PathBuf,
    variant: Variant,
    nms_mode: NmsMode,
    metrics: EvalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Vec<EvalMetrics>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    diagnostics: Vec<DiagnosticReport>,
}

#[derive(Debug, Serialize)]
struct DiagnosticReport {
    mode: DiagnosticMode,
    metrics: EvalMetrics,
}

/// Loads a checkpoint; with `expected` set, its architecture must hash equal.
fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> CliResult<(Model, crowdped_core::netcore::ModelParams)> {
    let (model, params, manifest) =
        pipeline::load_model(path).map_err(CliError::input(format!("cannot load checkpoint {}", path.display())))?;
    if let Some(cfg) = expected {
        let want = cfg.train.architecture().hash();
        if want != manifest.config_hash {
            return Err(CliError::Usage(format!(
                "checkpoint {} is incompatible with the config: architecture hash {} != {}",
                path.display(),
                manifest.config_hash,
                want
            )));
        }
    }
    Ok((model, params))
}

pub fn eval(opts: &EvalOptions, expected: Option<&ExperimentConfig>) -> CliResult<()> {
    let (model, params) = load_checkpoint(&opts.checkpoint, expected)?;
    if opts.infer.nms_mode == Some(NmsMode::Visible) && matches!(model.variant, Variant::F | Variant::F2) {
        return Err(CliError::Usage(format!("variant {} has no visible boxes for visible-box NMS", model.variant)));
    }
    if !opts.diagnostics.is_empty() && model.variant != Variant::V2F {
        return Err(CliError::Usage(format!("diagnostics need a V2F checkpoint, not {}", model.variant)));
    }
    let dataset = read_dataset(&opts.data, "evaluation")?;
    create_dir(&opts.out)?;
    write_snapshot(&opts.out, opts)?;

    let mut records = Vec::new();
    let mut set = eval::EvalSet::default();
    for (id, sample) in dataset.ids.iter().zip(&dataset.samples) {
        let dets = model.infer(&params, &sample.image, &opts.infer)?;
        records.extend(dets.iter().filter_map(|d| DetectionRecord::from_detection(id, d)));
        set.push(&dets, &sample.pedestrians);
    }
    eval::write_detections(opts.out.join(DETECTIONS_FILE), &records)?;

    let full = set.evaluate(0.5);
    let mut curves = vec![("model".to_string(), full.clone())];
    let mut diagnostics = Vec::new();
    for &mode in &opts.diagnostics {
        let m = pipeline::run_diagnostic(mode, &model, &params, &dataset, &opts.infer)?;
        curves.push((mode.as_str().to_string(), m.clone()));
        diagnostics.push(DiagnosticReport { mode, metrics: m.summary() });
    }
    let report = EvalReport {
        checkpoint: opts.checkpoint.clone(),
        data: opts.data.clone(),
        variant: model.variant,
        nms_mode: opts.infer.nms_mode.unwrap_or(model.variant.default_nms_mode()),
        metrics: full.summary(),
        sweep: opts.sweep.then(|| set.threshold_sweep(&opts.iou_thresholds)),
        diagnostics,
    };
    write_json(&opts.out.join(METRICS_FILE), &report)?;
    if opts.plots {
        write_plots(&opts.out, &curves)?;
    }
    let m = &report.metrics;
    println!("AP {:.4}  MR-2 {:.4}  recall {:.4}  ({} images)", m.ap, m.mr2, m.recall, m.num_images);
    Ok(())
}

fn write_plots(out: &Path, curves: &[(String, EvalMetrics)]) -> CliResult<()> {
    let color = |k: usize| SERIES_COLORS[k % SERIES_COLORS.len()];
    let pr: Vec<_> = curves.iter().enumerate().map(|(k, (_, m))| (m.pr_curve.as_slice(), color(k))).collect();
    let unit = Axis { min: 0.0, max: 1.0, log: false };
    save_image(&render::plot(&pr, unit, unit), &out.join(PR_PLOT_FILE))?;

    let fppi: Vec<_> = curves.iter().enumerate().map(|(k, (_, m))| (m.fppi_curve.as_slice(), color(k))).collect();
    let x = Axis { min: 1e-2, max: 10.0, log: true };
    let y = Axis { min: 1e-2, max: 1.0, log: true };
    save_image(&render::plot(&fppi, x, y), &out.join(FPPI_PLOT_FILE))?;
    let legend: Vec<_> = curves.iter().enumerate().map(|(k, (name, _))| (name.as_str(), color(k).0)).collect();
    write_json(&out.join("plot_legend.json"), &legend)
}

fn save_image(img: &image::RgbImage, path: &Path) -> CliResult<()> {
    img.save(path).map_err(crowdped_core::Error::from)?;
    Ok(())
}

/// Options of the `visualize` subcommand after flag parsing.
#[derive(Debug, Clone, Serialize)]
pub struct VisualizeOptions {
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub out: PathBuf,
    pub min_score: f64,
    pub scale: u32,
    pub infer: InferConfig,
}

#[derive(Debug, Serialize)]
struct OverlayRecord {
    score: f64,
    /// `[x1, y1, x2, y2]`
    #[serde(skip_serializing_if = "Option::is_none")]
    visible: Option<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    full: Option<BBox>,
    /// Head, upper-left, upper-right, lower-left, lower-right.
    #[serde(skip_serializing_if = "Option::is_none")]
    part_scores: Option<[f64; 5]>,
}

#[derive(Debug, Serialize)]
struct OverlaySidecar {
    image: PathBuf,
    min_score: f64,
    detections: Vec<OverlayRecord>,
    suppressed: Vec<OverlayRecord>,
}

fn record(d: &Detection) -> OverlayRecord {
    OverlayRecord {
        score: d.score,
        visible: d.visible,
        full: d.full,
        part_scores: d.part_scores,
    }
}

/// Expands directories (or dataset roots holding `images/`) into sorted PNG lists.
pub fn collect_images(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            files.push(input.clone());
            continue;
        }
        let nested = input.join(data::IMAGE_DIR);
        let dir = if nested.is_dir() { nested } else { input.clone() };
        let entries = fs::read_dir(&dir).map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?;
        let mut pngs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        pngs.sort();
        files.extend(pngs);
    }
    if files.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    Ok(files)
}

pub fn visualize(opts: &VisualizeOptions) -> CliResult<()> {
    let (model, params) = load_checkpoint(&opts.checkpoint, None)?;
    let files = collect_images(&opts.images)?;
    create_dir(&opts.out)?;
    write_snapshot(&opts.out, opts)?;
    let style = OverlayStyle {
        scale: opts.scale,
        min_score: opts.min_score,
    };
    for path in &files {
        let image = data::load_png(path).map_err(CliError::input(format!("cannot read image {}", path.display())))?;
        let mut trace = model.infer_trace(&params, &image, &opts.infer)?;
        if model.variant.has_epm() {
            // Inference never touches the part module; scores are computed here for display only.
            let visible: Vec<BBox> = trace.detections.iter().filter_map(|d| d.visible).collect();
            if visible.len() == trace.detections.len() && !visible.is_empty() {
                let parts = model.part_scores(&params, &image, &visible)?;
                for (d, p) in trace.detections.iter_mut().zip(parts) {
                    d.part_scores = Some(p);
                }
            }
        }
        let base = data::to_rgb_image(&image);
        let drawn = render::overlay(&base, &trace.candidates, &trace.kept, &trace.detections, style);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_image(&drawn, &opts.out.join(format!("{stem}.png")))?;
        let sidecar = OverlaySidecar {
            image: path.clone(),
            min_score: opts.min_score,
            detections: trace.detections.iter().filter(|d| d.score >= opts.min_score).map(record).collect(),
            suppressed: trace
                .candidates
                .iter()
                .enumerate()
                .filter(|(i, c)| !trace.kept.contains(i) && c.score >= opts.min_score)
                .map(|(_, c)| record(c))
                .collect(),
        };
        write_json(&opts.out.join(format!("{stem}.json")), &sidecar)?;
    }
    eprintln!("rendered {} overlays into {}", files.len(), opts.out.display());
    Ok(())
}
