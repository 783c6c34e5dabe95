//! Synthetic crowded scenes with exact visible-box ground truth, and ingestion
//! of CrowdHuman-style `.odgt` annotation files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ImageBounds};

pub const DEFAULT_MIN_VISIBLE_AREA: f64 = 16.0;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of pedestrians placed per scene (before occlusion culling).
    pub count: [usize; 2],
    /// Full-box height range in pixels.
    pub full_height: [f64; 2],
    /// Full-box aspect ratio range, height over width.
    pub aspect: [f64; 2],
    /// 0 places pedestrians uniformly, 1 packs them around shared cluster centers.
    pub crowding: f64,
    pub noise: f64,
    #[serde(default = "default_min_visible_area")]
    pub min_visible_area: f64,
}

fn default_min_visible_area() -> f64 {
    DEFAULT_MIN_VISIBLE_AREA
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            count: [4, 8],
            full_height: [40.0, 72.0],
            aspect: [2.2, 3.0],
            crowding: 0.7,
            noise: 0.08,
            min_visible_area: DEFAULT_MIN_VISIBLE_AREA,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("scene spec: {msg}")));
        if self.width < 64 || self.height < 64 {
            return bad(format!("image must be at least 64x64, got {}x{}", self.width, self.height));
        }
        if self.count[0] > self.count[1] {
            return bad(format!("empty count range {:?}", self.count));
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1];
        if !ordered(self.full_height) {
            return bad(format!("invalid full_height range {:?}", self.full_height));
        }
        if !ordered(self.aspect) {
            return bad(format!("invalid aspect range {:?}", self.aspect));
        }
        if !(0.0..=1.0).contains(&self.crowding) {
            return bad(format!("crowding {} outside [0, 1]", self.crowding));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("invalid noise amplitude {}", self.noise));
        }
        if !(self.min_visible_area >= 0.0) {
            return bad(format!("invalid min_visible_area {}", self.min_visible_area));
        }
        Ok(())
    }

    pub fn bounds(&self) -> ImageBounds {
        ImageBounds::new(self.width as f64, self.height as f64)
    }

    /// Stable content hash, recorded in dataset manifests.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPedestrian {
    pub visible: BBox,
    pub full: BBox,
    pub ignore: bool,
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    /// `H x W x 3`, values in `[0, 1]` quantized to multiples of `1/255`.
    pub image: Array3<f64>,
    pub pedestrians: Vec<GroundTruthPedestrian>,
    pub seed: u64,
}

impl SceneSample {
    pub fn bounds(&self) -> ImageBounds {
        let (h, w, _) = self.image.dim();
        ImageBounds::new(w as f64, h as f64)
    }
}

/// Tight box around the part of `full` not covered by any occluder, on a
/// unit-pixel raster. A pixel belongs to a box when its center lies inside.
/// Returns `None` when nothing remains or the result is smaller than `min_area`.
pub fn occlusion_visible_box(
    full: &BBox,
    occluders: &[BBox],
    bounds: ImageBounds,
    min_area: f64,
) -> Option<BBox> {
    let clipped = full.clip(bounds).ok()?;
    let x_lo = clipped.x1().floor() as i64;
    let x_hi = clipped.x2().ceil() as i64;
    let y_lo = clipped.y1().floor() as i64;
    let y_hi = clipped.y2().ceil() as i64;
    let inside = |b: &BBox, px: f64, py: f64| px > b.x1() && px < b.x2() && py > b.y1() && py < b.y2();

    let (mut min_x, mut min_y, mut max_x, mut max_y) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for y in y_lo..y_hi {
        let py = y as f64 + 0.5;
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            if !inside(&clipped, px, py) || occluders.iter().any(|o| inside(o, px, py)) {
                continue;
            }
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    if min_x > max_x {
        return None;
    }
    let visible = BBox::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64).ok()?;
    (visible.area() >= min_area).then_some(visible)
}

struct Placed {
    full: BBox,
    color: [f64; 3],
}

/// Generates one scene. Deterministic in `(spec, seed)`. Pedestrians are
/// listed nearest first, and no visible box reaches more than
/// [`DEPTH_TOLERANCE`] into the full box of a nearer pedestrian.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (iw, ih) = (spec.width as f64, spec.height as f64);

    let n = rng.random_range(spec.count[0]..=spec.count[1]);
    let n_clusters = (((1.0 - spec.crowding) * n as f64).round() as usize).max(1);
    let clusters: Vec<(f64, f64)> = (0..n_clusters)
        .map(|_| (rng.random_range(0.2 * iw..0.8 * iw), rng.random_range(0.35 * ih..0.65 * ih)))
        .collect();

    // Placement runs nearest-first, so everything already placed occludes the
    // candidate. Candidates whose visible box would reach into a nearer
    // pedestrian are redrawn.
    let bounds = spec.bounds();
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    let mut pedestrians = Vec::new();
    for _ in 0..n {
        let mut attempt = 0;
        let (full, visible) = loop {
            attempt += 1;
            if attempt > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::SpecInfeasible(format!(
                    "could not place a pedestrian inside {}x{} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                    spec.width, spec.height
                )));
            }
            let h = sample_range(&mut rng, spec.full_height).round();
            let w = (h / sample_range(&mut rng, spec.aspect)).round().max(2.0);
            if h < 2.0 || h > ih || w > iw {
                continue;
            }
            let (ux, uy) = (rng.random_range(0.0..iw), rng.random_range(0.0..ih));
            let (ccx, ccy) = clusters[rng.random_range(0..clusters.len())];
            let jx = rng.random_range(-0.6..0.6) * w;
            let jy = rng.random_range(-0.15..0.15) * h;
            let c = spec.crowding;
            let cx = (1.0 - c) * ux + c * (ccx + jx);
            let cy = (1.0 - c) * uy + c * (ccy + jy);
            let x1 = (cx - 0.5 * w).round().clamp(0.0, iw - w);
            let y1 = (cy - 0.5 * h).round().clamp(0.0, ih - h);
            let full = BBox::new(x1, y1, x1 + w, y1 + h)?;
            let nearer: Vec<BBox> = placed.iter().map(|q| q.full).collect();
            let visible = occlusion_visible_box(&full, &nearer, bounds, 0.0);
            if visible.is_some_and(|v| !depth_consistent(&v, &nearer)) {
                continue;
            }
            break (full, visible);
        };
        if let Some(visible) = visible {
            pedestrians.push(GroundTruthPedestrian {
                visible,
                full,
                ignore: visible.area() < spec.min_visible_area,
            });
        }
        placed.push(Placed {
            full,
            color: random_color(&mut rng),
        });
    }

    let image = render(spec, &placed, &mut rng);
    Ok(SceneSample {
        image,
        pedestrians,
        seed,
    })
}

/// Raster tolerance of the depth-consistency rule, in pixels.
pub const DEPTH_TOLERANCE: f64 = 1.0;

/// True when `visible` overlaps no box of `nearer` by more than
/// [`DEPTH_TOLERANCE`] in both directions.
pub fn depth_consistent(visible: &BBox, nearer: &[BBox]) -> bool {
    nearer.iter().all(|o| {
        let w = visible.x2().min(o.x2()) - visible.x1().max(o.x1());
        let h = visible.y2().min(o.y2()) - visible.y1().max(o.y1());
        w <= DEPTH_TOLERANCE || h <= DEPTH_TOLERANCE
    })
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // One dominant channel keeps identities distinguishable from the gray background.
    let mut c = [
        rng.random_range(0.05..0.45),
        rng.random_range(0.05..0.45),
        rng.random_range(0.05..0.45),
    ];
    let k = rng.random_range(0..3);
    c[k] = rng.random_range(0.65..0.95);
    c
}

fn render(spec: &SceneSpec, placed: &[Placed], rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (w, h) = (spec.width, spec.height);
    let base = rng.random_range(0.35..0.6);
    let mut img = Array3::from_elem((h, w, 3), base);

    // Back to front, so nearer pedestrians overwrite farther ones.
    for p in placed.iter().rev() {
        let (x1, y1) = (p.full.x1() as usize, p.full.y1() as usize);
        let (x2, y2) = (p.full.x2() as usize, p.full.y2() as usize);
        let ph = (y2 - y1) as f64;
        let head_end = y1 + (0.2 * ph).round() as usize;
        let legs_start = y1 + (0.6 * ph).round() as usize;
        let mid = (x1 + x2) / 2;
        let gap = ((x2 - x1) / 10).max(1);
        for y in y1..y2 {
            for x in x1..x2 {
                let color = if y < head_end {
                    p.color.map(|c| 0.35 * c + 0.65)
                } else if y < legs_start {
                    p.color
                } else if x + gap / 2 >= mid && x < mid + gap.div_ceil(2) {
                    [0.05, 0.05, 0.05]
                } else {
                    p.color.map(|c| 0.55 * c)
                };
                for ch in 0..3 {
                    img[[y, x, ch]] = color[ch];
                }
            }
        }
    }

    for v in img.iter_mut() {
        let noisy = *v + spec.noise * rng.random_range(-1.0..1.0);
        *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    img
}

/// Counts pedestrian pairs whose full boxes overlap with IoU above `threshold`.
pub fn crowded_pairs(pedestrians: &[GroundTruthPedestrian], threshold: f64) -> usize {
    let mut n = 0;
    for (i, a) in pedestrians.iter().enumerate() {
        for b in &pedestrians[i + 1..] {
            if iou(&a.full, &b.full) > threshold {
                n += 1;
            }
        }
    }
    n
}

/// One annotated image from an odgt file.
#[derive(Debug, Clone, PartialEq)]
pub struct OdgtRecord {
    pub id: String,
    pub pedestrians: Vec<GroundTruthPedestrian>,
}

pub fn load_odgt(path: impl AsRef<Path>) -> Result<Vec<OdgtRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_odgt_line(path, i + 1, &line)?);
    }
    Ok(records)
}

fn parse_odgt_line(path: &Path, line_no: usize, line: &str) -> Result<OdgtRecord> {
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let geom_err = |msg: String| Error::Geometry {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };

    let v: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let id = match v.get("ID") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => return Err(parse_err("missing field `ID`".into())),
    };
    let boxes = v
        .get("gtboxes")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err("missing array field `gtboxes`".into()))?;

    let read_box = |entry: &Value, key: &str, k: usize| -> Result<BBox> {
        let arr = entry
            .get(key)
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .ok_or_else(|| parse_err(format!("gtboxes[{k}]: `{key}` must be [x, y, w, h]")))?;
        let mut xywh = [0.0; 4];
        for (dst, src) in xywh.iter_mut().zip(arr) {
            *dst = src
                .as_f64()
                .ok_or_else(|| parse_err(format!("gtboxes[{k}]: `{key}` has a non-numeric entry")))?;
        }
        BBox::from_xywh(xywh[0], xywh[1], xywh[2], xywh[3])
            .map_err(|e| geom_err(format!("gtboxes[{k}].{key}: {e}")))
    };

    let mut pedestrians = Vec::new();
    for (k, entry) in boxes.iter().enumerate() {
        if entry.get("tag").and_then(Value::as_str) != Some("person") {
            continue;
        }
        let full = read_box(entry, "fbox", k)?;
        let visible = read_box(entry, "vbox", k)?;
        let ignore = entry
            .get("extra")
            .and_then(|e| e.get("ignore"))
            .and_then(Value::as_f64)
            .is_some_and(|x| x != 0.0);
        pedestrians.push(GroundTruthPedestrian {
            visible,
            full,
            ignore,
        });
    }
    Ok(OdgtRecord { id, pedestrians })
}

/// Serializes one record as a single odgt line.
pub fn odgt_line(id: &str, pedestrians: &[GroundTruthPedestrian]) -> String {
    let gtboxes: Vec<Value> = pedestrians
        .iter()
        .map(|p| {
            json!({
                "tag": "person",
                "fbox": p.full.to_xywh(),
                "vbox": p.visible.to_xywh(),
                "extra": {"ignore": if p.ignore { 1 } else { 0 }},
            })
        })
        .collect();
    json!({"ID": id, "gtboxes": gtboxes}).to_string()
}

/// A dataset held in memory: images with their annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Generates `count` scenes with seeds `seed_start..seed_start + count`.
    pub fn synthetic(spec: &SceneSpec, seed_start: u64, count: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(count);
        let mut samples = Vec::with_capacity(count);
        for seed in seed_start..seed_start + count as u64 {
            ids.push(scene_id(seed));
            samples.push(generate_scene(spec, seed)?);
        }
        Ok(Dataset { ids, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_pedestrians(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n: usize = self.samples.iter().map(|s| s.pedestrians.len()).sum();
        n as f64 / self.len() as f64
    }
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:08}")
}

pub const ANNOTATION_FILE: &str = "annotations.odgt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SceneSpec,
    pub spec_hash: String,
    pub seeds: Vec<u64>,
}

/// Writes PNG images, one odgt file and a manifest under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SceneSpec, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let ann_path = dir.join(ANNOTATION_FILE);
    let mut ann = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    for (id, sample) in data.ids.iter().zip(&data.samples) {
        save_png(&sample.image, img_dir.join(format!("{id}.png")))?;
        writeln!(ann, "{}", odgt_line(id, &sample.pedestrians)).map_err(|e| Error::io(&ann_path, e))?;
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        seeds: data.samples.iter().map(|s| s.seed).collect(),
    };
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))
}

/// Reads a dataset directory written by [`write_dataset`] (or any directory
/// holding `annotations.odgt` and `images/<ID>.png`).
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let records = load_odgt(dir.join(ANNOTATION_FILE))?;
    let seeds: Option<Vec<u64>> = fs::read_to_string(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<DatasetManifest>(&s).ok())
        .map(|m| m.seeds);

    let mut ids = Vec::with_capacity(records.len());
    let mut samples = Vec::with_capacity(records.len());
    for (k, rec) in records.into_iter().enumerate() {
        let image = load_png(dir.join(IMAGE_DIR).join(format!("{}.png", rec.id)))?;
        let seed = seeds.as_ref().and_then(|s| s.get(k).copied()).unwrap_or(k as u64);
        ids.push(rec.id);
        samples.push(SceneSample {
            image,
            pedestrians: rec.pedestrians,
            seed,
        });
    }
    Ok(Dataset { ids, samples })
}

pub fn save_png(image: &Array3<f64>, path: impl AsRef<Path>) -> Result<()> {
    to_rgb_image(image).save(path.as_ref())?;
    Ok(())
}

pub fn to_rgb_image(image: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let rgb = image::open(&path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}
