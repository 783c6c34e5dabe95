//! Static PNG output: detection overlays and metric curves.

use crowdped_core::geometry::{divide_parts, NUM_PARTS};
use crowdped_core::postprocess::Detection;
use crowdped_core::BBox;
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

pub const VISIBLE_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
pub const FULL_COLOR: Rgb<u8> = Rgb([60, 120, 255]);
pub const SUPPRESSED_COLOR: Rgb<u8> = Rgb([200, 200, 200]);
const PART_COLOR: Rgb<u8> = Rgb([255, 210, 60]);
const TEXT_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS_COLOR: Rgb<u8> = Rgb([30, 30, 30]);
const GRID_COLOR: Rgb<u8> = Rgb([225, 225, 225]);

/// 3x5 glyphs for digits and `.`, one row per `u8`, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

/// Draws `text` with its top-left corner at `(x, y)`; unknown characters
/// leave a gap. Each glyph pixel becomes a `scale`-sized square.
pub fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, scale: u32, color: Rgb<u8>) {
    let s = scale as i32;
    for (k, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x + k as i32 * 4 * s;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    let rect = Rect::at(gx + col * s, y + r as i32 * s).of_size(scale, scale);
                    draw_filled_rect_mut(img, rect, color);
                }
            }
        }
    }
}

/// Width in pixels of `text` rendered by [`draw_text`].
pub fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * 4).saturating_sub(1) * scale
}

fn scaled_rect(b: &BBox, scale: f64) -> Rect {
    let x = (b.x1() * scale).round() as i32;
    let y = (b.y1() * scale).round() as i32;
    let w = ((b.x2() * scale).round() as i32 - x).max(1) as u32;
    let h = ((b.y2() * scale).round() as i32 - y).max(1) as u32;
    Rect::at(x, y).of_size(w, h)
}

fn draw_box(img: &mut RgbImage, b: &BBox, scale: f64, color: Rgb<u8>, thickness: i32) {
    let r = scaled_rect(b, scale);
    for t in 0..thickness {
        let (w, h) = (r.width() as i32 - 2 * t, r.height() as i32 - 2 * t);
        if w > 0 && h > 0 {
            draw_hollow_rect_mut(img, Rect::at(r.left() + t, r.top() + t).of_size(w as u32, h as u32), color);
        }
    }
}

/// Box outline with 4-pixel dashes.
fn draw_dashed_box(img: &mut RgbImage, b: &BBox, scale: f64, color: Rgb<u8>) {
    let (x1, y1) = ((b.x1() * scale) as f32, (b.y1() * scale) as f32);
    let (x2, y2) = ((b.x2() * scale) as f32, (b.y2() * scale) as f32);
    let edges = [((x1, y1), (x2, y1)), ((x2, y1), (x2, y2)), ((x2, y2), (x1, y2)), ((x1, y2), (x1, y1))];
    for (a, c) in edges {
        let len = ((c.0 - a.0).hypot(c.1 - a.1)).max(1.0);
        let mut t = 0.0;
        while t < len {
            let t2 = (t + 4.0).min(len);
            let p = |s: f32| (a.0 + (c.0 - a.0) * s / len, a.1 + (c.1 - a.1) * s / len);
            draw_line_segment_mut(img, p(t), p(t2), color);
            t += 8.0;
        }
    }
}

fn blend(img: &mut RgbImage, rect: Rect, color: Rgb<u8>, alpha: f64) {
    let (w, h) = img.dimensions();
    let x0 = rect.left().max(0) as u32;
    let y0 = rect.top().max(0) as u32;
    let x1 = (rect.right() + 1).clamp(0, w as i32) as u32;
    let y1 = (rect.bottom() + 1).clamp(0, h as i32) as u32;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = img.get_pixel_mut(x, y);
            for k in 0..3 {
                p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + color.0[k] as f64 * alpha).round() as u8;
            }
        }
    }
}

/// Two-decimal score without the leading zero, e.g. `.83` or `1.0`.
pub fn score_label(s: f64) -> String {
    if s >= 0.995 {
        "1.0".into()
    } else {
        format!("{:.2}", s.max(0.0)).trim_start_matches('0').to_string()
    }
}

/// Overlay settings.
#[derive(Debug, Clone, Copy)]
pub struct OverlayStyle {
    /// Integer upscaling applied to the input before drawing.
    pub scale: u32,
    pub min_score: f64,
}

/// Draws kept detections (visible green, full blue, part grid tinted by part
/// score with the score printed) and NMS-suppressed candidates dashed.
pub fn overlay(
    base: &RgbImage,
    candidates: &[Detection],
    kept: &[usize],
    detections: &[Detection],
    style: OverlayStyle,
) -> RgbImage {
    let (w, h) = base.dimensions();
    let mut img = imageops::resize(base, w * style.scale, h * style.scale, FilterType::Nearest);
    let s = style.scale as f64;

    for (i, c) in candidates.iter().enumerate() {
        if kept.contains(&i) || c.score < style.min_score {
            continue;
        }
        for b in [c.visible, c.full].into_iter().flatten() {
            draw_dashed_box(&mut img, &b, s, SUPPRESSED_COLOR);
        }
    }

    for d in detections.iter().filter(|d| d.score >= style.min_score) {
        if let (Some(full), Some(parts)) = (d.full, d.part_scores) {
            draw_parts(&mut img, &full, &parts, s);
        }
        if let Some(full) = d.full {
            draw_box(&mut img, &full, s, FULL_COLOR, 1);
        }
        if let Some(v) = d.visible {
            draw_box(&mut img, &v, s, VISIBLE_COLOR, 2);
        }
        let anchor = d.visible.or(d.full).expect("detection has a box");
        let label = score_label(d.score);
        let (x, y) = ((anchor.x1() * s) as i32 + 2, (anchor.y1() * s) as i32 + 3);
        let rect = Rect::at(x - 1, y - 1).of_size(text_width(&label, 2) + 2, 12);
        draw_filled_rect_mut(&mut img, rect, Rgb([0, 90, 0]));
        draw_text(&mut img, x, y, &label, 2, TEXT_COLOR);
    }
    img
}

fn draw_parts(img: &mut RgbImage, full: &BBox, scores: &[f64; NUM_PARTS], s: f64) {
    for (part, &score) in divide_parts(full).iter().zip(scores) {
        let r = scaled_rect(part, s);
        blend(img, r, PART_COLOR, 0.45 * score.clamp(0.0, 1.0));
        draw_hollow_rect_mut(img, r, PART_COLOR);
        let label = score_label(score);
        let tx = r.left() + (r.width() as i32 - text_width(&label, 1) as i32) / 2;
        let ty = r.top() + (r.height() as i32 - 5) / 2;
        draw_text(img, tx, ty, &label, 1, TEXT_COLOR);
    }
}

/// Axis mapping of a plot.
#[derive(Debug, Clone, Copy)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub log: bool,
}

impl Axis {
    fn unit(&self, v: f64) -> f64 {
        if self.log {
            let v = v.max(self.min);
            (v.ln() - self.min.ln()) / (self.max.ln() - self.min.ln())
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.min.log10().ceil() as i32, self.max.log10().floor() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=5).map(|k| self.min + (self.max - self.min) * k as f64 / 5.0).collect()
        }
    }
}

fn tick_label(v: f64) -> String {
    if v >= 1.0 || v == 0.0 {
        format!("{v}")
    } else {
        let s = format!("{v}");
        s.trim_start_matches('0').to_string()
    }
}

/// Line plot of one or more curves on a white canvas, with tick labels.
pub fn plot(curves: &[(&[(f64, f64)], Rgb<u8>)], x: Axis, y: Axis) -> RgbImage {
    const W: u32 = 480;
    const H: u32 = 360;
    const LEFT: f64 = 44.0;
    const BOTTOM: f64 = 28.0;
    const PAD: f64 = 14.0;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let pw = W as f64 - LEFT - PAD;
    let ph = H as f64 - BOTTOM - PAD;
    let px = |v: f64| (LEFT + x.unit(v).clamp(0.0, 1.0) * pw) as f32;
    let py = |v: f64| (PAD + (1.0 - y.unit(v).clamp(0.0, 1.0)) * ph) as f32;

    for t in x.ticks() {
        draw_line_segment_mut(&mut img, (px(t), PAD as f32), (px(t), (PAD + ph) as f32), GRID_COLOR);
        let label = tick_label(t);
        let lx = px(t) as i32 - text_width(&label, 2) as i32 / 2;
        draw_text(&mut img, lx, (PAD + ph) as i32 + 8, &label, 2, AXIS_COLOR);
    }
    for t in y.ticks() {
        draw_line_segment_mut(&mut img, (LEFT as f32, py(t)), ((LEFT + pw) as f32, py(t)), GRID_COLOR);
        let label = tick_label(t);
        let lx = LEFT as i32 - 6 - text_width(&label, 2) as i32;
        draw_text(&mut img, lx, py(t) as i32 - 5, &label, 2, AXIS_COLOR);
    }
    let (x0, y0) = (LEFT as f32, (PAD + ph) as f32);
    draw_line_segment_mut(&mut img, (x0, y0), ((LEFT + pw) as f32, y0), AXIS_COLOR);
    draw_line_segment_mut(&mut img, (x0, PAD as f32), (x0, y0), AXIS_COLOR);

    for (points, color) in curves {
        for pair in points.windows(2) {
            let a = (px(pair[0].0), py(pair[0].1));
            let b = (px(pair[1].0), py(pair[1].1));
            draw_line_segment_mut(&mut img, a, b, *color);
            draw_line_segment_mut(&mut img, (a.0, a.1 + 1.0), (b.0, b.1 + 1.0), *color);
        }
    }
    img
}

/// Curve colors cycled across plotted series.
pub const SERIES_COLORS: [Rgb<u8>; 5] =
    [Rgb([220, 50, 47]), Rgb([38, 139, 210]), Rgb([133, 153, 0]), Rgb([211, 54, 130]), Rgb([108, 113, 196])];
