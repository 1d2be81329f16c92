//! PNG figures: explanation triptychs and robustness-curve plots.

use std::path::Path;

use font8x8::UnicodeFonts;
use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use ndarray::Array2;

use crate::attacks::clip_add;
use crate::error::{Error, Result};
use crate::evaluation::RobustnessCurve;
use crate::training::TrainMode;

const GLYPH: u32 = 8;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

fn draw_text<P: image::Pixel>(
    img: &mut image::ImageBuffer<P, Vec<P::Subpixel>>,
    x: u32,
    y: u32,
    text: &str,
    ink: P,
) -> Rect {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(glyph) = font8x8::BASIC_FONTS.get(ch) {
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8u32 {
                    if bits & (1 << col) != 0 {
                        let (px, py) = (cx + col, y + row as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, ink);
                        }
                    }
                }
            }
        }
        cx += GLYPH;
    }
    Rect {
        x,
        y,
        width: cx - x,
        height: GLYPH,
    }
}

/// Symmetric perturbation heatmap `0.5 + δ / (2·max|δ|)`; exactly 0.5 where
/// `δ = 0` and everywhere when `δ ≡ 0`.
pub fn heatmap(delta: &Array2<f64>) -> Array2<f64> {
    let peak = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Array2::from_elem(delta.dim(), 0.5);
    }
    delta.mapv(|d| 0.5 + d / (2.0 * peak))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Placement of the panels and annotations inside a rendered triptych.
#[derive(Debug, Clone, PartialEq)]
pub struct TriptychLayout {
    pub panels: [Rect; 3],
    pub annotations: Vec<(String, Rect)>,
}

#[derive(Debug, Clone)]
pub struct Triptych {
    pub image: GrayImage,
    pub layout: TriptychLayout,
}

/// Text shown on a triptych: target label on the left, predictions above the
/// first two panels.
#[derive(Debug, Clone)]
pub struct TriptychLabels {
    pub target: String,
    pub prediction_before: String,
    pub prediction_after: String,
}

/// `[x | clip(x + δ) | heatmap(δ)]` on a white canvas, panels upscaled by
/// nearest neighbour to at least 96 pixels on the long side.
pub fn render_triptych(x: &Array2<f64>, delta: &Array2<f64>, labels: &TriptychLabels) -> Triptych {
    let (h, w) = x.dim();
    let scale = (96 / h.max(w).max(1)).max(1) as u32;
    let (ph, pw) = (h as u32 * scale, w as u32 * scale);
    let target = format!("T: {}", labels.target);
    let left = (target.chars().count() as u32 * GLYPH + 8).max(16);
    let top = GLYPH + 8;
    let gap = 6;
    let width = left + 3 * pw + 2 * gap + 4;
    let height = top + ph + 4;
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));

    let perturbed = clip_add(x, delta);
    let heat = heatmap(delta);
    let mut panels = [Rect {
        x: 0,
        y: 0,
        width: pw,
        height: ph,
    }; 3];
    for (i, source) in [x, &perturbed, &heat].into_iter().enumerate() {
        let ox = left + i as u32 * (pw + gap);
        panels[i] = Rect {
            x: ox,
            y: top,
            width: pw,
            height: ph,
        };
        for py in 0..ph {
            for px in 0..pw {
                let v = source[[(py / scale) as usize, (px / scale) as usize]];
                img.put_pixel(ox + px, top + py, Luma([to_byte(v)]));
            }
        }
    }

    let ink = Luma([0]);
    let mut annotations = Vec::new();
    let ty = top + ph / 2 - GLYPH / 2;
    annotations.push((target.clone(), draw_text(&mut img, 4, ty, &target, ink)));
    for (i, pred) in [&labels.prediction_before, &labels.prediction_after]
        .into_iter()
        .enumerate()
    {
        let text = format!("P: {pred}");
        let rect = draw_text(&mut img, panels[i].x, 4, &text, ink);
        annotations.push((text, rect));
    }
    Triptych {
        image: img,
        layout: TriptychLayout {
            panels,
            annotations,
        },
    }
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Accuracy-versus-radius plot: mean line with a ±1 std band per model,
/// dashed for ERM models and solid for adversarially trained ones.
pub fn render_curves(curves: &[(RobustnessCurve, TrainMode)]) -> RgbImage {
    let (width, height) = (640u32, 420u32);
    let (left, right, top, bottom) = (56u32, 20u32, 20u32, 48u32);
    let (pw, ph) = (
        (width - left - right) as f64,
        (height - top - bottom) as f64,
    );
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let max_eps = curves
        .iter()
        .flat_map(|(c, _)| c.epsilons.iter().copied())
        .fold(0.0f64, f64::max);
    let x_span = if max_eps > 0.0 { max_eps } else { 1.0 };
    let to_px = |eps: f64, acc: f64| -> (f32, f32) {
        (
            (left as f64 + eps / x_span * pw) as f32,
            (top as f64 + (1.0 - acc.clamp(0.0, 1.0)) * ph) as f32,
        )
    };

    // bands first so lines stay on top
    for (idx, (curve, _)) in curves.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let tint = Rgb(color.map(|c| ((c as u32 + 3 * 255) / 4) as u8));
        for px in left..width - right {
            let eps = (px - left) as f64 / pw * x_span;
            let Some((lo, hi)) = band_at(curve, eps) else {
                continue;
            };
            let (_, y_hi) = to_px(eps, hi);
            let (_, y_lo) = to_px(eps, lo);
            for py in (y_hi.round() as u32)..=(y_lo.round() as u32).min(height - bottom) {
                img.put_pixel(px, py, tint);
            }
        }
    }

    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(
        &mut img,
        (left as f32, top as f32),
        (left as f32, (height - bottom) as f32),
        axis,
    );
    draw_line_segment_mut(
        &mut img,
        (left as f32, (height - bottom) as f32),
        ((width - right) as f32, (height - bottom) as f32),
        axis,
    );
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        let (_, y) = to_px(0.0, acc);
        draw_line_segment_mut(&mut img, (left as f32 - 4.0, y), (left as f32, y), axis);
        draw_text(&mut img, 8, y as u32 - 4, &format!("{acc:.1}"), axis);
    }
    for tick in 0..=4 {
        let eps = x_span * tick as f64 / 4.0;
        let (x, _) = to_px(eps, 0.0);
        let base = (height - bottom) as f32;
        draw_line_segment_mut(&mut img, (x, base), (x, base + 4.0), axis);
        let label = format!("{eps:.2}");
        let lx = (x as u32).saturating_sub(label.len() as u32 * GLYPH / 2);
        draw_text(&mut img, lx, height - bottom + 8, &label, axis);
    }
    draw_text(&mut img, width / 2 - 40, height - 16, "L2 epsilon", axis);

    for (idx, (curve, mode)) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[idx % PALETTE.len()]);
        for (k, pair) in curve.epsilons.windows(2).enumerate() {
            let a = to_px(pair[0], curve.mean[k]);
            let b = to_px(pair[1], curve.mean[k + 1]);
            draw_styled(&mut img, a, b, color, *mode);
        }
        if curve.epsilons.len() == 1 {
            let (x, y) = to_px(curve.epsilons[0], curve.mean[0]);
            draw_line_segment_mut(&mut img, (x - 3.0, y), (x + 3.0, y), color);
            draw_line_segment_mut(&mut img, (x, y - 3.0), (x, y + 3.0), color);
        }
        // legend
        let ly = top + 8 + idx as u32 * 14;
        let lx = width - right - 200;
        draw_styled(
            &mut img,
            (lx as f32, ly as f32 + 4.0),
            (lx as f32 + 30.0, ly as f32 + 4.0),
            color,
            *mode,
        );
        let tag = match mode {
            TrainMode::Erm => "ERM",
            TrainMode::At => "AT",
        };
        draw_text(
            &mut img,
            lx + 36,
            ly,
            &format!("{} ({tag})", curve.model_id),
            Rgb([0, 0, 0]),
        );
    }
    img
}

fn band_at(curve: &RobustnessCurve, eps: f64) -> Option<(f64, f64)> {
    let e = &curve.epsilons;
    if e.len() < 2 || eps < e[0] || eps > *e.last()? {
        return None;
    }
    let k = e.windows(2).position(|w| eps <= w[1])?;
    let t = (eps - e[k]) / (e[k + 1] - e[k]);
    let lerp = |a: f64, b: f64| a + (b - a) * t;
    let m = lerp(curve.mean[k], curve.mean[k + 1]);
    let s = lerp(curve.std[k], curve.std[k + 1]);
    Some((m - s, m + s))
}

fn draw_styled(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: Rgb<u8>, mode: TrainMode) {
    let thick = |img: &mut RgbImage, p: (f32, f32), q: (f32, f32)| {
        draw_line_segment_mut(img, p, q, color);
        draw_line_segment_mut(img, (p.0, p.1 + 1.0), (q.0, q.1 + 1.0), color);
    };
    match mode {
        TrainMode::At => thick(img, a, b),
        TrainMode::Erm => {
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let (dash, period) = (6.0f32, 10.0f32);
            let mut s = 0.0f32;
            while s < len {
                let e = (s + dash).min(len);
                let p = (a.0 + (b.0 - a.0) * s / len, a.1 + (b.1 - a.1) * s / len);
                let q = (a.0 + (b.0 - a.0) * e / len, a.1 + (b.1 - a.1) * e / len);
                thick(img, p, q);
                s += period;
            }
        }
    }
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
