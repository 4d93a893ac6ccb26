//! Procedural paired data: a background (the ground truth), and a copy with
//! stroked text composited on top (the input), plus one quadrilateral per
//! text string.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{self, GLYPH_HEIGHT};
use super::AnnotatedSample;
use crate::geometry::{Point, TextPolygon};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Gradient,
    Stripes,
    Blobs,
    Checker,
    /// Crops from `SynthConfig::photos`, blended with a gradient. Skipped
    /// when no photos are loaded.
    Photo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive range of text strings per image.
    pub texts_per_image: (usize, usize),
    /// Inclusive range of characters per string.
    pub chars_per_text: (usize, usize),
    /// Cap height of the glyphs in pixels.
    pub glyph_height: (f64, f64),
    pub stroke_width: (f64, f64),
    pub max_rotation_deg: f64,
    pub backgrounds: Vec<BackgroundKind>,
    /// Amplitude of the per-pixel uniform noise added to every background.
    pub noise_amplitude: f64,
    /// Per-channel jitter applied to background palette colors.
    pub color_jitter: f64,
    /// Minimum luminance gap between text and the background under it.
    pub min_contrast: f64,
    pub placement_retries: usize,
    pub seed: u64,
    #[serde(skip)]
    pub photos: Vec<Image>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            texts_per_image: (1, 4),
            chars_per_text: (2, 4),
            glyph_height: (8.0, 13.0),
            stroke_width: (1.2, 2.2),
            max_rotation_deg: 20.0,
            backgrounds: vec![
                BackgroundKind::Gradient,
                BackgroundKind::Stripes,
                BackgroundKind::Blobs,
                BackgroundKind::Checker,
            ],
            noise_amplitude: 0.01,
            color_jitter: 0.1,
            min_contrast: 0.3,
            placement_retries: 64,
            seed: 0,
            photos: Vec::new(),
        }
    }
}

impl SynthConfig {
    /// Loads every decodable image in `dir` as a photo background source.
    pub fn with_photo_dir(mut self, dir: &std::path::Path) -> Result<Self, super::DataError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| super::DataError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        for p in paths {
            if let Ok(img) = Image::load(&p) {
                if img.channels() == 3 {
                    self.photos.push(img);
                }
            }
        }
        if !self.backgrounds.contains(&BackgroundKind::Photo) && !self.photos.is_empty() {
            self.backgrounds.push(BackgroundKind::Photo);
        }
        Ok(self)
    }
}

fn rng_for(cfg: &SynthConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random::<f64>(),
        rng.random::<f64>(),
        rng.random::<f64>(),
    ]
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    let mut out = c;
    for v in &mut out {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    out
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = cfg.image_size;
    let mut kinds: Vec<BackgroundKind> = cfg
        .backgrounds
        .iter()
        .copied()
        .filter(|k| *k != BackgroundKind::Photo || !cfg.photos.is_empty())
        .collect();
    if kinds.is_empty() {
        kinds.push(BackgroundKind::Gradient);
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    let c0 = {
        let c = random_color(rng);
        jitter(rng, c, cfg.color_jitter)
    };
    let c1 = {
        let c = random_color(rng);
        jitter(rng, c, cfg.color_jitter)
    };
    let angle = rng.random_range(0.0..PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let size = n as f64;
    let mut px = vec![[0.0; 3]; n * n];
    match kind {
        BackgroundKind::Gradient => {
            for y in 0..n {
                for x in 0..n {
                    let t =
                        ((x as f64 - size / 2.0) * dx + (y as f64 - size / 2.0) * dy) / size + 0.5;
                    px[y * n + x] = lerp3(c0, c1, t.clamp(0.0, 1.0));
                }
            }
        }
        BackgroundKind::Stripes => {
            let period = rng.random_range(8.0..24.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..n {
                for x in 0..n {
                    let s = (x as f64 * dx + y as f64 * dy) * 2.0 * PI / period + phase;
                    px[y * n + x] = lerp3(c0, c1, 0.5 + 0.5 * s.sin());
                }
            }
        }
        BackgroundKind::Blobs => {
            let count = rng.random_range(2..=4);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..size),
                        rng.random_range(0.0..size),
                        rng.random_range(size / 8.0..size / 3.0),
                        {
                            let c = random_color(rng);
                            jitter(rng, c, cfg.color_jitter)
                        },
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let mut c = c0;
                    for &(bx, by, r, col) in &blobs {
                        let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                        c = lerp3(c, col, (-d2 / (2.0 * r * r)).exp());
                    }
                    px[y * n + x] = c;
                }
            }
        }
        BackgroundKind::Checker => {
            let cell = rng.random_range(6.0..16.0);
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 * dx + y as f64 * dy) / cell;
                    let v = (-(x as f64) * dy + y as f64 * dx) / cell;
                    // soft edges keep the pattern band-limited
                    let t = 0.5 + 0.5 * ((u * PI).sin() * (v * PI).sin() * 4.0).tanh();
                    px[y * n + x] = lerp3(c0, c1, t);
                }
            }
        }
        BackgroundKind::Photo => {
            let photo = &cfg.photos[rng.random_range(0..cfg.photos.len())];
            let scale_y = photo.height() as f64 / size;
            let scale_x = photo.width() as f64 / size;
            for y in 0..n {
                for x in 0..n {
                    let sy = ((y as f64 + 0.5) * scale_y) as usize;
                    let sx = ((x as f64 + 0.5) * scale_x) as usize;
                    let p = [
                        photo.get(sy, sx, 0) as f64,
                        photo.get(sy, sx, 1) as f64,
                        photo.get(sy, sx, 2) as f64,
                    ];
                    let t = (x as f64 * dx + y as f64 * dy) / (2.0 * size) + 0.25;
                    px[y * n + x] = lerp3(p, lerp3(c0, c1, t), 0.3);
                }
            }
        }
    }
    if cfg.noise_amplitude > 0.0 {
        for p in &mut px {
            for v in p.iter_mut() {
                *v = (*v + rng.random_range(-cfg.noise_amplitude..=cfg.noise_amplitude))
                    .clamp(0.0, 1.0);
            }
        }
    }
    px
}

struct PlacedText {
    segments: Vec<(Point, Point)>,
    half_width: f64,
    color: [f64; 3],
    polygon: TextPolygon,
}

fn random_text(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    let (lo, hi) = cfg.chars_per_text;
    let len = rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
    let charset: Vec<char> = glyphs::CHARSET.chars().collect();
    (0..len)
        .map(|_| charset[rng.random_range(0..charset.len())])
        .collect()
}

fn try_place(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    text: &str,
    taken: &[(f64, f64, f64, f64)],
) -> Option<(Vec<(Point, Point)>, f64, TextPolygon, (f64, f64, f64, f64))> {
    let size = cfg.image_size as f64;
    let height = rng.random_range(cfg.glyph_height.0..=cfg.glyph_height.1);
    let stroke = rng.random_range(cfg.stroke_width.0..=cfg.stroke_width.1);
    let scale = height / GLYPH_HEIGHT;
    let width = glyphs::layout_width(text.chars().count()) * scale;
    let theta = rng
        .random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        .to_radians();
    let cx = rng.random_range(0.0..size);
    let cy = rng.random_range(0.0..size);
    let (s, c) = theta.sin_cos();
    let to_image = |lx: f64, ly: f64| {
        let (ux, uy) = (lx - width / 2.0, ly - height / 2.0);
        Point::new(cx + ux * c - uy * s, cy + ux * s + uy * c)
    };
    // anti-aliased coverage reaches half the stroke plus half a pixel
    let margin = stroke / 2.0 + 0.5 + 1e-3;
    let corners = [
        to_image(-margin, -margin),
        to_image(width + margin, -margin),
        to_image(width + margin, height + margin),
        to_image(-margin, height + margin),
    ];
    if corners
        .iter()
        .any(|p| p.x < 0.0 || p.y < 0.0 || p.x > size || p.y > size)
    {
        return None;
    }
    let poly = TextPolygon::new(corners.to_vec()).ok()?;
    let bb = poly.bounding_box();
    let overlaps = taken
        .iter()
        .any(|t| bb.0 < t.2 && t.0 < bb.2 && bb.1 < t.3 && t.1 < bb.3);
    if overlaps {
        return None;
    }
    let segments = glyphs::layout(text)
        .into_iter()
        .map(|((ax, ay), (bx, by))| {
            (
                to_image(ax * scale, ay * scale),
                to_image(bx * scale, by * scale),
            )
        })
        .collect();
    Some((segments, stroke / 2.0, poly, bb))
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(Point::new(a.x + t * abx, a.y + t * aby))
}

/// Same `(cfg, index)` always yields the identical sample. Strings that
/// cannot be placed after `placement_retries` attempts are dropped.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> AnnotatedSample {
    let mut rng = rng_for(cfg, index);
    let n = cfg.image_size;
    let bg = background(cfg, &mut rng);
    let (lo, hi) = cfg.texts_per_image;
    let count = if hi == 0 {
        0
    } else {
        rng.random_range(lo..=hi.max(lo))
    };

    let mut placed: Vec<PlacedText> = Vec::new();
    let mut taken = Vec::new();
    for _ in 0..count {
        let text = random_text(&mut rng, cfg);
        for _ in 0..cfg.placement_retries {
            if let Some((segments, half_width, polygon, bb)) =
                try_place(&mut rng, cfg, &text, &taken)
            {
                let (x0, y0, x1, y1) = bb;
                let (mut acc, mut cnt) = (0.0, 0usize);
                for y in (y0.max(0.0) as usize)..(y1.ceil() as usize).min(n) {
                    for x in (x0.max(0.0) as usize)..(x1.ceil() as usize).min(n) {
                        acc += luminance(bg[y * n + x]);
                        cnt += 1;
                    }
                }
                let under = if cnt > 0 { acc / cnt as f64 } else { 0.5 };
                let mut color = random_color(&mut rng);
                if (luminance(color) - under).abs() < cfg.min_contrast {
                    let target = if under > 0.5 { [0.0; 3] } else { [1.0; 3] };
                    color = lerp3(color, target, 0.8);
                }
                taken.push(bb);
                placed.push(PlacedText {
                    segments,
                    half_width,
                    color,
                    polygon,
                });
                break;
            }
        }
    }

    let mut with_text = bg.clone();
    for t in &placed {
        let (x0, y0, x1, y1) = t.polygon.bounding_box();
        for y in (y0.max(0.0) as usize)..(y1.ceil() as usize).min(n) {
            for x in (x0.max(0.0) as usize)..(x1.ceil() as usize).min(n) {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                let d = t
                    .segments
                    .iter()
                    .map(|&(a, b)| segment_distance(p, a, b))
                    .fold(f64::INFINITY, f64::min);
                let cov = (t.half_width + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let px = &mut with_text[y * n + x];
                    *px = lerp3(*px, t.color, cov);
                }
            }
        }
    }

    let to_image = |px: &[[f64; 3]]| {
        Image::from_fn(n, n, 3, |y, x, c| px[y * n + x][c] as f32).quantize_8bit()
    };
    AnnotatedSample {
        id: format!("{:06}", index),
        i_in: to_image(&with_text),
        i_gt: to_image(&bg),
        polygons: placed.into_iter().map(|t| t.polygon).collect(),
    }
}
