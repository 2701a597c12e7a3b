//! Desk-scale synthetic multi-domain benchmark: class-defining glyphs rendered
//! once per sample, then restyled by a per-domain transform. Transforms change
//! color, texture, sharpness, noise spectrum or contrast, never the glyph, so
//! every domain is label-preserving by construction.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::filters::{convolve, gaussian_blur};
use super::{assign_splits, DomainSample, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::rng::{self, tag};

/// Maximum number of glyph classes.
pub const MAX_CLASSES: usize = 10;

const GLYPH_NAMES: [&str; MAX_CLASSES] = [
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "cross",
    "diamond",
    "frame",
    "bars",
    "pillar",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTransform {
    Identity,
    ColorMap,
    BackgroundTexture,
    GaussianBlur,
    SpectralNoise,
    ContrastShift,
}

impl DomainTransform {
    pub const ALL: [DomainTransform; 6] = [
        DomainTransform::Identity,
        DomainTransform::ColorMap,
        DomainTransform::BackgroundTexture,
        DomainTransform::GaussianBlur,
        DomainTransform::SpectralNoise,
        DomainTransform::ContrastShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainTransform::Identity => "identity",
            DomainTransform::ColorMap => "color_map",
            DomainTransform::BackgroundTexture => "background_texture",
            DomainTransform::GaussianBlur => "gaussian_blur",
            DomainTransform::SpectralNoise => "spectral_noise",
            DomainTransform::ContrastShift => "contrast_shift",
        }
    }
}

impl fmt::Display for DomainTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "domain transform",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// One transform per domain, in domain order.
    pub domains: Vec<DomainTransform>,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domains: vec![
                DomainTransform::Identity,
                DomainTransform::ColorMap,
                DomainTransform::BackgroundTexture,
                DomainTransform::SpectralNoise,
            ],
            classes: 5,
            per_class: 200,
            image_size: 32,
            val_fraction: 0.1,
        }
    }
}

/// Where and how a glyph is drawn.
#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f32,
    cy: f32,
    scale: f32,
    angle: f32,
}

fn inside_triangle(u: f32, v: f32) -> bool {
    let (ax, ay, bx, by, cx, cy) = (0.0, -0.8, 0.78, 0.62, -0.78, 0.62);
    let edge = |x0: f32, y0: f32, x1: f32, y1: f32| (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
    let (e0, e1, e2) = (edge(ax, ay, bx, by), edge(bx, by, cx, cy), edge(cx, cy, ax, ay));
    (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
}

/// Whether normalized glyph coordinates `(u, v)` (in `[-1, 1]`, `v` down) are inked.
fn glyph_contains(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => r < 0.8,
        1 => au.max(av) < 0.68,
        2 => inside_triangle(u, v),
        3 => (au < 0.22 && av < 0.85) || (av < 0.22 && au < 0.85),
        4 => r > 0.45 && r < 0.85,
        5 => {
            let (p, q) = ((u + v) * std::f32::consts::FRAC_1_SQRT_2, (u - v) * std::f32::consts::FRAC_1_SQRT_2);
            (p.abs() < 0.2 && q.abs() < 0.85) || (q.abs() < 0.2 && p.abs() < 0.85)
        }
        6 => au + av < 0.88,
        7 => au.max(av) < 0.8 && au.max(av) > 0.5,
        8 => au < 0.82 && ((v - 0.42).abs() < 0.18 || (v + 0.42).abs() < 0.18),
        _ => au < 0.24 && av < 0.88,
    }
}

/// Anti-aliased single channel coverage mask of a glyph (4×4 supersampling).
fn glyph_mask(class: usize, size: usize, p: Placement) -> Vec<f32> {
    let (sin, cos) = p.angle.sin_cos();
    let half = size as f32 / 2.0;
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f32 + (sx as f32 + 0.5) / 4.0 - half - p.cx;
                    let py = y as f32 + (sy as f32 + 0.5) / 4.0 - half - p.cy;
                    let u = (cos * px + sin * py) / (p.scale * half);
                    let v = (-sin * px + cos * py) / (p.scale * half);
                    if glyph_contains(class, u, v) {
                        hits += 1;
                    }
                }
            }
            mask[y * size + x] = hits as f32 / 16.0;
        }
    }
    mask
}

fn random_placement(rng: &mut impl Rng, size: usize) -> Placement {
    let jitter = 0.12 * size as f32;
    Placement {
        cx: rng.random_range(-jitter..=jitter),
        cy: rng.random_range(-jitter..=jitter),
        scale: rng.random_range(0.55..=0.8),
        angle: rng.random_range(-0.25..=0.25),
    }
}

/// Renders glyph `class` as a gray `1×size×size` mask with a random placement.
pub fn render_glyph(class: usize, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if class >= MAX_CLASSES {
        return Err(Error::OutOfRange(format!(
            "glyph class {class} >= {MAX_CLASSES}"
        )));
    }
    let p = random_placement(rng, size);
    ImageTensor::new(1, size, size, glyph_mask(class, size, p))
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn lum(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn composite(mask: &[f32], size: usize, bg: impl Fn(usize, usize, usize) -> f32, fg: [f32; 3]) -> ImageTensor {
    ImageTensor::from_fn(3, size, size, |c, y, x| {
        let m = mask[y * size + x];
        bg(c, y, x) * (1.0 - m) + fg[c] * m
    })
    .expect("composite of finite inputs")
}

fn gray_on_black(mask: &[f32], size: usize, rng: &mut impl Rng) -> ImageTensor {
    let g = rng.random_range(0.75..=1.0);
    composite(mask, size, |_, _, _| 0.0, [g, g, g])
}

/// Applies a domain style to a glyph coverage mask.
fn stylize(transform: DomainTransform, mask: &[f32], size: usize, rng: &mut impl Rng) -> ImageTensor {
    match transform {
        DomainTransform::Identity => gray_on_black(mask, size, rng),
        DomainTransform::ColorMap => {
            let (bg, fg) = loop {
                let (bg, fg) = (random_color(rng), random_color(rng));
                if (lum(bg) - lum(fg)).abs() >= 0.3 {
                    break (bg, fg);
                }
            };
            composite(mask, size, |c, _, _| bg[c], fg)
        }
        DomainTransform::BackgroundTexture => {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.18..=0.32);
            let phi = rng.random_range(0.0..2.0 * PI);
            let tint = random_color(rng);
            let fg = random_color(rng);
            let (s, c) = theta.sin_cos();
            composite(
                mask,
                size,
                |ch, y, x| {
                    let t = (2.0 * PI * freq * (x as f32 * c + y as f32 * s) + phi).sin();
                    (0.5 + 0.4 * t) * (0.4 + 0.6 * tint[ch])
                },
                fg,
            )
        }
        DomainTransform::GaussianBlur => {
            let img = gray_on_black(mask, size, rng);
            gaussian_blur(&img, rng.random_range(1.0..=1.6))
        }
        DomainTransform::SpectralNoise => {
            let img = gray_on_black(mask, size, rng);
            let normal = Normal::new(0.0f32, 0.35).expect("valid sigma");
            let noise = ImageTensor::from_fn(1, size, size, |_, _, _| normal.sample(rng))
                .expect("finite noise");
            // high-pass: noise minus its 3x3 local mean
            let smooth = convolve(&noise, &[1.0 / 9.0; 9], 3);
            ImageTensor::from_fn(3, size, size, |c, y, x| {
                (img.get(c, y, x) + noise.get(0, y, x) - smooth.get(0, y, x)).clamp(0.0, 1.0)
            })
            .expect("finite")
        }
        DomainTransform::ContrastShift => {
            let img = gray_on_black(mask, size, rng);
            let gain = rng.random_range(0.15..=0.35);
            let offset = rng.random_range(-0.2..=0.2);
            img.map(|v| (0.5 + offset + (v - 0.5) * gain).clamp(0.0, 1.0))
                .expect("finite")
        }
    }
}

/// Generates `domains × classes × per_class` samples with seeded 90/10-style splits.
pub fn synth_domains(config: &SynthConfig, seed: u64) -> Result<MultiDomainDataset> {
    if config.domains.len() < 2 {
        return Err(Error::Dataset(
            "synthetic benchmark needs at least 2 domain transforms".into(),
        ));
    }
    if config.classes < 2 || config.classes > MAX_CLASSES {
        return Err(Error::OutOfRange(format!(
            "classes = {} not in 2..={MAX_CLASSES}",
            config.classes
        )));
    }
    if config.image_size < 8 || config.per_class == 0 {
        return Err(Error::OutOfRange(
            "image_size must be >= 8 and per_class >= 1".into(),
        ));
    }
    let size = config.image_size;
    let mut samples = Vec::new();
    let mut domain_names = Vec::new();
    for (d, &transform) in config.domains.iter().enumerate() {
        let base = transform.name().to_string();
        let name = if domain_names.contains(&base) {
            format!("{base}_{d}")
        } else {
            base
        };
        domain_names.push(name);
        let n = config.classes * config.per_class;
        let splits = assign_splits(n, config.val_fraction, seed, &[tag::SPLIT, d as u64]);
        for i in 0..n {
            let label = i % config.classes;
            let mut r = rng::stream(seed, &[tag::SYNTH, d as u64, i as u64]);
            let placement = random_placement(&mut r, size);
            let mask = glyph_mask(label, size, placement);
            samples.push(DomainSample {
                id: 0,
                image: stylize(transform, &mask, size, &mut r),
                label,
                domain: d,
                split: splits[i],
            });
        }
    }
    let class_names = GLYPH_NAMES[..config.classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    MultiDomainDataset::new(domain_names, class_names, samples)
}
