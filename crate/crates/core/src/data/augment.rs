use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::ImageTensor;

/// Standard training-view augmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    /// Range of the crop aspect ratio (width / height), sampled log-uniformly.
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop_scale: [0.8, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

impl AugmentParams {
    /// Parameters under which [`standard_augment`] is the identity.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

fn factor(rng: &mut impl Rng, magnitude: f64) -> Option<f32> {
    (magnitude > 0.0).then(|| rng.random_range((1.0 - magnitude).max(0.0)..=1.0 + magnitude) as f32)
}

/// Random resized crop, horizontal flip, then brightness/contrast/saturation
/// jitter. Output has the input's shape and is clamped to `[0, 1]`.
pub fn standard_augment(image: &ImageTensor, params: &AugmentParams, rng: &mut impl Rng) -> ImageTensor {
    let (c, h, w) = image.shape();
    let (mut x0, mut y0, mut cw, mut ch) = (0.0f32, 0.0f32, w as f32, h as f32);
    let area = (h * w) as f64;
    let (lo, hi) = (params.crop_scale[0], params.crop_scale[1]);
    let (rlo, rhi) = (params.crop_ratio[0].ln(), params.crop_ratio[1].ln());
    for _ in 0..10 {
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let r = if rhi > rlo {
            rng.random_range(rlo..=rhi).exp()
        } else {
            rlo.exp()
        };
        let tw = (area * s * r).sqrt().round();
        let th = (area * s / r).sqrt().round();
        if tw >= 1.0 && th >= 1.0 && tw <= w as f64 && th <= h as f64 {
            cw = tw as f32;
            ch = th as f32;
            x0 = rng.random_range(0..=(w - tw as usize)) as f32;
            y0 = rng.random_range(0..=(h - th as usize)) as f32;
            break;
        }
    }
    let flip = params.flip_p > 0.0 && rng.random_bool(params.flip_p.min(1.0));
    let (sx, sy) = (cw / w as f32, ch / h as f32);
    let mut out = ImageTensor::from_fn(c, h, w, |ch_i, y, x| {
        let xs = if flip { w - 1 - x } else { x };
        let fy = y0 + (y as f32 + 0.5) * sy - 0.5;
        let fx = x0 + (xs as f32 + 0.5) * sx - 0.5;
        image.sample_bilinear(ch_i, fy, fx)
    })
    .expect("resampling a finite image is finite");

    if let Some(b) = factor(rng, params.brightness) {
        out = out.map(|v| (v * b).clamp(0.0, 1.0)).expect("finite");
    }
    if let Some(k) = factor(rng, params.contrast) {
        let gray = super::filters::luma(&out);
        let mean = gray.iter().sum::<f32>() / gray.len() as f32;
        out = out.map(|v| ((v - mean) * k + mean).clamp(0.0, 1.0)).expect("finite");
    }
    if let Some(s) = factor(rng, params.saturation) {
        if c == 3 {
            let gray = super::filters::luma(&out);
            let n = out.plane_len();
            out = ImageTensor::from_fn(c, h, w, |ch_i, y, x| {
                let g = gray[y * w + x];
                ((out.data()[ch_i * n + y * w + x] - g) * s + g).clamp(0.0, 1.0)
            })
            .expect("finite");
        }
    }
    out
}
