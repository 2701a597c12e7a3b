//! A five-kind corruption suite with five severity levels each.
//!
//! | kind            | parameter per severity 1..5                   |
//! |-----------------|-----------------------------------------------|
//! | gaussian_noise  | σ = 0.04, 0.095, 0.15, 0.205, 0.26            |
//! | shot_noise      | photons/unit = 60, 25, 12, 5, 3               |
//! | defocus_blur    | disk radius (px) = 1, 1.5, 2, 2.5, 3          |
//! | contrast        | gain about the mean = .75, .6, .45, .3, .15   |
//! | brightness      | HSV value shift = .1, .2, .3, .4, .5          |
//!
//! `identity` is also accepted and returns the image unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::filters::{convolve, disk_kernel};
use crate::error::{Error, Result};
use crate::raster::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Identity,
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    /// The five-kind evaluation suite.
    pub const SUITE: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Identity => "identity",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }

    /// Severity parameter for levels 1..=5.
    pub fn parameter(self, severity: Severity) -> f64 {
        let grid: [f64; 5] = match self {
            CorruptionKind::Identity => [0.0; 5],
            CorruptionKind::GaussianNoise => [0.04, 0.095, 0.15, 0.205, 0.26],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
        };
        grid[severity.get() as usize - 1]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(CorruptionKind::Identity)
            .chain(CorruptionKind::SUITE)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "corruption",
                name: s.to_string(),
            })
    }
}

/// Corruption severity in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const ALL: [Severity; 5] = [Severity(1), Severity(2), Severity(3), Severity(4), Severity(5)];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(Self(level))
        } else {
            Err(Error::OutOfRange(format!("severity {level} not in 1..=5")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Severity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

/// Label-preserving corruption of `image`; output clamped to `[0, 1]`.
pub fn corrupt(
    image: &ImageTensor,
    kind: CorruptionKind,
    severity: Severity,
    rng: &mut impl Rng,
) -> ImageTensor {
    let p = kind.parameter(severity);
    let out = match kind {
        CorruptionKind::Identity => return image.clone(),
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p as f32).expect("positive sigma");
            image.map(|v| v + normal.sample(rng))
        }
        CorruptionKind::ShotNoise => image.map(|v| {
            let rate = (v.clamp(0.0, 1.0) as f64) * p;
            let count = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(rng)
            } else {
                0.0
            };
            (count / p) as f32
        }),
        CorruptionKind::DefocusBlur => {
            let (kernel, k) = disk_kernel(p as f32);
            Ok(convolve(image, &kernel, k))
        }
        CorruptionKind::Contrast => {
            let mean = image.data().iter().sum::<f32>() / image.data().len() as f32;
            image.map(|v| (v - mean) * p as f32 + mean)
        }
        CorruptionKind::Brightness => {
            let (c, h, w) = image.shape();
            let n = h * w;
            let d = image.data();
            ImageTensor::from_fn(c, h, w, |ch, y, x| {
                let i = y * w + x;
                let value = (0..c).map(|k| d[k * n + i]).fold(0.0f32, f32::max);
                if value <= 0.0 {
                    p as f32
                } else {
                    d[ch * n + i] * ((value + p as f32).min(1.0) / value)
                }
            })
        }
    };
    out.expect("corruption of a finite image is finite").clamped()
}
