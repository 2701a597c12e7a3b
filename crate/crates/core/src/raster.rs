//! Channel-major `C×H×W` single precision rasters and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// A real-valued `C×H×W` raster stored channel-major. Nominal range is `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height < 2 || width < 2 {
            return Err(Error::Shape(format!(
                "image must have >= 1 channel and be at least 2x2, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "image",
                index,
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Applies `f` to every value. The result must stay finite.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Self> {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Fraction of values outside `[0, 1]`.
    pub fn out_of_range_fraction(&self) -> f64 {
        let n = self.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        n as f64 / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bilinear resample to a new spatial size (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Self::from_fn(self.channels, height, width, |c, y, x| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            self.sample_bilinear(c, fy, fx)
        })
    }

    /// Bilinear sample at fractional coordinates, clamped to the border.
    pub fn sample_bilinear(&self, c: usize, fy: f32, fx: f32) -> f32 {
        let fy = fy.clamp(0.0, (self.height - 1) as f32);
        let fx = fx.clamp(0.0, (self.width - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let ty = fy - y0 as f32;
        let tx = fx - x0 as f32;
        let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
        let bottom = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Loads a PNG/JPEG as RGB (3 channels) scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        })
    }

    /// Writes an 8-bit PNG (grayscale for one channel, RGB for three). Values are clamped.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let err = |source| Error::Image {
            path: path.to_path_buf(),
            source,
        };
        match self.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([to_u8(self.get(0, y as usize, x as usize))])
            })
            .save(path)
            .map_err(err),
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let px = |c| to_u8(self.get(c, y as usize, x as usize));
                image::Rgb([px(0), px(1), px(2)])
            })
            .save(path)
            .map_err(err),
            c => Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
        }
    }
}
