//! Per-channel 2D Fourier decomposition into amplitude and phase, and the
//! amplitude-perturbation reconstruction primitive.
//!
//! Transforms run in double precision. The forward transform is unnormalized
//! with kernel `e^{-2πi(uh/H + vw/W)}`; the inverse carries the `1/(H·W)` factor.
//! Under this convention a spectrum decomposes as `A·e^{+iP}`, which is the sign
//! used by [`from_polar`] so that decomposition followed by recomposition is the
//! identity.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

/// Largest tolerated imaginary residue after an inverse transform.
pub const IMAGINARY_TOLERANCE: f64 = 1e-3;

/// A stack of real `H×W` planes, channel-major, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for {channels}x{height}x{width} planes",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_image(image: &ImageTensor) -> Self {
        let (c, h, w) = image.shape();
        Self {
            channels: c,
            height: h,
            width: w,
            data: image.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn check_same_shape(&self, other: &Planes, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?} (resize images, not spectra)",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Converts to an image without clamping; fails on non-finite values.
    pub fn to_image(&self) -> Result<ImageTensor> {
        ImageTensor::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Complex per-channel spectrum, channel-major with row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn bin(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }
}

/// Amplitude (modulus) and phase (argument in `(-π, π]`) planes of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSpectrum {
    pub amplitude: Planes,
    pub phase: Planes,
}

/// Result of an amplitude/phase recomposition.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Output clamped to `[0, 1]`.
    pub image: ImageTensor,
    /// Values before clamping.
    pub raw: Planes,
    /// Fraction of raw values that fell outside `[0, 1]`.
    pub overflow_fraction: f64,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized in-place 2D transform of one row-major `h×w` plane.
fn transform_plane(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    plan(w, inverse).process(buf);
    let mut t = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = buf[y * w + x];
        }
    }
    plan(h, inverse).process(&mut t);
    for x in 0..w {
        for y in 0..h {
            buf[y * w + x] = t[x * h + y];
        }
    }
}

/// Forward transform of double precision planes.
pub fn fft2_planes(planes: &Planes) -> Result<ComplexSpectrum> {
    if let Some(index) = planes.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "fft2 input",
            index,
        });
    }
    let (c, h, w) = planes.shape();
    let mut data: Vec<Complex64> = planes
        .data
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    if h * w > 0 {
        for chunk in data.chunks_mut(h * w) {
            transform_plane(chunk, h, w, false);
            hermitian_symmetrize(chunk, h, w);
        }
    }
    Ok(ComplexSpectrum {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Replaces `X(k)` by `(X(k) + conj X(-k)) / 2` so a real input's spectrum is exactly
/// Hermitian. Rounding otherwise leaves near-zero bins with phases that are not
/// antisymmetric, and swapping in a larger amplitude there yields a complex image.
fn hermitian_symmetrize(plane: &mut [Complex64], h: usize, w: usize) {
    for y in 0..h {
        let my = (h - y) % h;
        for x in 0..w {
            let mx = (w - x) % w;
            let (i, j) = (y * w + x, my * w + mx);
            if j < i {
                continue;
            }
            let a = plane[i];
            let b = plane[j].conj();
            let s = Complex64::new(0.5 * (a.re + b.re), 0.5 * (a.im + b.im));
            plane[i] = s;
            plane[j] = s.conj();
        }
    }
}

/// Forward 2D DFT of every channel of `image`. The DC bin equals the channel sum.
pub fn fft2(image: &ImageTensor) -> Result<ComplexSpectrum> {
    fft2_planes(&Planes::from_image(image))
}

/// Inverse transform with `1/(H·W)` normalization, returning real planes.
///
/// Imaginary residue up to [`IMAGINARY_TOLERANCE`] is discarded; anything larger
/// means the spectrum was not Hermitian and is reported as an error.
pub fn ifft2_planes(spectrum: &ComplexSpectrum) -> Result<Planes> {
    let (c, h, w) = spectrum.shape();
    if h == 0 || w == 0 || spectrum.data.len() != c * h * w {
        return Err(Error::Shape(format!(
            "spectrum {c}x{h}x{w} holding {} bins",
            spectrum.data.len()
        )));
    }
    let mut data = spectrum.data.clone();
    for chunk in data.chunks_mut(h * w) {
        transform_plane(chunk, h, w, true);
    }
    let scale = 1.0 / (h * w) as f64;
    let residue = data.iter().map(|z| (z.im * scale).abs()).fold(0.0, f64::max);
    if residue > IMAGINARY_TOLERANCE || !residue.is_finite() {
        return Err(Error::ImaginaryResidue {
            residue,
            tolerance: IMAGINARY_TOLERANCE,
        });
    }
    Planes::new(c, h, w, data.iter().map(|z| z.re * scale).collect())
}

/// Inverse transform to a single precision image (not clamped).
pub fn ifft2(spectrum: &ComplexSpectrum) -> Result<ImageTensor> {
    ifft2_planes(spectrum)?.to_image()
}

fn wrapped_arg(z: Complex64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let p = z.im.atan2(z.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Splits a spectrum into modulus and argument. Zero bins get phase 0.
pub fn to_polar(spectrum: &ComplexSpectrum) -> PolarSpectrum {
    let (c, h, w) = spectrum.shape();
    let amplitude = spectrum.data.iter().map(|z| z.norm()).collect();
    let phase = spectrum.data.iter().map(|&z| wrapped_arg(z)).collect();
    PolarSpectrum {
        amplitude: Planes {
            channels: c,
            height: h,
            width: w,
            data: amplitude,
        },
        phase: Planes {
            channels: c,
            height: h,
            width: w,
            data: phase,
        },
    }
}

/// Recombines `amplitude · e^{i·phase}` elementwise.
pub fn from_polar(polar: &PolarSpectrum) -> Result<ComplexSpectrum> {
    polar
        .amplitude
        .check_same_shape(&polar.phase, "amplitude/phase shape mismatch")?;
    if let Some((index, &value)) = polar
        .amplitude
        .data
        .iter()
        .enumerate()
        .find(|(_, a)| !(**a >= 0.0))
    {
        return Err(Error::NegativeAmplitude { index, value });
    }
    let (c, h, w) = polar.amplitude.shape();
    let data = polar
        .amplitude
        .data
        .iter()
        .zip(&polar.phase.data)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    Ok(ComplexSpectrum {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Polar decomposition of an image's spectrum.
pub fn decompose(image: &ImageTensor) -> Result<PolarSpectrum> {
    Ok(to_polar(&fft2(image)?))
}

/// Convex combination `(1-λ)·a1 + λ·a2` of two amplitude plane sets.
pub fn mix_amplitude(a1: &Planes, a2: &Planes, lambda: f64) -> Result<Planes> {
    a1.check_same_shape(a2, "amplitude mix")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("lambda = {lambda} not in [0, 1]")));
    }
    let data = if lambda == 0.0 {
        a1.data.clone()
    } else if lambda == 1.0 {
        a2.data.clone()
    } else {
        a1.data
            .iter()
            .zip(&a2.data)
            .map(|(&x, &y)| ((1.0 - lambda) * x + lambda * y).max(0.0))
            .collect()
    };
    Planes::new(a1.channels, a1.height, a1.width, data)
}

/// Inverse transform of `amplitude · e^{i·phase}`, clamped to `[0, 1]`.
pub fn reconstruct_with(amplitude: &Planes, phase: &Planes) -> Result<Reconstruction> {
    let spectrum = from_polar(&PolarSpectrum {
        amplitude: amplitude.clone(),
        phase: phase.clone(),
    })?;
    let raw = ifft2_planes(&spectrum)?;
    let outside = raw.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let overflow_fraction = outside as f64 / raw.data.len().max(1) as f64;
    let image = ImageTensor::new(
        raw.channels,
        raw.height,
        raw.width,
        raw.data.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )?;
    Ok(Reconstruction {
        image,
        raw,
        overflow_fraction,
    })
}

/// Min-max rescale of each channel into `[0, 1]`; flat channels map to 0.
fn rescale_per_channel(planes: &Planes) -> Result<ImageTensor> {
    let n = planes.height * planes.width;
    let mut out = Vec::with_capacity(planes.data.len());
    for c in 0..planes.channels {
        let plane = &planes.data[c * n..(c + 1) * n];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        out.extend(plane.iter().map(|&v| {
            if range > 1e-12 * hi.abs().max(1.0) {
                ((v - lo) / range) as f32
            } else {
                0.0
            }
        }));
    }
    ImageTensor::new(planes.channels, planes.height, planes.width, out)
}

/// Unit amplitude with the image's own phase, rescaled per channel for display.
pub fn phase_only(image: &ImageTensor) -> Result<ImageTensor> {
    let polar = decompose(image)?;
    let (c, h, w) = polar.amplitude.shape();
    let unit = Planes::filled(c, h, w, 1.0);
    let raw = reconstruct_with(&unit, &polar.phase)?.raw;
    rescale_per_channel(&raw)
}

/// The image's amplitude with zero phase, rescaled per channel for display.
pub fn amplitude_only(image: &ImageTensor) -> Result<ImageTensor> {
    let polar = decompose(image)?;
    let (c, h, w) = polar.amplitude.shape();
    let zero = Planes::filled(c, h, w, 0.0);
    let raw = reconstruct_with(&polar.amplitude, &zero)?.raw;
    rescale_per_channel(&raw)
}

/// Channel-averaged central-difference gradient magnitude (wrap-around borders).
pub fn gradient_magnitude(image: &ImageTensor) -> Vec<f64> {
    let (c, h, w) = image.shape();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let gx = image.get(ch, y, (x + 1) % w) as f64
                    - image.get(ch, y, (x + w - 1) % w) as f64;
                let gy = image.get(ch, (y + 1) % h, x) as f64
                    - image.get(ch, (y + h - 1) % h, x) as f64;
                out[y * w + x] += (gx * gx + gy * gy).sqrt() / c as f64;
            }
        }
    }
    out
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Correlation between the edge maps of two images of equal size.
pub fn structure_correlation(a: &ImageTensor, b: &ImageTensor) -> f64 {
    pearson(&gradient_magnitude(a), &gradient_magnitude(b))
}
