use crate::raster::ImageTensor;

/// Correlates every channel with a square kernel (`k×k`, odd `k`), replicating borders.
pub(crate) fn convolve(image: &ImageTensor, kernel: &[f32], k: usize) -> ImageTensor {
    let (c, h, w) = image.shape();
    let r = (k / 2) as isize;
    ImageTensor::from_fn(c, h, w, |ch, y, x| {
        let mut acc = 0.0;
        for ky in 0..k {
            let yy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
            for kx in 0..k {
                let xx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kernel[ky * k + kx] * image.get(ch, yy, xx);
            }
        }
        acc
    })
    .expect("convolution of a finite image is finite")
}

pub(crate) fn gaussian_kernel(sigma: f32) -> (Vec<f32>, usize) {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k = (2 * r + 1) as usize;
    let mut kernel = Vec::with_capacity(k * k);
    for y in -r..=r {
        for x in -r..=r {
            kernel.push((-((x * x + y * y) as f32) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);
    (kernel, k)
}

pub(crate) fn gaussian_blur(image: &ImageTensor, sigma: f32) -> ImageTensor {
    let (kernel, k) = gaussian_kernel(sigma);
    convolve(image, &kernel, k)
}

/// Uniform disk of the given radius, normalized to unit sum.
pub(crate) fn disk_kernel(radius: f32) -> (Vec<f32>, usize) {
    let r = radius.ceil() as isize;
    let k = (2 * r + 1) as usize;
    let mut kernel = Vec::with_capacity(k * k);
    for y in -r..=r {
        for x in -r..=r {
            let d = ((x * x + y * y) as f32).sqrt();
            // linear falloff over the last half pixel for a soft edge
            kernel.push((radius + 0.5 - d).clamp(0.0, 1.0));
        }
    }
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);
    (kernel, k)
}

/// Rec. 601 luma of an RGB image (or the single channel of a gray one), per pixel.
pub(crate) fn luma(image: &ImageTensor) -> Vec<f32> {
    let n = image.plane_len();
    if image.channels() < 3 {
        return image.channel(0).to_vec();
    }
    (0..n)
        .map(|i| {
            0.299 * image.channel(0)[i] + 0.587 * image.channel(1)[i] + 0.114 * image.channel(2)[i]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_sum_to_one_and_preserve_constants() {
        for (kernel, k) in [gaussian_kernel(1.3), disk_kernel(2.0)] {
            assert!((kernel.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            let img = ImageTensor::filled(3, 6, 6, 0.3).unwrap();
            let out = convolve(&img, &kernel, k);
            assert!(out.max_abs_diff(&img) < 1e-5);
        }
    }
}
