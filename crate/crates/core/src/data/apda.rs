use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{self, Planes};
use crate::raster::ImageTensor;

/// How the amplitude donor of each image is chosen within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartnerSampling {
    /// Any batch member, including the image itself.
    #[default]
    Uniform,
    /// A member from a different domain when one exists in the batch.
    CrossDomain,
}

/// An original training view and its amplitude-perturbed counterpart.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub original: ImageTensor,
    /// Reconstruction clamped to `[0, 1]`.
    pub augmented: ImageTensor,
    /// Reconstruction before clamping.
    pub raw: Planes,
    pub label: usize,
    pub lambda: f64,
    /// Batch index of the amplitude donor.
    pub partner: usize,
    pub overflow_fraction: f64,
}

/// Builds one perturbed view per image: the image keeps its phase while its
/// amplitude is interpolated toward a randomly drawn partner's with
/// `λ ~ U(0, η)`. Labels always come from the original image.
pub fn make_apda_batch(
    images: &[ImageTensor],
    labels: &[usize],
    domains: &[usize],
    eta: f64,
    sampling: PartnerSampling,
    rng: &mut impl Rng,
) -> Result<Vec<AugmentedPair>> {
    if images.len() < 2 {
        return Err(Error::OutOfRange(format!(
            "amplitude perturbation needs a batch of >= 2, got {}",
            images.len()
        )));
    }
    if labels.len() != images.len() || domains.len() != images.len() {
        return Err(Error::Shape("images, labels and domains differ in length".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::OutOfRange(format!("eta = {eta} not in [0, 1]")));
    }
    let shape = images[0].shape();
    if let Some(i) = images.iter().position(|im| im.shape() != shape) {
        return Err(Error::Shape(format!(
            "batch item {i} has shape {:?}, expected {shape:?}",
            images[i].shape()
        )));
    }
    let polar = images
        .iter()
        .map(fourier::decompose)
        .collect::<Result<Vec<_>>>()?;
    let n = images.len();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let partner = match sampling {
            PartnerSampling::Uniform => rng.random_range(0..n),
            PartnerSampling::CrossDomain => {
                let others: Vec<usize> = (0..n).filter(|&j| domains[j] != domains[i]).collect();
                if others.is_empty() {
                    rng.random_range(0..n)
                } else {
                    others[rng.random_range(0..others.len())]
                }
            }
        };
        let lambda = if eta > 0.0 { rng.random_range(0.0..eta) } else { 0.0 };
        let mixed = fourier::mix_amplitude(&polar[i].amplitude, &polar[partner].amplitude, lambda)?;
        let rec = fourier::reconstruct_with(&mixed, &polar[i].phase)?;
        pairs.push(AugmentedPair {
            original: images[i].clone(),
            augmented: rec.image,
            raw: rec.raw,
            label: labels[i],
            lambda,
            partner,
            overflow_fraction: rec.overflow_fraction,
        });
    }
    Ok(pairs)
}
