//! Multi-domain datasets, synthetic domain generation, augmentation,
//! amplitude-perturbation batch assembly and corruptions.

mod apda;
mod augment;
mod corrupt;
mod filters;
mod folder;
mod synth;

pub use apda::{make_apda_batch, AugmentedPair, PartnerSampling};
pub use augment::{standard_augment, AugmentParams};
pub use corrupt::{corrupt, CorruptionKind, Severity};
pub use folder::load_folder_dataset;
pub use synth::{render_glyph, synth_domains, DomainTransform, SynthConfig, MAX_CLASSES};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One labeled image of a domain.
#[derive(Debug, Clone)]
pub struct DomainSample {
    /// Stable index within the dataset.
    pub id: usize,
    pub image: ImageTensor,
    pub label: usize,
    pub domain: usize,
    pub split: Split,
}

/// Labeled samples partitioned by domain, each tagged train or val.
///
/// Immutable after construction. Sample ids equal positions in [`samples`](Self::samples).
#[derive(Debug, Clone)]
pub struct MultiDomainDataset {
    domain_names: Vec<String>,
    class_names: Vec<String>,
    samples: Vec<DomainSample>,
}

impl MultiDomainDataset {
    pub fn new(
        domain_names: Vec<String>,
        class_names: Vec<String>,
        mut samples: Vec<DomainSample>,
    ) -> Result<Self> {
        if domain_names.is_empty() || class_names.is_empty() {
            return Err(Error::Dataset("dataset needs domains and classes".into()));
        }
        let mut shape = None;
        for (i, s) in samples.iter_mut().enumerate() {
            if s.label >= class_names.len() || s.domain >= domain_names.len() {
                return Err(Error::Dataset(format!(
                    "sample {i}: label {} / domain {} out of range",
                    s.label, s.domain
                )));
            }
            match shape {
                None => shape = Some(s.image.shape()),
                Some(sh) if sh != s.image.shape() => {
                    return Err(Error::Shape(format!(
                        "sample {i} has shape {:?}, expected {sh:?}",
                        s.image.shape()
                    )))
                }
                _ => {}
            }
            s.id = i;
        }
        Ok(Self {
            domain_names,
            class_names,
            samples,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn samples(&self) -> &[DomainSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common `C×H×W` shape of all images.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|d| d == name)
    }

    /// Ids of every sample in `domain`, any split.
    pub fn domain_ids(&self, domain: usize) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.domain == domain)
            .map(|s| s.id)
            .collect()
    }

    /// Ids of samples in `split` belonging to any of `domains`.
    pub fn split_ids(&self, domains: &[usize], split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.split == split && domains.contains(&s.domain))
            .map(|s| s.id)
            .collect()
    }

    /// `(domain, class)` pairs absent from the train split of the given domains.
    pub fn missing_train_classes(&self, domains: &[usize]) -> Vec<(usize, usize)> {
        let mut seen = vec![vec![false; self.num_classes()]; self.num_domains()];
        for s in &self.samples {
            if s.split == Split::Train {
                seen[s.domain][s.label] = true;
            }
        }
        domains
            .iter()
            .flat_map(|&d| {
                let seen = &seen[d];
                (0..self.num_classes())
                    .filter(|&c| !seen[c])
                    .map(move |c| (d, c))
            })
            .collect()
    }

    /// Per-domain counts as a JSON document.
    pub fn describe(&self) -> serde_json::Value {
        let domains: Vec<_> = (0..self.num_domains())
            .map(|d| {
                let mut per_class = vec![0usize; self.num_classes()];
                let (mut train, mut val) = (0, 0);
                for s in self.samples.iter().filter(|s| s.domain == d) {
                    per_class[s.label] += 1;
                    match s.split {
                        Split::Train => train += 1,
                        Split::Val => val += 1,
                    }
                }
                serde_json::json!({
                    "name": self.domain_names[d],
                    "samples": train + val,
                    "train": train,
                    "val": val,
                    "per_class": per_class,
                })
            })
            .collect();
        serde_json::json!({
            "num_domains": self.num_domains(),
            "num_classes": self.num_classes(),
            "classes": self.class_names,
            "image_shape": self.image_shape(),
            "samples": self.len(),
            "domains": domains,
        })
    }
}

/// Seeded train/val assignment of `n` items: exactly `round(n·val_fraction)`
/// items (at least one when `n >= 2` and the fraction is positive) go to val.
pub(crate) fn assign_splits(n: usize, val_fraction: f64, seed: u64, tags: &[u64]) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, tags));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.max(1);
    }
    let n_val = n_val.min(n.saturating_sub(1));
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }
    splits
}
