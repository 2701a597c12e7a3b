//! Amplitude-spectrum statistics for auditing domain shift.
//!
//! The centroid of a flattened amplitude vector `X` is its power-weighted mean
//! value, `F_c = Σ X_i·X_i² / Σ X_i²`, and the spread is the power-weighted
//! standard deviation of the values about `F_c`. Both weight amplitude values,
//! not frequency coordinates.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::fourier;
use crate::rng::{self, tag};

/// Default fraction of each spectral axis kept by [`low_frequency_filter`].
pub const DEFAULT_KEEP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralStats {
    pub sample_id: usize,
    pub domain_id: usize,
    pub label: usize,
    pub centroid_frequency: f64,
    pub frequency_std: f64,
}

fn power(amplitudes: &[f64]) -> Result<f64> {
    let p: f64 = amplitudes.iter().map(|x| x * x).sum();
    if p > 0.0 && p.is_finite() {
        Ok(p)
    } else {
        Err(Error::UndefinedStatistic(
            "spectral statistics need at least one nonzero finite amplitude",
        ))
    }
}

/// Power-weighted mean amplitude value.
pub fn centroid_frequency(amplitudes: &[f64]) -> Result<f64> {
    let p = power(amplitudes)?;
    Ok(amplitudes.iter().map(|x| x * x * x).sum::<f64>() / p)
}

/// Power-weighted standard deviation of amplitude values about the centroid.
pub fn frequency_std(amplitudes: &[f64]) -> Result<f64> {
    let p = power(amplitudes)?;
    let fc = centroid_frequency(amplitudes)?;
    let var = amplitudes
        .iter()
        .map(|x| (x - fc) * (x - fc) * x * x)
        .sum::<f64>()
        / p;
    Ok(var.max(0.0).sqrt())
}

/// Center-shifts a row-major `h×w` amplitude plane, keeps the central
/// `keep_fraction` window on each axis, and returns it flattened with `log1p`
/// applied.
pub fn low_frequency_filter(plane: &[f64], height: usize, width: usize, keep_fraction: f64) -> Result<Vec<f64>> {
    if plane.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width} plane",
            plane.len()
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "keep_fraction = {keep_fraction} not in (0, 1]"
        )));
    }
    let ch = (keep_fraction * height as f64).round() as usize;
    let cw = (keep_fraction * width as f64).round() as usize;
    if ch < 2 || cw < 2 {
        return Err(Error::OutOfRange(format!(
            "crop window {ch}x{cw} is smaller than 2x2"
        )));
    }
    // after a center shift, shifted[y] = plane[(y + h - h/2) % h]
    let (y0, x0) = (height / 2 - ch / 2, width / 2 - cw / 2);
    let mut out = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        let sy = (y + height - height / 2) % height;
        for x in x0..x0 + cw {
            let sx = (x + width - width / 2) % width;
            out.push(plane[sy * width + sx].ln_1p());
        }
    }
    Ok(out)
}

/// Per-sample statistics and low-frequency embeddings for a dataset sample.
#[derive(Debug, Clone)]
pub struct SpectralAudit {
    pub stats: Vec<SpectralStats>,
    /// One row per entry of `stats`, `dim` values each.
    pub embeddings: Vec<Vec<f32>>,
    pub dim: usize,
    pub keep_fraction: f64,
    pub domain_names: Vec<String>,
}

/// Channel-averaged statistics and low-frequency embedding of one image.
pub fn image_spectral_profile(
    image: &crate::raster::ImageTensor,
    keep_fraction: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let polar = fourier::decompose(image)?;
    let (c, h, w) = polar.amplitude.shape();
    let (mut fc, mut fstd) = (0.0, 0.0);
    let mut emb: Vec<f64> = Vec::new();
    for ch in 0..c {
        let plane = polar.amplitude.plane(ch);
        fc += centroid_frequency(plane)? / c as f64;
        fstd += frequency_std(plane)? / c as f64;
        let filtered = low_frequency_filter(plane, h, w, keep_fraction)?;
        if emb.is_empty() {
            emb = vec![0.0; filtered.len()];
        }
        for (e, v) in emb.iter_mut().zip(filtered) {
            *e += v / c as f64;
        }
    }
    Ok((fc, fstd, emb))
}

/// Draws up to `per_domain` seeded samples from every domain and profiles each.
/// Rows are sorted by sample id.
pub fn audit_dataset(
    dataset: &MultiDomainDataset,
    per_domain: usize,
    keep_fraction: f64,
    seed: u64,
) -> Result<SpectralAudit> {
    let empty: Vec<String> = (0..dataset.num_domains())
        .filter(|&d| dataset.domain_ids(d).is_empty())
        .map(|d| dataset.domain_names()[d].clone())
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyDomain(empty));
    }
    let mut chosen = Vec::new();
    for d in 0..dataset.num_domains() {
        let mut ids = dataset.domain_ids(d);
        ids.shuffle(&mut rng::stream(seed, &[tag::AUDIT, d as u64]));
        ids.truncate(per_domain);
        chosen.extend(ids);
    }
    chosen.sort_unstable();
    let mut stats = Vec::with_capacity(chosen.len());
    let mut embeddings = Vec::with_capacity(chosen.len());
    for id in chosen {
        let s = &dataset.samples()[id];
        let (fc, fstd, emb) = image_spectral_profile(&s.image, keep_fraction)?;
        stats.push(SpectralStats {
            sample_id: id,
            domain_id: s.domain,
            label: s.label,
            centroid_frequency: fc,
            frequency_std: fstd,
        });
        embeddings.push(emb.into_iter().map(|v| v as f32).collect());
    }
    let dim = embeddings.first().map(Vec::len).unwrap_or(0);
    Ok(SpectralAudit {
        stats,
        embeddings,
        dim,
        keep_fraction,
        domain_names: dataset.domain_names().to_vec(),
    })
}

/// Five-number summary used for boxplots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    /// Linear-interpolation quantiles; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

impl SpectralAudit {
    /// Mean `(F_c, F_std)` per domain, `None` for unsampled domains.
    pub fn domain_means(&self) -> Vec<Option<(f64, f64)>> {
        (0..self.domain_names.len())
            .map(|d| {
                let rows: Vec<_> = self.stats.iter().filter(|s| s.domain_id == d).collect();
                (!rows.is_empty()).then(|| {
                    let n = rows.len() as f64;
                    (
                        rows.iter().map(|s| s.centroid_frequency).sum::<f64>() / n,
                        rows.iter().map(|s| s.frequency_std).sum::<f64>() / n,
                    )
                })
            })
            .collect()
    }

    /// Boxplot summaries of `(F_c, F_std)` per domain.
    pub fn domain_boxplots(&self) -> Vec<(String, Option<FiveNumber>, Option<FiveNumber>)> {
        self.domain_names
            .iter()
            .enumerate()
            .map(|(d, name)| {
                let fc: Vec<f64> = self
                    .stats
                    .iter()
                    .filter(|s| s.domain_id == d)
                    .map(|s| s.centroid_frequency)
                    .collect();
                let fs: Vec<f64> = self
                    .stats
                    .iter()
                    .filter(|s| s.domain_id == d)
                    .map(|s| s.frequency_std)
                    .collect();
                (name.clone(), FiveNumber::of(&fc), FiveNumber::of(&fs))
            })
            .collect()
    }

    /// Writes `stats.csv`, `embeddings.f32` (row-major little-endian float32),
    /// `embeddings.json` and `spectral_boxplot.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("sample_id,domain,f_c,f_std\n");
        for s in &self.stats {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                s.sample_id, self.domain_names[s.domain_id], s.centroid_frequency, s.frequency_std
            ));
        }
        write_file(&dir.join("stats.csv"), csv.as_bytes())?;

        let mut bytes = Vec::with_capacity(self.embeddings.len() * self.dim * 4);
        for row in &self.embeddings {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(&dir.join("embeddings.f32"), &bytes)?;
        let sidecar = serde_json::json!({
            "rows": self.embeddings.len(),
            "cols": self.dim,
            "dtype": "float32",
            "byte_order": "little",
            "layout": "row-major",
            "transform": "log1p",
            "keep_fraction": self.keep_fraction,
            "sample_ids": self.stats.iter().map(|s| s.sample_id).collect::<Vec<_>>(),
            "domains": self.stats.iter().map(|s| self.domain_names[s.domain_id].as_str()).collect::<Vec<_>>(),
            "labels": self.stats.iter().map(|s| s.label).collect::<Vec<_>>(),
        });
        write_file(
            &dir.join("embeddings.json"),
            serde_json::to_string_pretty(&sidecar)?.as_bytes(),
        )?;

        let mut box_csv = String::from("domain,statistic,min,q1,median,q3,max\n");
        for (name, fc, fs) in self.domain_boxplots() {
            for (stat, summary) in [("f_c", fc), ("f_std", fs)] {
                if let Some(b) = summary {
                    box_csv.push_str(&format!(
                        "{name},{stat},{},{},{},{},{}\n",
                        b.min, b.q1, b.median, b.q3, b.max
                    ));
                }
            }
        }
        write_file(&dir.join("spectral_boxplot.csv"), box_csv.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
