//! Accuracy, corruption error, embedding export and report files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::data::{corrupt, CorruptionKind, DomainSample, MultiDomainDataset, Severity};
use crate::error::{Error, Result};
use crate::model::{batch_from_images, load_checkpoint, CheckpointManifest, ForwardMode, Network};
use crate::nn::{global_avg_pool, ParamSet};
use crate::raster::ImageTensor;
use crate::spectral::write_file;

const EVAL_CHUNK: usize = 128;

/// A network layout with one parameter set, ready for inference.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: Network,
    pub params: ParamSet<f32>,
}

impl Classifier {
    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let (manifest, params) = load_checkpoint(path)?;
        let (net, fresh) = Network::new::<f32>(&manifest.spec, 0)?;
        if !fresh.same_layout(&params) {
            return Err(Error::Checkpoint(format!(
                "{}: tensors do not match the stored encoder spec",
                path.display()
            )));
        }
        Ok((Self { net, params }, manifest))
    }

    pub fn num_classes(&self) -> usize {
        self.net.spec().num_classes
    }

    /// Logits (`N×classes`) in evaluation mode.
    pub fn logits(&self, images: &[&ImageTensor]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(images.len() * self.num_classes());
        for chunk in images.chunks(EVAL_CHUNK) {
            let x = batch_from_images::<f32>(chunk)?;
            out.extend(self.net.forward(&self.params, &x, ForwardMode::EVAL)?.logits);
        }
        Ok(out)
    }

    /// Globally pooled last-level features (`N×C`).
    pub fn features(&self, images: &[&ImageTensor]) -> Result<(Vec<f32>, usize)> {
        let mut out = Vec::new();
        let mut dim = 0;
        for chunk in images.chunks(EVAL_CHUNK) {
            let x = batch_from_images::<f32>(chunk)?;
            let fwd = self.net.forward(&self.params, &x, ForwardMode::EVAL)?;
            let last = fwd.levels.last().expect("levels");
            dim = last.c;
            out.extend(global_avg_pool(last));
        }
        Ok((out, dim))
    }

    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?, self.num_classes()))
    }

    /// Top-1 accuracy in percent over the given samples.
    pub fn accuracy(&self, samples: &[&DomainSample]) -> Result<f64> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
        Ok(accuracy_from_logits(&self.logits(&images)?, &labels, self.num_classes()))
    }
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Percentage of rows whose argmax equals the label.
pub fn accuracy_from_logits(logits: &[f32], labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = argmax_rows(logits, classes)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Accuracy over every sample of `domain`, any split.
pub fn evaluate_domain(model: &Classifier, ds: &MultiDomainDataset, domain: usize) -> Result<f64> {
    if model.num_classes() != ds.num_classes() {
        return Err(Error::Dataset(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    if domain >= ds.num_domains() {
        return Err(Error::OutOfRange(format!("domain {domain} of {}", ds.num_domains())));
    }
    let samples: Vec<_> = ds.samples().iter().filter(|s| s.domain == domain).collect();
    model.accuracy(&samples)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// `100 − accuracy`.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionTable {
    pub clean_error: f64,
    pub cells: Vec<CorruptionCell>,
    /// Unweighted mean over cells.
    pub mean_error: f64,
    pub samples: usize,
}

/// Unweighted mean of cell errors.
pub fn mean_corruption_error(cells: &[CorruptionCell]) -> f64 {
    cells.iter().map(|c| c.error).sum::<f64>() / cells.len().max(1) as f64
}

/// Error per (kind, severity) on corrupted copies of `samples`. Corruption
/// noise is seeded by `(seed, kind, severity, sample id)`.
pub fn evaluate_corruptions(
    model: &Classifier,
    samples: &[&DomainSample],
    kinds: &[CorruptionKind],
    severities: &[Severity],
    seed: u64,
) -> Result<CorruptionTable> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to corrupt".into()));
    }
    let clean_error = 100.0 - model.accuracy(samples)?;
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    let mut cells = Vec::new();
    for &kind in kinds {
        for &sev in severities {
            let images: Vec<ImageTensor> = samples
                .iter()
                .map(|s| {
                    let mut rng = crate::rng::stream(
                        seed,
                        &[crate::rng::tag::CORRUPT, kind as u64, sev.get() as u64, s.id as u64],
                    );
                    corrupt(&s.image, kind, sev, &mut rng)
                })
                .collect();
            let refs: Vec<_> = images.iter().collect();
            let acc = accuracy_from_logits(&model.logits(&refs)?, &labels, model.num_classes());
            cells.push(CorruptionCell {
                kind,
                severity: sev.get(),
                error: 100.0 - acc,
            });
        }
    }
    Ok(CorruptionTable {
        clean_error,
        mean_error: mean_corruption_error(&cells),
        cells,
        samples: samples.len(),
    })
}

/// Feature rows of one domain with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingExport {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub sample_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl EmbeddingExport {
    /// Writes `<stem>.f32` (little-endian row-major) and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str, ds: &MultiDomainDataset) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&dir.join(format!("{stem}.f32")), &bytes)?;
        let sidecar = serde_json::json!({
            "rows": self.rows,
            "dim": self.dim,
            "dtype": "float32",
            "layout": "row-major little-endian",
            "sample_ids": self.sample_ids,
            "labels": self.labels,
            "domains": self.domains,
            "class_names": ds.class_names(),
            "domain_names": ds.domain_names(),
        });
        write_file(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&sidecar)?)
    }
}

/// Globally pooled last-level features of every sample in `domain`.
pub fn export_embeddings(model: &Classifier, ds: &MultiDomainDataset, domain: usize) -> Result<EmbeddingExport> {
    let samples: Vec<_> = ds.samples().iter().filter(|s| s.domain == domain).collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let (data, dim) = if images.is_empty() {
        (Vec::new(), model.net.spec().level_shape(model.net.spec().num_levels()).0)
    } else {
        model.features(&images)?
    };
    Ok(EmbeddingExport {
        rows: samples.len(),
        dim,
        data,
        sample_ids: samples.iter().map(|s| s.id).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        domains: samples.iter().map(|s| s.domain).collect(),
    })
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0. Needs at least two clusters.
pub fn silhouette(data: &[f32], dim: usize, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if data.len() != n * dim {
        return Err(Error::Shape("silhouette input size mismatch".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::UndefinedStatistic("silhouette needs at least two clusters"));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut total = 0.0;
    let mut sums = vec![0.0f64; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                let d: f64 = row(i)
                    .iter()
                    .zip(row(j))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                sums[labels[j]] += d;
            }
        }
        let own = labels[i];
        if counts[own] < 2 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Evaluation summary written as `report.json` / `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Percent accuracy per domain name.
    pub domain_accuracy: BTreeMap<String, f64>,
    pub average_accuracy: Option<f64>,
    pub sample_counts: BTreeMap<String, usize>,
    pub corruption: Option<CorruptionTable>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(config_hash: String) -> Self {
        Self {
            domain_accuracy: BTreeMap::new(),
            average_accuracy: None,
            sample_counts: BTreeMap::new(),
            corruption: None,
            config_hash,
        }
    }

    pub fn add_domain(&mut self, name: &str, accuracy: f64, samples: usize) {
        self.domain_accuracy.insert(name.to_string(), accuracy);
        self.sample_counts.insert(name.to_string(), samples);
        let n = self.domain_accuracy.len() as f64;
        self.average_accuracy = Some(self.domain_accuracy.values().sum::<f64>() / n);
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("section,name,severity,value\n");
        for (d, a) in &self.domain_accuracy {
            s += &format!("accuracy,{d},,{a:.4}\n");
        }
        if let Some(avg) = self.average_accuracy {
            s += &format!("accuracy,average,,{avg:.4}\n");
        }
        if let Some(c) = &self.corruption {
            s += &format!("corruption,clean,,{:.4}\n", c.clean_error);
            for cell in &c.cells {
                s += &format!("corruption,{},{},{:.4}\n", cell.kind.name(), cell.severity, cell.error);
            }
            s += &format!("corruption,mean,,{:.4}\n", c.mean_error);
        }
        s
    }
}

/// Writes `report.json`, `report.csv` and any extra plot-data CSVs.
pub fn emit_report(dir: &Path, report: &EvalReport, plots: &[(&str, String)]) -> Result<()> {
    write_file(&dir.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    write_file(&dir.join("report.csv"), report.csv().as_bytes())?;
    for (name, body) in plots {
        write_file(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}
