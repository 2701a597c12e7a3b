//! Folder-per-domain ingestion.
//!
//! Layout: `root/<domain>/<class>/<image>`. Domains, classes and files are
//! ordered lexicographically; labels index the sorted union of class names.
//! When both `root/splits/<domain>_train.txt` and `<domain>_val.txt` exist,
//! their lines (`<class>/<file>`) fix that domain's split; otherwise a seeded
//! split with the given validation fraction is drawn.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{assign_splits, DomainSample, MultiDomainDataset, Split};
use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::rng::tag;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_split_file(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().next().unwrap_or("").trim_start_matches("./").to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Loads a multi-domain image folder. Images are resized to
/// `image_size × image_size` when given, otherwise all must share the first
/// image's size.
pub fn load_folder_dataset(
    root: &Path,
    image_size: Option<usize>,
    val_fraction: f64,
    seed: u64,
) -> Result<MultiDomainDataset> {
    let domain_dirs: Vec<PathBuf> = sorted_entries(root, true)?
        .into_iter()
        .filter(|p| file_name(p) != "splits")
        .collect();
    if domain_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} holds {} domain directories; need >= 2",
            root.display(),
            domain_dirs.len()
        )));
    }
    let domain_names: Vec<String> = domain_dirs.iter().map(|p| file_name(p)).collect();

    let mut classes = BTreeSet::new();
    let mut layout = Vec::new();
    for dir in &domain_dirs {
        let mut per_class = Vec::new();
        for class_dir in sorted_entries(dir, true)? {
            let files: Vec<PathBuf> = sorted_entries(&class_dir, false)?
                .into_iter()
                .filter(|f| {
                    f.extension()
                        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
                        .unwrap_or(false)
                })
                .collect();
            classes.insert(file_name(&class_dir));
            per_class.push((file_name(&class_dir), files));
        }
        layout.push(per_class);
    }
    let class_names: Vec<String> = classes.into_iter().collect();
    let label_of: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut counts = vec![0usize; class_names.len()];
    for per_class in &layout {
        for (class, files) in per_class {
            counts[label_of[class.as_str()]] += files.len();
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!(
            "class `{}` has no images in any domain",
            class_names[c]
        )));
    }

    let mut shape = image_size.map(|s| (s, s));
    let mut samples = Vec::new();
    for (d, per_class) in layout.iter().enumerate() {
        let present: BTreeSet<&str> = per_class.iter().map(|(c, _)| c.as_str()).collect();
        for c in &class_names {
            if !present.contains(c.as_str()) {
                log::warn!("domain `{}` has no `{c}` directory", domain_names[d]);
            }
        }
        let splits_dir = root.join("splits");
        let train_file = splits_dir.join(format!("{}_train.txt", domain_names[d]));
        let val_file = splits_dir.join(format!("{}_val.txt", domain_names[d]));
        let official = if train_file.is_file() && val_file.is_file() {
            Some((read_split_file(&train_file)?, read_split_file(&val_file)?))
        } else {
            None
        };
        let files: Vec<(usize, &PathBuf, String)> = per_class
            .iter()
            .flat_map(|(class, files)| {
                let label = label_of[class.as_str()];
                files
                    .iter()
                    .map(move |f| (label, f, format!("{class}/{}", file_name(f))))
            })
            .collect();
        let drawn = assign_splits(files.len(), val_fraction, seed, &[tag::SPLIT, d as u64]);
        for (i, (label, path, rel)) in files.into_iter().enumerate() {
            let split = match &official {
                Some((train, val)) => {
                    if train.contains(&rel) {
                        Split::Train
                    } else if val.contains(&rel) {
                        Split::Val
                    } else {
                        log::warn!("{rel} listed in neither split file of `{}`; skipped", domain_names[d]);
                        continue;
                    }
                }
                None => drawn[i],
            };
            let mut image = ImageTensor::load(path)?;
            match shape {
                Some((h, w)) if (image.height(), image.width()) != (h, w) => {
                    if image_size.is_some() {
                        image = image.resize(h, w)?;
                    } else {
                        return Err(Error::Shape(format!(
                            "{}: {}x{} differs from {h}x{w}; set an image size to resize",
                            path.display(),
                            image.height(),
                            image.width()
                        )));
                    }
                }
                None => shape = Some((image.height(), image.width())),
                _ => {}
            }
            samples.push(DomainSample {
                id: 0,
                image,
                label,
                domain: d,
                split,
            });
        }
    }
    MultiDomainDataset::new(domain_names, class_names, samples)
}
