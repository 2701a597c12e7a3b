//! Experiment configuration: defaults, file merge, dotted-key overrides and
//! validation.
//!
//! Resolution order is defaults → config file → `key=value` overrides. Every
//! key of the merged document must exist in the defaults, and every value must
//! have the default's type (integers are accepted for float keys).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_folder_dataset, synth_domains, AugmentParams, CorruptionKind, DomainTransform, MultiDomainDataset,
    PartnerSampling, Severity, SynthConfig,
};
use crate::error::{Error, Result};
use crate::model::{Architecture, EncoderSpec};
use crate::objective::{AblationVariant, MatchingKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Highest pooled source-domain validation accuracy, earliest on ties.
    #[default]
    TrainDomainVal,
    LastEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    /// Decay period in epochs; 0 disables periodic decay.
    pub decay_every: usize,
    /// Additional decay points (epochs).
    pub decay_at: Vec<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_factor: 0.1,
            decay_every: 20,
            decay_at: Vec::new(),
        }
    }
}

impl OptimConfig {
    /// Step size in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut k = self.decay_at.iter().filter(|&&e| e <= epoch).count();
        if self.decay_every > 0 {
            k += epoch / self.decay_every;
        }
        self.lr * self.decay_factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub depth: usize,
    pub blocks: usize,
    pub width: usize,
    pub fusion_levels: [usize; 2],
    pub proj_dim: usize,
    /// Optional checkpoint to initialize from; empty for random init.
    pub init_checkpoint: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallConvnet,
            depth: 18,
            blocks: 4,
            width: 64,
            fusion_levels: [3, 4],
            proj_dim: 128,
            init_checkpoint: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub domains: Vec<DomainTransform>,
    pub classes: usize,
    pub per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            domains: d.domains,
            classes: d.classes,
            per_class: d.per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for the folder source (`root/<domain>/<class>/<image>`).
    pub root: String,
    /// Images are resized to this square side.
    pub image_size: usize,
    pub val_fraction: f64,
    /// Seed of dataset generation and split assignment, independent of the run seed.
    pub seed: u64,
    /// Prepare the next batch on a helper thread.
    pub prefetch: bool,
    pub synth: SynthSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: String::new(),
            image_size: 32,
            val_fraction: 0.1,
            seed: 0,
            prefetch: false,
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<Severity>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::SUITE.to_vec(),
            severities: Severity::ALL.to_vec(),
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Held-out domain name, or `none` to train on every domain.
    pub target_domain: String,
    pub variant: AblationVariant,
    pub matching_loss: MatchingKind,
    pub eta: f64,
    pub beta_max: f64,
    pub ema_momentum: f64,
    pub tau: f64,
    pub ramp: bool,
    pub ramp_epochs: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub selection: SelectionRule,
    pub partner_sampling: PartnerSampling,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub augment: AugmentParams,
    pub corruption: CorruptionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target_domain: "spectral_noise".into(),
            variant: AblationVariant::FullPhama,
            matching_loss: MatchingKind::Patchnce,
            eta: 1.0,
            beta_max: 0.1,
            ema_momentum: 0.9995,
            tau: 0.07,
            ramp: true,
            ramp_epochs: 5.0,
            epochs: 50,
            batch_size: 64,
            selection: SelectionRule::TrainDomainVal,
            partner_sampling: PartnerSampling::Uniform,
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            augment: AugmentParams::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

/// Help text per key: meaning and, where one exists, the source of the default.
const KEY_NOTES: &[(&str, &str)] = &[
    ("seed", "run seed; all training randomness derives from it"),
    ("target_domain", "held-out domain name, or `none` to train on all domains"),
    ("variant", "baseline_erm | A_apda_only | B_no_momentum | C_o2a_only | D_a2o_only | full_phama"),
    ("matching_loss", "patchnce | mse | smooth_l1"),
    ("eta", "amplitude mix scale, λ ~ U(0, η); published: 1.0 digits/PACS, 0.2 Office-Home"),
    ("beta_max", "contrast weight; published: 0.1 digits, 0.5 PACS/Office-Home"),
    ("ema_momentum", "momentum-network coefficient m; published: 0.9995"),
    ("tau", "contrast temperature; published: 0.07"),
    ("ramp", "exponential ramp-up of β; published: on for DG, off for robustness"),
    ("ramp_epochs", "ramp length in epochs; published: 5"),
    ("epochs", "training epochs"),
    ("batch_size", "batch size; published: 64 (DG), 128 (robustness)"),
    ("selection", "train_domain_val | last_epoch; published: last_epoch for robustness"),
    ("partner_sampling", "uniform | cross_domain amplitude donor choice"),
    ("optim.lr", "initial step size; published: 0.05 digits, 0.001 PACS, 0.1 robustness"),
    ("optim.momentum", "SGD momentum; published: 0.9"),
    ("optim.weight_decay", "published: 5e-4"),
    ("optim.decay_factor", "step decay factor; published: 0.1"),
    ("optim.decay_every", "decay period in epochs (0 = off); published: 20 digits, 60 robustness"),
    ("optim.decay_at", "extra decay epochs, e.g. [40] for 80% of 50 epochs"),
    ("model.architecture", "small_convnet | resnet_style"),
    ("model.depth", "resnet_style depth: 18 | 34"),
    ("model.blocks", "small_convnet conv blocks"),
    ("model.width", "conv width (small_convnet) or base width (resnet_style)"),
    ("model.fusion_levels", "fused pyramid levels (a, b), a < b; published: last two levels"),
    ("model.proj_dim", "patch embedding dimension (declared default)"),
    ("model.init_checkpoint", "optional checkpoint to start from"),
    ("data.source", "synthetic | folder"),
    ("data.root", "folder dataset root: <root>/<domain>/<class>/<image>"),
    ("data.image_size", "square input side; published: 32 digits, 224 PACS/Office-Home"),
    ("data.val_fraction", "per-domain validation fraction when no split files exist"),
    ("data.seed", "dataset generation and split seed"),
    ("data.prefetch", "prepare batches on a helper thread"),
    ("data.synth.domains", "identity | color_map | background_texture | gaussian_blur | spectral_noise | contrast_shift"),
    ("data.synth.classes", "synthetic class count (<= 10)"),
    ("data.synth.per_class", "synthetic images per domain and class"),
    ("augment.crop_scale", "random resized crop area range"),
    ("augment.crop_ratio", "random resized crop aspect range"),
    ("augment.flip_p", "horizontal flip probability"),
    ("augment.brightness", "color jitter brightness"),
    ("augment.contrast", "color jitter contrast"),
    ("augment.saturation", "color jitter saturation"),
    ("corruption.kinds", "gaussian_noise | shot_noise | defocus_blur | contrast | brightness"),
    ("corruption.severities", "severity levels 1-5"),
];

fn defaults_value() -> toml::Value {
    toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Every config key with its default value and note, in document order.
pub fn config_keys() -> Vec<(String, String, &'static str)> {
    let mut flat = Vec::new();
    flatten("", &defaults_value(), &mut flat);
    let note = |k: &str| KEY_NOTES.iter().find(|(n, _)| *n == k).map_or("", |(_, d)| *d);
    let mut keys: Vec<_> = flat.into_iter().map(|(k, v)| (k.clone(), v.to_string(), note(&k))).collect();
    let order = |k: &str| KEY_NOTES.iter().position(|(n, _)| *n == k).unwrap_or(usize::MAX);
    keys.sort_by_key(|(k, _, _)| order(k));
    keys
}

fn same_type(default: &toml::Value, new: &toml::Value) -> bool {
    use toml::Value::*;
    matches!(
        (default, new),
        (String(_), String(_))
            | (Integer(_), Integer(_))
            | (Float(_), Float(_))
            | (Float(_), Integer(_))
            | (Boolean(_), Boolean(_))
            | (Array(_), Array(_))
            | (Table(_), Table(_))
    )
}

fn coerce(default: &toml::Value, new: toml::Value) -> toml::Value {
    match (default, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

/// Merges `patch` into `base`, rejecting keys absent from `base` and type changes.
fn merge(base: &mut toml::Value, patch: toml::Value, prefix: &str) -> Result<()> {
    let (toml::Value::Table(bt), toml::Value::Table(pt)) = (base, patch) else {
        return Err(Error::config(prefix, "expected a table"));
    };
    for (k, v) in pt {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = bt.get_mut(&k) else {
            return Err(Error::config(key, "unknown key"));
        };
        if slot.is_table() {
            merge(slot, v, &key)?;
        } else if same_type(slot, &v) {
            *slot = coerce(slot, v);
        } else {
            return Err(Error::config(
                key,
                format!("expected {}, got {}", slot.type_str(), v.type_str()),
            ));
        }
    }
    Ok(())
}

/// Parses the right-hand side of `key=value`: a TOML literal, or a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// Turns `a.b.c=value` into a nested table patch.
pub fn override_patch(assignment: &str) -> Result<toml::Value> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut v = parse_literal(raw.trim());
    for part in key.rsplit('.') {
        let mut t = toml::map::Map::new();
        t.insert(part.to_string(), v);
        v = toml::Value::Table(t);
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Resolves defaults, an optional TOML document and overrides.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let patch = file_text
            .map(|text| toml::from_str::<toml::Value>(text).map_err(|e| Error::config("<file>", e.message())))
            .transpose()?;
        Self::resolve_patch(patch, overrides)
    }

    fn resolve_patch(patch: Option<toml::Value>, overrides: &[String]) -> Result<Self> {
        let mut doc = defaults_value();
        if let Some(patch) = patch {
            merge(&mut doc, patch, "")?;
        }
        for o in overrides {
            merge(&mut doc, override_patch(o)?, "")?;
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<value>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or a `config_resolved.json` written by an earlier run.
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::config("<file>", e.to_string()))?;
            let patch = toml::Value::try_from(json).map_err(|e| Error::config("<file>", e.to_string()))?;
            return Self::resolve_patch(Some(patch), overrides);
        }
        Self::resolve(Some(&text), overrides)
    }

    /// Returns a copy with extra overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        for o in overrides {
            merge(&mut doc, override_patch(o)?, "")?;
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<value>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("eta", format!("must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return Err(Error::config("beta_max", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config("ema_momentum", "must lie in [0, 1)"));
        }
        positive("tau", self.tau)?;
        positive("optim.lr", self.optim.lr)?;
        positive("optim.decay_factor", self.optim.decay_factor)?;
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        if !(self.optim.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        if self.ramp_epochs < 0.0 {
            return Err(Error::config("ramp_epochs", "must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.data.image_size < 2 {
            return Err(Error::config("data.image_size", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction", "must lie in [0, 1)"));
        }
        if self.data.source == DataSource::Folder && self.data.root.is_empty() {
            return Err(Error::config("data.root", "required for the folder source"));
        }
        let s = &self.data.synth;
        if self.data.source == DataSource::Synthetic {
            if s.domains.len() < 2 {
                return Err(Error::config("data.synth.domains", "need at least 2 domains"));
            }
            if !(2..=crate::data::MAX_CLASSES).contains(&s.classes) {
                return Err(Error::config("data.synth.classes", "must lie in 2..=10"));
            }
            if s.per_class == 0 {
                return Err(Error::config("data.synth.per_class", "must be positive"));
            }
        }
        let a = &self.augment;
        if !(a.crop_scale[0] > 0.0 && a.crop_scale[0] <= a.crop_scale[1] && a.crop_scale[1] <= 1.0) {
            return Err(Error::config("augment.crop_scale", "need 0 < lo <= hi <= 1"));
        }
        if !(a.crop_ratio[0] > 0.0 && a.crop_ratio[0] <= a.crop_ratio[1]) {
            return Err(Error::config("augment.crop_ratio", "need 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&a.flip_p) {
            return Err(Error::config("augment.flip_p", "must lie in [0, 1]"));
        }
        self.encoder_spec(2).validate()
    }

    pub fn encoder_spec(&self, num_classes: usize) -> EncoderSpec {
        EncoderSpec {
            architecture: self.model.architecture,
            depth: self.model.depth,
            blocks: self.model.blocks,
            width: self.model.width,
            num_classes,
            fusion_levels: self.model.fusion_levels,
            proj_dim: self.model.proj_dim,
            input_channels: 3,
            input_size: self.data.image_size,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            domains: self.data.synth.domains.clone(),
            classes: self.data.synth.classes,
            per_class: self.data.synth.per_class,
            image_size: self.data.image_size,
            val_fraction: self.data.val_fraction,
        }
    }

    pub fn load_dataset(&self) -> Result<MultiDomainDataset> {
        match self.data.source {
            DataSource::Synthetic => synth_domains(&self.synth_config(), self.data.seed),
            DataSource::Folder => load_folder_dataset(
                Path::new(&self.data.root),
                Some(self.data.image_size),
                self.data.val_fraction,
                self.data.seed,
            ),
        }
    }

    /// Target domain index, `None` for `none`.
    pub fn target_index(&self, ds: &MultiDomainDataset) -> Result<Option<usize>> {
        if self.target_domain == "none" {
            return Ok(None);
        }
        ds.domain_index(&self.target_domain).map(Some).ok_or_else(|| {
            Error::config(
                "target_domain",
                format!(
                    "unknown domain {:?}; available: {}",
                    self.target_domain,
                    ds.domain_names().join(", ")
                ),
            )
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical resolved JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec_pretty(&self.to_json()).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Writes `config_resolved.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.to_json())?;
        crate::spectral::write_file(&dir.join("config_resolved.json"), &bytes)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn file_and_overrides_merge() {
        let text = "eta = 0.5\n[optim]\nlr = 1\n";
        let cfg = ExperimentConfig::resolve(
            Some(text),
            &["eta=0.2".into(), "model.fusion_levels=[2, 3]".into(), "variant=C_o2a_only".into()],
        )
        .unwrap();
        assert_eq!(cfg.eta, 0.2);
        assert_eq!(cfg.optim.lr, 1.0);
        assert_eq!(cfg.model.fusion_levels, [2, 3]);
        assert_eq!(cfg.variant, AblationVariant::CO2aOnly);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_their_path() {
        let err = ExperimentConfig::resolve(None, &["optim.lrate=0.1".into()]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "optim.lrate"), "{err}");
        let err = ExperimentConfig::resolve(Some("[model]\nwidth = \"wide\"\n"), &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "model.width"), "{err}");
        let err = ExperimentConfig::resolve(None, &["eta=1.5".into()]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "eta"), "{err}");
        let err = ExperimentConfig::resolve(None, &["variant=E".into()]).unwrap_err();
        assert_eq!(err.category(), crate::error::Category::Config);
    }

    #[test]
    fn schedule_steps() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(0), 0.05);
        assert_eq!(o.lr_at(19), 0.05);
        assert!((o.lr_at(20) - 0.005).abs() < 1e-15);
        assert!((o.lr_at(45) - 0.0005).abs() < 1e-15);
        let pacs = OptimConfig {
            lr: 0.001,
            decay_every: 0,
            decay_at: vec![40],
            ..o
        };
        assert_eq!(pacs.lr_at(39), 0.001);
        assert!((pacs.lr_at(40) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn every_key_is_documented() {
        let keys = config_keys();
        for (k, _, note) in &keys {
            assert!(!note.is_empty(), "undocumented key {k}");
        }
        assert_eq!(keys.len(), KEY_NOTES.len());
    }

    #[test]
    fn resolved_json_round_trips() {
        let cfg = ExperimentConfig::resolve(None, &["seed=7".into()]).unwrap();
        let back: ExperimentConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
        let dir = tempfile::tempdir().unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        let reread = ExperimentConfig::from_file(&dir.path().join("config_resolved.json"), &[]).unwrap();
        assert_eq!(reread, cfg);
    }
}
