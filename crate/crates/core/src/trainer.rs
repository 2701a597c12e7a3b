//! Optimization loop: batches, augmentation, objective, SGD, momentum update,
//! logging, checkpoints and model selection.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{ExperimentConfig, SelectionRule};
use crate::data::{make_apda_batch, standard_augment, MultiDomainDataset, Split};
use crate::error::{Error, Result};
use crate::eval::Classifier;
use crate::model::{batch_from_images, load_checkpoint, save_checkpoint, Network};
use crate::nn::{Act, ParamSet};
use crate::objective::{beta_schedule, ema_update, phama_step, LossBreakdown, ObjectiveSettings};
use crate::rng::{stream, tag};

/// Stochastic gradient descent with classical momentum and L2 weight decay:
/// `g ← g + wd·θ`, `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: ParamSet<f32>,
}

impl Sgd {
    pub fn new(params: &ParamSet<f32>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64) {
        let lr = lr as f32;
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            for ((p, &g), v) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub cls_o: f64,
    pub cls_a: f64,
    pub contr: f64,
    pub beta: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            cls_o: b.cls_original,
            cls_a: b.cls_augmented,
            contr: b.contrast,
            beta: b.beta_effective,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub mean_total: f64,
    /// Pooled source-domain validation accuracy, percent.
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Index of the chosen epoch: argmax with the earliest epoch winning ties, or the last epoch.
pub fn select_model(val_history: &[f64], rule: SelectionRule) -> Result<usize> {
    if val_history.is_empty() {
        return Err(Error::Dataset("no recorded epochs to select from".into()));
    }
    Ok(match rule {
        SelectionRule::LastEpoch => val_history.len() - 1,
        SelectionRule::TrainDomainVal => {
            let mut best = 0;
            for (i, &v) in val_history.iter().enumerate() {
                if v > val_history[best] {
                    best = i;
                }
            }
            best
        }
    })
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for the log, resolved config and checkpoints.
    pub out_dir: Option<&'a Path>,
    pub save_checkpoints: bool,
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub last: ParamSet<f32>,
    pub selected: ParamSet<f32>,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Every sample id that entered a training batch.
    pub trained_ids: BTreeSet<usize>,
    pub steps: usize,
    pub target: Option<usize>,
}

impl TrainOutcome {
    pub fn selected_model(&self) -> Classifier {
        Classifier {
            net: self.net.clone(),
            params: self.selected.clone(),
        }
    }
}

struct Batch {
    ids: Vec<usize>,
    labels: Vec<usize>,
    x_o: Act<f32>,
    x_a: Option<Act<f32>>,
}

fn prepare_batch(cfg: &ExperimentConfig, ds: &MultiDomainDataset, ids: &[usize], step: usize) -> Result<Batch> {
    let samples: Vec<_> = ids.iter().map(|&i| &ds.samples()[i]).collect();
    let mut rng = stream(cfg.seed, &[tag::AUGMENT, step as u64]);
    let originals: Vec<_> = samples
        .iter()
        .map(|s| standard_augment(&s.image, &cfg.augment, &mut rng))
        .collect();
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    let x_a = if cfg.variant.uses_apda() {
        let domains: Vec<_> = samples.iter().map(|s| s.domain).collect();
        let mut rng = stream(cfg.seed, &[tag::APDA, step as u64]);
        let pairs = make_apda_batch(&originals, &labels, &domains, cfg.eta, cfg.partner_sampling, &mut rng)?;
        let aug: Vec<_> = pairs.iter().map(|p| &p.augmented).collect();
        Some(batch_from_images(&aug)?)
    } else {
        None
    };
    let refs: Vec<_> = originals.iter().collect();
    Ok(Batch {
        ids: ids.to_vec(),
        labels,
        x_o: batch_from_images(&refs)?,
        x_a,
    })
}

/// Consecutive batches of a shuffled id list; a trailing batch of one is dropped.
fn epoch_batches(cfg: &ExperimentConfig, train_ids: &[usize], epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train_ids.to_vec();
    order.shuffle(&mut stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

struct Log {
    file: Option<std::io::BufWriter<std::fs::File>>,
    path: PathBuf,
}

impl Log {
    fn open(dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(d) => {
                let path = d.join("train_log.jsonl");
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Self {
                    file: Some(std::io::BufWriter::new(f)),
                    path,
                })
            }
            None => Ok(Self {
                file: None,
                path: PathBuf::new(),
            }),
        }
    }

    fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

fn initial_params(cfg: &ExperimentConfig, ds: &MultiDomainDataset) -> Result<(Network, ParamSet<f32>)> {
    let spec = cfg.encoder_spec(ds.num_classes());
    let (net, mut params) = Network::new::<f32>(&spec, cfg.seed)?;
    if !cfg.model.init_checkpoint.is_empty() {
        let (_, loaded) = load_checkpoint(Path::new(&cfg.model.init_checkpoint))?;
        if !loaded.same_layout(&params) {
            return Err(Error::config(
                "model.init_checkpoint",
                "checkpoint tensors do not match the configured encoder",
            ));
        }
        params = loaded;
    }
    Ok((net, params))
}

fn metrics_json(history: &[EpochRecord], selected: Option<usize>) -> serde_json::Value {
    serde_json::json!({ "history": history, "selected_epoch": selected })
}

/// Trains one model on the source domains of `ds` (every domain but the
/// configured target).
pub fn train(cfg: &ExperimentConfig, ds: &MultiDomainDataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let target = cfg.target_index(ds)?;
    let sources: Vec<usize> = (0..ds.num_domains()).filter(|&d| Some(d) != target).collect();
    let train_ids = ds.split_ids(&sources, Split::Train);
    if train_ids.len() < 2 {
        return Err(Error::Dataset("fewer than 2 training samples in the source domains".into()));
    }
    let val_ids = ds.split_ids(&sources, Split::Val);
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.write_resolved(dir)?;
    }
    let mut log = Log::open(opts.out_dir)?;

    let (net, mut online) = initial_params(cfg, ds)?;
    let mut momentum = cfg.variant.uses_momentum().then(|| online.clone());
    let mut sgd = Sgd::new(&online, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let mut trained_ids = BTreeSet::new();
    let mut step = 0usize;
    let val_samples: Vec<_> = val_ids.iter().map(|&i| &ds.samples()[i]).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.optim.lr_at(epoch);
        let beta = beta_schedule(epoch as f64, cfg.ramp_epochs, cfg.beta_max, cfg.ramp);
        let settings = ObjectiveSettings {
            variant: cfg.variant,
            kind: cfg.matching_loss,
            tau: cfg.tau,
            beta,
        };
        let batches = epoch_batches(cfg, &train_ids, epoch);
        let first_step = step;
        let mut total_sum = 0.0;

        let mut run_batch = |batch: Batch, step: usize| -> Result<()> {
            for &id in &batch.ids {
                if Some(ds.samples()[id].domain) == target {
                    return Err(Error::Dataset(format!("target-domain sample {id} reached a training batch")));
                }
                trained_ids.insert(id);
            }
            let res = phama_step(
                &net,
                &online,
                momentum.as_ref(),
                &batch.x_o,
                batch.x_a.as_ref(),
                &batch.labels,
                &settings,
                false,
            )
            .map_err(|e| match e {
                // activations overflowed to inf/NaN before the loss could be formed
                Error::DegenerateEmbedding { norm, .. } if !norm.is_finite() => Error::Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            log.write(&StepRecord::new(step, epoch, &res.breakdown))?;
            if !res.breakdown.total.is_finite() || !res.grads.all_finite() {
                log.flush()?;
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: res.breakdown.total,
                });
            }
            total_sum += res.breakdown.total;
            sgd.step(&mut online, &res.grads, lr);
            if !online.all_finite() {
                log.flush()?;
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: res.breakdown.total,
                });
            }
            if let Some(m) = momentum.as_mut() {
                ema_update(m, &online, cfg.ema_momentum)?;
            }
            Ok(())
        };

        if cfg.data.prefetch {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = std::sync::mpsc::sync_channel::<Result<Batch>>(2);
                let batches = &batches;
                scope.spawn(move || {
                    for (k, ids) in batches.iter().enumerate() {
                        if tx.send(prepare_batch(cfg, ds, ids, first_step + k)).is_err() {
                            break;
                        }
                    }
                });
                for k in 0..batches.len() {
                    let batch = rx.recv().map_err(|_| Error::Dataset("batch loader stopped".into()))??;
                    run_batch(batch, first_step + k)?;
                }
                Ok(())
            })?;
        } else {
            for (k, ids) in batches.iter().enumerate() {
                run_batch(prepare_batch(cfg, ds, ids, first_step + k)?, first_step + k)?;
            }
        }
        step = first_step + batches.len();

        let val_accuracy = if val_samples.is_empty() {
            None
        } else {
            let model = Classifier {
                net: net.clone(),
                params: online.clone(),
            };
            Some(model.accuracy(&val_samples)?)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            beta,
            mean_total: total_sum / batches.len().max(1) as f64,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.4} beta {beta:.4} loss {:.4} val {:?}",
            rec.mean_total,
            rec.val_accuracy
        );
        if let Some(cb) = opts.on_epoch {
            cb(&rec);
        }
        if let Some(v) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, online.clone()));
                if let (Some(dir), true) = (opts.out_dir, opts.save_checkpoints) {
                    history.push(rec.clone());
                    save_checkpoint(&dir.join("best.ckpt"), net.spec(), &online, epoch, metrics_json(&history, Some(epoch)))?;
                    history.pop();
                }
            }
        }
        history.push(rec);
    }
    log.flush()?;

    let vals: Vec<f64> = history.iter().map(|h| h.val_accuracy.unwrap_or(0.0)).collect();
    let rule = if history.iter().all(|h| h.val_accuracy.is_some()) {
        cfg.selection
    } else {
        SelectionRule::LastEpoch
    };
    let selected_epoch = select_model(&vals, rule)?;
    let selected = match (rule, best) {
        (SelectionRule::TrainDomainVal, Some((_, p))) => p,
        _ => online.clone(),
    };
    if let (Some(dir), true) = (opts.out_dir, opts.save_checkpoints) {
        let metrics = metrics_json(&history, Some(selected_epoch));
        save_checkpoint(&dir.join("last.ckpt"), net.spec(), &online, cfg.epochs - 1, metrics.clone())?;
        if rule == SelectionRule::LastEpoch {
            save_checkpoint(&dir.join("best.ckpt"), net.spec(), &online, selected_epoch, metrics)?;
        }
    }
    Ok(TrainOutcome {
        net,
        last: online,
        selected,
        selected_epoch,
        history,
        trained_ids,
        steps: step,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig::resolve(
            None,
            &[
                "epochs=2".into(),
                "batch_size=16".into(),
                "data.image_size=16".into(),
                "data.synth.per_class=6".into(),
                "data.synth.classes=3".into(),
                "data.val_fraction=0.2".into(),
                "model.width=4".into(),
                "model.proj_dim=8".into(),
                "target_domain=color_map".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_model(&[70.0, 80.0, 80.0], SelectionRule::TrainDomainVal).unwrap(), 1);
        assert_eq!(select_model(&[70.0, 80.0, 80.0], SelectionRule::LastEpoch).unwrap(), 2);
        assert_eq!(select_model(&[1.0, 2.0, 3.0], SelectionRule::TrainDomainVal).unwrap(), 2);
        assert!(select_model(&[], SelectionRule::LastEpoch).is_err());
    }

    #[test]
    fn sgd_matches_reference_update() {
        let mut p = ParamSet::<f32>::new();
        p.push("w", crate::nn::Tensor { shape: vec![1], data: vec![1.0] });
        let mut g = p.zeros_like();
        g.tensors_mut()[0].data[0] = 0.5;
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        opt.step(&mut p, &g, 0.1);
        // g' = 0.5 + 0.1 = 0.6; v = 0.6; w = 1 - 0.06
        assert!((p.flat()[0] - 0.94).abs() < 1e-7);
        opt.step(&mut p, &g, 0.1);
        // g' = 0.5 + 0.094 = 0.594; v = 0.54 + 0.594 = 1.134
        assert!((p.flat()[0] - (0.94 - 0.1134)).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic_and_isolates_target() {
        let cfg = tiny_cfg();
        let ds = cfg.load_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = train(
            &cfg,
            &ds,
            &TrainOptions {
                out_dir: Some(dir.path()),
                save_checkpoints: true,
                on_epoch: None,
            },
        )
        .unwrap();
        let b = train(&cfg, &ds, &TrainOptions::default()).unwrap();
        assert_eq!(a.last, b.last);
        let target = ds.domain_index("color_map").unwrap();
        assert!(a.trained_ids.iter().all(|&i| ds.samples()[i].domain != target));
        assert!(!a.trained_ids.is_empty());
        for f in ["best.ckpt", "last.ckpt", "train_log.jsonl", "config_resolved.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for k in ["step", "epoch", "cls_o", "cls_a", "contr", "beta", "total"] {
            assert!(first.get(k).is_some(), "{k}");
        }
        assert_eq!(log.lines().count(), a.steps);
        let prefetched = cfg.with_overrides(&["data.prefetch=true".into()]).unwrap();
        assert_eq!(train(&prefetched, &ds, &TrainOptions::default()).unwrap().last, a.last);
    }

    #[test]
    fn momentum_starts_as_copy_and_baseline_has_no_contrast() {
        let cfg = tiny_cfg()
            .with_overrides(&["variant=baseline_erm".into(), "epochs=1".into()])
            .unwrap();
        let ds = cfg.load_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        train(
            &cfg,
            &ds,
            &TrainOptions {
                out_dir: Some(dir.path()),
                ..Default::default()
            },
        )
        .unwrap();
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["contr"], 0.0);
            assert_eq!(v["cls_o"], v["cls_a"]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_cfg()
            .with_overrides(&["optim.lr=1e30".into(), "epochs=3".into()])
            .unwrap();
        let ds = cfg.load_dataset().unwrap();
        let err = train(&cfg, &ds, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
