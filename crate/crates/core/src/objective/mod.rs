//! Classification and cross-contrastive losses, the contrast-weight ramp and
//! the momentum-network update.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardMode, Network, PatchEmbeddings};
use crate::nn::{Act, ParamSet, Scalar};

/// Mean negative log-likelihood of the true class with its gradient (`N×C`).
pub fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> Result<(f64, Vec<T>)> {
    let n = labels.len();
    if n == 0 || logits.len() != n * classes {
        return Err(Error::Shape(format!(
            "logits of length {} do not match {n} labels × {classes} classes",
            logits.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (row, &y)) in logits.chunks(classes).zip(labels).enumerate() {
        if y >= classes {
            return Err(Error::OutOfRange(format!("label {y} with {classes} classes")));
        }
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y].f64();
        for (c, v) in row.iter().enumerate() {
            let p = (v.f64() - lse).exp();
            grad[i * classes + c] = T::of((p - if c == y { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

fn check_pair<T: Scalar>(anchor: &PatchEmbeddings<T>, target: &PatchEmbeddings<T>) -> Result<()> {
    if (anchor.n, anchor.p, anchor.d) != (target.n, target.p, target.d) {
        return Err(Error::Shape(format!(
            "embedding sets differ: {}×{}×{} vs {}×{}×{}",
            anchor.n, anchor.p, anchor.d, target.n, target.p, target.d
        )));
    }
    Ok(())
}

/// Loss value and gradients with respect to anchor and target rows.
#[derive(Debug, Clone)]
pub struct MatchGrad<T> {
    pub loss: f64,
    pub d_anchor: Vec<T>,
    pub d_target: Vec<T>,
}

/// Patch contrast: for each image pair, `Σ_i −log softmax_j(a_i·t_j/τ)[i]`,
/// i.e. the positive once plus the `P−1` other locations as negatives,
/// averaged over pairs in the batch.
pub fn patchnce<T: Scalar>(anchor: &PatchEmbeddings<T>, target: &PatchEmbeddings<T>, tau: f64) -> Result<MatchGrad<T>> {
    check_pair(anchor, target)?;
    let (n, p, d) = (anchor.n, anchor.p, anchor.d);
    if p < 2 {
        return Err(Error::Shape(format!("patch contrast needs at least 2 patches, got {p}")));
    }
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!("temperature must be positive, got {tau}")));
    }
    let mut loss = 0.0;
    let mut da = vec![T::zero(); anchor.data.len()];
    let mut dt = vec![T::zero(); target.data.len()];
    let scale = 1.0 / (n as f64 * tau);
    let mut logits = vec![0.0; p];
    for s in 0..n {
        let a = anchor.sample(s);
        let t = target.sample(s);
        let base = s * p * d;
        for i in 0..p {
            let ai = &a[i * d..(i + 1) * d];
            for (j, l) in logits.iter_mut().enumerate() {
                let tj = &t[j * d..(j + 1) * d];
                *l = ai.iter().zip(tj).map(|(x, y)| x.f64() * y.f64()).sum::<f64>() / tau;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - logits[i];
            for j in 0..p {
                let w = (logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 };
                let coef = w * scale;
                for k in 0..d {
                    da[base + i * d + k] += T::of(coef * t[j * d + k].f64());
                    dt[base + j * d + k] += T::of(coef * a[i * d + k].f64());
                }
            }
        }
    }
    Ok(MatchGrad {
        loss: loss / n as f64,
        d_anchor: da,
        d_target: dt,
    })
}

/// Mean over rows of `|a_i − t_i|²`.
pub fn mse<T: Scalar>(anchor: &PatchEmbeddings<T>, target: &PatchEmbeddings<T>) -> Result<MatchGrad<T>> {
    check_pair(anchor, target)?;
    let rows = (anchor.n * anchor.p) as f64;
    let mut loss = 0.0;
    let mut da = Vec::with_capacity(anchor.data.len());
    for (a, t) in anchor.data.iter().zip(&target.data) {
        let diff = a.f64() - t.f64();
        loss += diff * diff;
        da.push(T::of(2.0 * diff / rows));
    }
    let dt = da.iter().map(|&g| -g).collect();
    Ok(MatchGrad {
        loss: loss / rows,
        d_anchor: da,
        d_target: dt,
    })
}

/// Elementwise Huber loss with transition 1, mean over elements.
pub fn smooth_l1<T: Scalar>(anchor: &PatchEmbeddings<T>, target: &PatchEmbeddings<T>) -> Result<MatchGrad<T>> {
    check_pair(anchor, target)?;
    let count = anchor.data.len() as f64;
    let mut loss = 0.0;
    let mut da = Vec::with_capacity(anchor.data.len());
    for (a, t) in anchor.data.iter().zip(&target.data) {
        let x = a.f64() - t.f64();
        if x.abs() < 1.0 {
            loss += 0.5 * x * x;
            da.push(T::of(x / count));
        } else {
            loss += x.abs() - 0.5;
            da.push(T::of(x.signum() / count));
        }
    }
    let dt = da.iter().map(|&g| -g).collect();
    Ok(MatchGrad {
        loss: loss / count,
        d_anchor: da,
        d_target: dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchingKind {
    #[default]
    Patchnce,
    Mse,
    SmoothL1,
}

impl MatchingKind {
    pub const ALL: [MatchingKind; 3] = [MatchingKind::SmoothL1, MatchingKind::Mse, MatchingKind::Patchnce];

    pub fn name(self) -> &'static str {
        match self {
            MatchingKind::Patchnce => "patchnce",
            MatchingKind::Mse => "mse",
            MatchingKind::SmoothL1 => "smooth_l1",
        }
    }
}

impl FromStr for MatchingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Unknown {
            kind: "matching loss",
            name: s.to_string(),
        })
    }
}

pub fn matching_loss<T: Scalar>(
    anchor: &PatchEmbeddings<T>,
    target: &PatchEmbeddings<T>,
    kind: MatchingKind,
    tau: f64,
) -> Result<MatchGrad<T>> {
    match kind {
        MatchingKind::Patchnce => patchnce(anchor, target, tau),
        MatchingKind::Mse => mse(anchor, target),
        MatchingKind::SmoothL1 => smooth_l1(anchor, target),
    }
}

/// Which contrast directions are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Directions {
    pub o2a: bool,
    pub a2o: bool,
}

impl Directions {
    pub const BOTH: Self = Self { o2a: true, a2o: true };
}

/// Cross contrast between online anchors and target embeddings.
#[derive(Debug, Clone)]
pub struct CrossContrast<T> {
    pub loss: f64,
    pub d_online_o: Vec<T>,
    pub d_online_a: Vec<T>,
    /// Gradients the target rows would receive without the stop-gradient.
    pub d_target_o: Vec<T>,
    pub d_target_a: Vec<T>,
}

/// `matching(p_o → p_a') + matching(p_a → p_o')`, restricted to `dirs`.
pub fn cross_contrast<T: Scalar>(
    p_o: &PatchEmbeddings<T>,
    p_a: &PatchEmbeddings<T>,
    t_o: &PatchEmbeddings<T>,
    t_a: &PatchEmbeddings<T>,
    kind: MatchingKind,
    tau: f64,
    dirs: Directions,
) -> Result<CrossContrast<T>> {
    let zeros = || vec![T::zero(); p_o.data.len()];
    let mut out = CrossContrast {
        loss: 0.0,
        d_online_o: zeros(),
        d_online_a: zeros(),
        d_target_o: zeros(),
        d_target_a: zeros(),
    };
    if dirs.o2a {
        let g = matching_loss(p_o, t_a, kind, tau)?;
        out.loss += g.loss;
        out.d_online_o = g.d_anchor;
        out.d_target_a = g.d_target;
    }
    if dirs.a2o {
        let g = matching_loss(p_a, t_o, kind, tau)?;
        out.loss += g.loss;
        out.d_online_a = g.d_anchor;
        out.d_target_o = g.d_target;
    }
    Ok(out)
}

/// Contrast weight at `epoch`: `β_max·exp(−5(1−t)²)` with `t = min(epoch/ramp_epochs, 1)`,
/// or `β_max` when the ramp is disabled.
pub fn beta_schedule(epoch: f64, ramp_epochs: f64, beta_max: f64, ramp: bool) -> f64 {
    if !ramp || ramp_epochs <= 0.0 {
        return beta_max;
    }
    let t = (epoch.max(0.0) / ramp_epochs).min(1.0);
    if t >= 1.0 {
        return beta_max;
    }
    beta_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// `θ_m ← m·θ_m + (1−m)·θ_n`, elementwise.
pub fn ema_update<T: Scalar>(momentum: &mut ParamSet<T>, online: &ParamSet<T>, m: f64) -> Result<()> {
    if !momentum.same_layout(online) {
        return Err(Error::Shape("momentum and online parameters differ in layout".into()));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::OutOfRange(format!("momentum coefficient {m} outside [0, 1)")));
    }
    let (mm, mn) = (T::of(m), T::of(1.0 - m));
    for (tm, tn) in momentum.tensors_mut().iter_mut().zip(online.tensors()) {
        for (a, &b) in tm.data.iter_mut().zip(&tn.data) {
            *a = mm * *a + mn * b;
        }
    }
    Ok(())
}

/// Per-step loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls_original: f64,
    pub cls_augmented: f64,
    pub contrast: f64,
    pub beta_effective: f64,
    pub total: f64,
}

/// `½(cls_o + cls_a) + β·contrast`.
pub fn total_loss(cls_original: f64, cls_augmented: f64, contrast: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        cls_original,
        cls_augmented,
        contrast,
        beta_effective: beta,
        total: 0.5 * (cls_original + cls_augmented) + beta * contrast,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    BaselineErm,
    #[serde(rename = "A_apda_only")]
    AApdaOnly,
    #[serde(rename = "B_no_momentum")]
    BNoMomentum,
    #[serde(rename = "C_o2a_only")]
    CO2aOnly,
    #[serde(rename = "D_a2o_only")]
    DA2oOnly,
    #[default]
    FullPhama,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::BaselineErm,
        AblationVariant::AApdaOnly,
        AblationVariant::BNoMomentum,
        AblationVariant::CO2aOnly,
        AblationVariant::DA2oOnly,
        AblationVariant::FullPhama,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::BaselineErm => "baseline_erm",
            AblationVariant::AApdaOnly => "A_apda_only",
            AblationVariant::BNoMomentum => "B_no_momentum",
            AblationVariant::CO2aOnly => "C_o2a_only",
            AblationVariant::DA2oOnly => "D_a2o_only",
            AblationVariant::FullPhama => "full_phama",
        }
    }

    pub fn uses_apda(self) -> bool {
        self != AblationVariant::BaselineErm
    }

    pub fn uses_momentum(self) -> bool {
        matches!(
            self,
            AblationVariant::CO2aOnly | AblationVariant::DA2oOnly | AblationVariant::FullPhama
        )
    }

    pub fn directions(self) -> Option<Directions> {
        match self {
            AblationVariant::BaselineErm | AblationVariant::AApdaOnly => None,
            AblationVariant::CO2aOnly => Some(Directions { o2a: true, a2o: false }),
            AblationVariant::DA2oOnly => Some(Directions { o2a: false, a2o: true }),
            AblationVariant::BNoMomentum | AblationVariant::FullPhama => Some(Directions::BOTH),
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Unknown {
            kind: "variant",
            name: s.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub variant: AblationVariant,
    pub kind: MatchingKind,
    pub tau: f64,
    /// Effective contrast weight for this step.
    pub beta: f64,
}

/// Loss terms and gradients of one training step.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub breakdown: LossBreakdown,
    pub grads: ParamSet<T>,
    /// Gradients reaching the momentum parameters; populated on request.
    pub momentum_grads: Option<ParamSet<T>>,
    /// Logits of the original views (`B×classes`).
    pub logits: Vec<T>,
}

/// Evaluates the full objective on a batch of original/augmented views and
/// backpropagates it into the online parameters.
///
/// Targets come from `momentum` when the variant uses a momentum network and
/// from the online network otherwise (then gradients reach both sides).
/// With `trace_momentum` the momentum network is also run in train mode and
/// back-propagated with the detached target gradient.
#[allow(clippy::too_many_arguments)]
pub fn phama_step<T: Scalar>(
    net: &Network,
    online: &ParamSet<T>,
    momentum: Option<&ParamSet<T>>,
    x_o: &Act<T>,
    x_a: Option<&Act<T>>,
    labels: &[usize],
    cfg: &ObjectiveSettings,
    trace_momentum: bool,
) -> Result<StepResult<T>> {
    let classes = net.spec().num_classes;
    let b = x_o.n;
    let mut grads = online.zeros_like();
    if !cfg.variant.uses_apda() {
        let fwd = net.forward(online, x_o, ForwardMode { train: true, embed: false })?;
        let (cls, dl) = cross_entropy(&fwd.logits, labels, classes)?;
        net.backward(online, &mut grads, &fwd, Some(&dl), None);
        return Ok(StepResult {
            breakdown: total_loss(cls, cls, 0.0, 0.0),
            grads,
            momentum_grads: None,
            logits: fwd.logits,
        });
    }
    let x_a = x_a.ok_or_else(|| Error::Shape("augmented views are required".into()))?;
    let both = x_o.concat_batch(x_a);
    let dirs = cfg.variant.directions();
    let fwd = net.forward(
        online,
        &both,
        ForwardMode {
            train: true,
            embed: dirs.is_some(),
        },
    )?;
    let (lo, la) = fwd.logits.split_at(b * classes);
    let (cls_o, mut dlo) = cross_entropy(lo, labels, classes)?;
    let (cls_a, dla) = cross_entropy(la, labels, classes)?;
    dlo.extend(dla);
    dlo.iter_mut().for_each(|g| *g *= T::of(0.5));

    let Some(dirs) = dirs else {
        net.backward(online, &mut grads, &fwd, Some(&dlo), None);
        return Ok(StepResult {
            breakdown: total_loss(cls_o, cls_a, 0.0, 0.0),
            grads,
            momentum_grads: None,
            logits: lo.to_vec(),
        });
    };

    let emb = fwd.embeddings.as_ref().expect("embeddings requested");
    let (p_o, p_a) = (emb.slice(0, b), emb.slice(b, b));
    let mut mom_fwd = None;
    let (t_o, t_a) = if cfg.variant.uses_momentum() {
        let mparams = momentum.ok_or_else(|| Error::Shape("momentum parameters are required".into()))?;
        let mode = ForwardMode {
            train: trace_momentum,
            embed: true,
        };
        let mf = net.forward(mparams, &both, mode)?;
        let me = mf.embeddings.as_ref().expect("embeddings requested");
        let pair = (me.slice(0, b), me.slice(b, b));
        mom_fwd = Some(mf);
        pair
    } else {
        (p_o.clone(), p_a.clone())
    };
    let cc = cross_contrast(&p_o, &p_a, &t_o, &t_a, cfg.kind, cfg.tau, dirs)?;
    let beta = T::of(cfg.beta);
    let mut demb: Vec<T> = cc.d_online_o.iter().chain(&cc.d_online_a).map(|&g| g * beta).collect();
    if !cfg.variant.uses_momentum() {
        for (g, &t) in demb.iter_mut().zip(cc.d_target_o.iter().chain(&cc.d_target_a)) {
            *g += t * beta;
        }
    }
    net.backward(online, &mut grads, &fwd, Some(&dlo), Some(&demb));

    let momentum_grads = match (mom_fwd, momentum) {
        (Some(mf), Some(mparams)) if trace_momentum => {
            let mut mg = mparams.zeros_like();
            // targets are detached: the loss sends them no gradient
            let detached = vec![T::zero(); demb.len()];
            net.backward(mparams, &mut mg, &mf, None, Some(&detached));
            Some(mg)
        }
        _ => None,
    };
    Ok(StepResult {
        breakdown: total_loss(cls_o, cls_a, cc.loss, cfg.beta),
        grads,
        momentum_grads,
        logits: lo.to_vec(),
    })
}

#[cfg(test)]
mod tests;
