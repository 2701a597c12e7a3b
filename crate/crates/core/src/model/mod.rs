//! Hierarchical encoders, level fusion and the patch projection head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, global_avg_pool, global_avg_pool_backward, l2_normalize_rows,
    l2_normalize_rows_backward, linear, linear_backward, relu, relu_backward, Act, Conv2d, ConvCache, MaxPool,
    MaxPoolCache, ParamId, ParamSet, Scalar, Tensor,
};
use crate::raster::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `blocks` × [3×3 conv, rectifier, 2×2 max-pool].
    SmallConvnet,
    /// Residual network without normalization layers (depth 18 or 34).
    ResnetStyle,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::SmallConvnet => "small_convnet",
            Architecture::ResnetStyle => "resnet_style",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_convnet" => Ok(Architecture::SmallConvnet),
            "resnet_style" => Ok(Architecture::ResnetStyle),
            _ => Err(Error::Unknown {
                kind: "architecture",
                name: s.to_string(),
            }),
        }
    }
}

/// Everything needed to rebuild an encoder's layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    /// Residual depth; ignored by `small_convnet`.
    pub depth: usize,
    /// Number of conv blocks of `small_convnet`; ignored by `resnet_style`.
    pub blocks: usize,
    /// Conv width (`small_convnet`) or base width (`resnet_style`).
    pub width: usize,
    pub num_classes: usize,
    pub fusion_levels: [usize; 2],
    pub proj_dim: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl EncoderSpec {
    pub fn small_convnet(num_classes: usize, input_size: usize) -> Self {
        Self {
            architecture: Architecture::SmallConvnet,
            depth: 18,
            blocks: 4,
            width: 64,
            num_classes,
            fusion_levels: [3, 4],
            proj_dim: 128,
            input_channels: 3,
            input_size,
        }
    }

    pub fn resnet_style(depth: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::ResnetStyle,
            depth,
            blocks: 4,
            width: 64,
            num_classes,
            fusion_levels: [3, 4],
            proj_dim: 128,
            input_channels: 3,
            input_size: 224,
        }
    }

    pub fn num_levels(&self) -> usize {
        match self.architecture {
            Architecture::SmallConvnet => self.blocks,
            Architecture::ResnetStyle => 4,
        }
    }

    /// `(channels, side)` of level `t` (1-based).
    pub fn level_shape(&self, t: usize) -> (usize, usize) {
        match self.architecture {
            Architecture::SmallConvnet => (self.width, self.input_size >> t),
            Architecture::ResnetStyle => {
                let stem = (self.input_size + 1) / 2;
                let mut side = (stem + 1) / 2;
                for _ in 1..t {
                    side = (side + 1) / 2;
                }
                (self.width << (t - 1), side)
            }
        }
    }

    /// Patches per image.
    pub fn patch_count(&self) -> usize {
        let side = self.level_shape(self.fusion_levels[0]).1;
        side * side
    }

    pub fn fused_channels(&self) -> usize {
        self.level_shape(self.fusion_levels[0]).0 + self.level_shape(self.fusion_levels[1]).0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("model.{key}"), msg));
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes".into());
        }
        if self.width == 0 || self.proj_dim == 0 || self.input_channels == 0 {
            return bad("width", "width, proj_dim and input channels must be positive".into());
        }
        match self.architecture {
            Architecture::SmallConvnet => {
                if self.blocks == 0 || self.input_size >> self.blocks == 0 {
                    return bad(
                        "blocks",
                        format!("{} blocks need an input of at least {} pixels", self.blocks, 1usize << self.blocks),
                    );
                }
            }
            Architecture::ResnetStyle => {
                if !matches!(self.depth, 18 | 34) {
                    return bad("depth", format!("unsupported depth {} (18 or 34)", self.depth));
                }
                if self.input_size < 8 {
                    return bad("input_size", "residual encoder needs at least 8 pixels".into());
                }
            }
        }
        let [a, b] = self.fusion_levels;
        if !(1 <= a && a < b && b <= self.num_levels()) {
            return bad(
                "fusion_levels",
                format!("need 1 <= a < b <= {}, got ({a}, {b})", self.num_levels()),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
enum Stage {
    /// conv, rectifier, max-pool
    Plain { conv: Conv2d, pool: MaxPool },
    Residual(Vec<BasicBlock>),
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    c1: ConvCache<T>,
    r1: Act<T>,
    c2: ConvCache<T>,
    sc: Option<ConvCache<T>>,
    out: Act<T>,
}

#[derive(Debug, Clone)]
enum StageCache<T> {
    Plain {
        conv: ConvCache<T>,
        act: Act<T>,
        pool: MaxPoolCache,
    },
    Residual(Vec<BlockCache<T>>),
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    level_b: (usize, usize, usize, usize),
    split: usize,
    c1: ConvCache<T>,
    hidden: Act<T>,
    c2: ConvCache<T>,
    norms: Vec<T>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    stages: Vec<StageCache<T>>,
    head: Option<HeadCache<T>>,
}

/// Unit-norm patch embeddings, sample-major: row `s·P + i` is patch `i` of sample `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings<T> {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PatchEmbeddings<T> {
    /// The `P×D` block of sample `s`.
    pub fn sample(&self, s: usize) -> &[T] {
        &self.data[s * self.p * self.d..(s + 1) * self.p * self.d]
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            n: len,
            p: self.p,
            d: self.d,
            data: self.data[start * self.p * self.d..(start + len) * self.p * self.d].to_vec(),
        }
    }
}

/// Result of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Level `t` at index `t − 1`.
    pub levels: Vec<Act<T>>,
    /// Globally pooled last level, `N×C`.
    pub pooled: Vec<T>,
    /// `N×classes`.
    pub logits: Vec<T>,
    pub embeddings: Option<PatchEmbeddings<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn batch(&self) -> usize {
        self.levels[0].n
    }

    /// Level `t` (1-based).
    pub fn level(&self, t: usize) -> Result<&Act<T>> {
        self.levels
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::Shape(format!("feature level {t} does not exist")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Keep intermediate buffers for a backward pass.
    pub train: bool,
    /// Compute patch embeddings.
    pub embed: bool,
}

impl ForwardMode {
    pub const EVAL: Self = Self {
        train: false,
        embed: false,
    };
    pub const TRAIN: Self = Self {
        train: true,
        embed: true,
    };
    pub const EMBED: Self = Self {
        train: false,
        embed: true,
    };
}

/// Layer layout of an encoder. Parameters live in a separate [`ParamSet`] so
/// the online and momentum networks share one layout.
#[derive(Debug, Clone)]
pub struct Network {
    spec: EncoderSpec,
    stages: Vec<Stage>,
    /// Index of the stage producing level 1.
    first_level: usize,
    fc_weight: ParamId,
    fc_bias: ParamId,
    proj1: Conv2d,
    proj2: Conv2d,
}

/// Gain of the last conv in each residual branch, keeping the unnormalized
/// residual stack from growing with depth.
const RESIDUAL_BRANCH_GAIN: f64 = 0.25;

impl Network {
    /// Builds the layout and freshly initialized parameters.
    pub fn new<T: Scalar>(spec: &EncoderSpec, seed: u64) -> Result<(Self, ParamSet<T>)> {
        spec.validate()?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::INIT]);
        let mut params = ParamSet::new();
        let mut stages = Vec::new();
        let first_level;
        match spec.architecture {
            Architecture::SmallConvnet => {
                let mut cin = spec.input_channels;
                for b in 0..spec.blocks {
                    let conv = Conv2d::new(&mut params, &format!("block{}", b + 1), cin, spec.width, 3, 1, 1, 1.0, &mut rng);
                    stages.push(Stage::Plain {
                        conv,
                        pool: MaxPool { k: 2, stride: 2, pad: 0 },
                    });
                    cin = spec.width;
                }
                first_level = 0;
            }
            Architecture::ResnetStyle => {
                let conv = Conv2d::new(&mut params, "stem", spec.input_channels, spec.width, 7, 2, 3, 1.0, &mut rng);
                stages.push(Stage::Plain {
                    conv,
                    pool: MaxPool { k: 3, stride: 2, pad: 1 },
                });
                let counts: [usize; 4] = if spec.depth == 34 { [3, 4, 6, 3] } else { [2, 2, 2, 2] };
                let mut cin = spec.width;
                for (li, &count) in counts.iter().enumerate() {
                    let cout = spec.width << li;
                    let mut blocks = Vec::new();
                    for bi in 0..count {
                        let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                        let name = format!("layer{}.{}", li + 1, bi);
                        let conv1 = Conv2d::new(&mut params, &format!("{name}.conv1"), cin, cout, 3, stride, 1, 1.0, &mut rng);
                        let conv2 = Conv2d::new(
                            &mut params,
                            &format!("{name}.conv2"),
                            cout,
                            cout,
                            3,
                            1,
                            1,
                            RESIDUAL_BRANCH_GAIN,
                            &mut rng,
                        );
                        let shortcut = (stride != 1 || cin != cout).then(|| {
                            Conv2d::new(&mut params, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, 1.0, &mut rng)
                        });
                        blocks.push(BasicBlock { conv1, conv2, shortcut });
                        cin = cout;
                    }
                    stages.push(Stage::Residual(blocks));
                }
                first_level = 1;
            }
        }
        let last_c = spec.level_shape(spec.num_levels()).0;
        let fc_weight = params.push(
            "classifier.weight",
            crate::nn::normal_tensor(&[spec.num_classes, last_c], (1.0 / last_c as f64).sqrt(), &mut rng),
        );
        let fc_bias = params.push("classifier.bias", Tensor::zeros(&[spec.num_classes]));
        let fused = spec.fused_channels();
        let proj1 = Conv2d::new(&mut params, "head.fc1", fused, fused, 1, 1, 0, 1.0, &mut rng);
        let proj2 = Conv2d::new(&mut params, "head.fc2", fused, spec.proj_dim, 1, 1, 0, 1.0, &mut rng);
        // head biases start at U(±1/√fan_in) so an all-zero patch still projects to a nonzero vector
        let bound = 1.0 / (fused as f64).sqrt();
        for id in [proj1.bias, proj2.bias] {
            for b in params.get_mut(id).data.iter_mut() {
                *b = T::of(rand::Rng::random_range(&mut rng, -bound..bound));
            }
        }
        Ok((
            Self {
                spec: spec.clone(),
                stages,
                first_level,
                fc_weight,
                fc_bias,
                proj1,
                proj2,
            },
            params,
        ))
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn classifier_ids(&self) -> (ParamId, ParamId) {
        (self.fc_weight, self.fc_bias)
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Act<T>, mode: ForwardMode) -> Result<Forward<T>> {
        let spec = &self.spec;
        if (x.c, x.h, x.w) != (spec.input_channels, spec.input_size, spec.input_size) {
            return Err(Error::Shape(format!(
                "expected input {}×{}×{}, got {}×{}×{}",
                spec.input_channels, spec.input_size, spec.input_size, x.c, x.h, x.w
            )));
        }
        if x.n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let keep = mode.train;
        let mut caches = Vec::new();
        let mut levels = Vec::new();
        let mut cur = x.clone();
        for (si, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Plain { conv, pool } => {
                    let (a, cc) = conv.forward(params, &cur, keep);
                    let r = relu(&a);
                    let (p, pc) = pool.forward(&r, keep);
                    if keep {
                        caches.push(StageCache::Plain {
                            conv: cc.unwrap(),
                            act: r,
                            pool: pc.unwrap(),
                        });
                    }
                    cur = p;
                }
                Stage::Residual(blocks) => {
                    let mut bc = Vec::new();
                    for b in blocks {
                        let (a1, c1) = b.conv1.forward(params, &cur, keep);
                        let r1 = relu(&a1);
                        let (mut a2, c2) = b.conv2.forward(params, &r1, keep);
                        let sc = match &b.shortcut {
                            Some(conv) => {
                                let (s, c) = conv.forward(params, &cur, keep);
                                a2.add_assign(&s);
                                c
                            }
                            None => {
                                a2.add_assign(&cur);
                                None
                            }
                        };
                        let out = relu(&a2);
                        if keep {
                            bc.push(BlockCache {
                                c1: c1.unwrap(),
                                r1,
                                c2: c2.unwrap(),
                                sc,
                                out: out.clone(),
                            });
                        }
                        cur = out;
                    }
                    if keep {
                        caches.push(StageCache::Residual(bc));
                    }
                }
            }
            if si >= self.first_level {
                levels.push(cur.clone());
            }
        }
        let last = levels.last().expect("at least one level");
        let pooled = global_avg_pool(last);
        let logits = linear(&pooled, x.n, params.get(self.fc_weight), params.get(self.fc_bias));
        let mut head_cache = None;
        let embeddings = if mode.embed {
            let (emb, hc) = self.project(params, &levels, keep)?;
            head_cache = hc;
            Some(emb)
        } else {
            None
        };
        Ok(Forward {
            levels,
            pooled,
            logits,
            embeddings,
            cache: keep.then_some(Cache {
                stages: caches,
                head: head_cache,
            }),
        })
    }

    fn project<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        levels: &[Act<T>],
        keep: bool,
    ) -> Result<(PatchEmbeddings<T>, Option<HeadCache<T>>)> {
        let [a, b] = self.spec.fusion_levels;
        let fused = fuse_levels(levels, (a, b))?;
        let (emb, c1, hidden, c2, norms) = self.head(params, &fused, keep)?;
        let cache = keep.then(|| HeadCache {
            level_b: levels[b - 1].shape(),
            split: levels[a - 1].c,
            c1: c1.unwrap(),
            hidden,
            c2: c2.unwrap(),
            norms,
        });
        Ok((emb, cache))
    }

    /// Location-wise two-layer head on a fused tensor, rows L2-normalized.
    pub fn project_patches<T: Scalar>(&self, params: &ParamSet<T>, fused: &Act<T>) -> Result<PatchEmbeddings<T>> {
        Ok(self.head(params, fused, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn head<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        fused: &Act<T>,
        keep: bool,
    ) -> Result<(PatchEmbeddings<T>, Option<ConvCache<T>>, Act<T>, Option<ConvCache<T>>, Vec<T>)> {
        if fused.c != self.proj1.cin {
            return Err(Error::Shape(format!(
                "projection head expects {} channels, got {}",
                self.proj1.cin, fused.c
            )));
        }
        let (h1, c1) = self.proj1.forward(params, fused, keep);
        let hidden = relu(&h1);
        let (z, c2) = self.proj2.forward(params, &hidden, keep);
        let (n, p, d) = (z.n, z.plane(), z.c);
        let np = n * p;
        let mut rows = vec![T::zero(); np * d];
        for ch in 0..d {
            for (r, &v) in z.data[ch * np..(ch + 1) * np].iter().enumerate() {
                rows[r * d + ch] = v;
            }
        }
        let (data, norms) = l2_normalize_rows(&rows, d)?;
        Ok((PatchEmbeddings { n, p, d, data }, c1, hidden, c2, norms))
    }

    /// Accumulates parameter gradients of a scalar loss given its gradients
    /// with respect to the logits and (optionally) the embeddings.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        fwd: &Forward<T>,
        dlogits: Option<&[T]>,
        demb: Option<&[T]>,
    ) {
        let cache = fwd.cache.as_ref().expect("forward pass was not run in train mode");
        let n = fwd.batch();
        let nl = fwd.levels.len();
        let mut dlevels: Vec<Option<Act<T>>> = vec![None; nl];
        let add = |slot: &mut Option<Act<T>>, g: Act<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };

        if let Some(dl) = dlogits {
            let (w, b) = (self.fc_weight, self.fc_bias);
            let weight = params.get(w).clone();
            let mut gw = std::mem::replace(grads.get_mut(w), Tensor::zeros(&[0]));
            let mut gb = std::mem::replace(grads.get_mut(b), Tensor::zeros(&[0]));
            let dpooled = linear_backward(&fwd.pooled, n, &weight, dl, &mut gw, &mut gb);
            *grads.get_mut(w) = gw;
            *grads.get_mut(b) = gb;
            add(&mut dlevels[nl - 1], global_avg_pool_backward(&dpooled, fwd.levels[nl - 1].shape()));
        }

        if let Some(de) = demb {
            let emb = fwd.embeddings.as_ref().expect("embeddings were not computed");
            let hc = cache.head.as_ref().expect("head cache missing");
            let drows = l2_normalize_rows_backward(&emb.data, &hc.norms, de, emb.d);
            let (p, d) = (emb.p, emb.d);
            let np = n * p;
            let la = &fwd.levels[self.spec.fusion_levels[0] - 1];
            let mut dz = Act::zeros(d, n, la.h, la.w);
            for ch in 0..d {
                for r in 0..np {
                    dz.data[ch * np + r] = drows[r * d + ch];
                }
            }
            let dh = self.proj2.backward(params, grads, &hc.c2, &dz, true).unwrap();
            let dh = relu_backward(&hc.hidden, &dh);
            let dfused = self.proj1.backward(params, grads, &hc.c1, &dh, true).unwrap();
            let (da, db) = dfused.split_channels(hc.split);
            let (_, _, bh, bw) = hc.level_b;
            let [a, b] = self.spec.fusion_levels;
            add(&mut dlevels[a - 1], da);
            add(&mut dlevels[b - 1], bilinear_resize_backward(&db, bh, bw));
        }

        let mut g: Option<Act<T>> = None;
        for si in (0..self.stages.len()).rev() {
            if si >= self.first_level {
                if let Some(dl) = dlevels[si - self.first_level].take() {
                    match &mut g {
                        Some(acc) => acc.add_assign(&dl),
                        None => g = Some(dl),
                    }
                }
            }
            let Some(dy) = g.take() else { continue };
            let need_dx = si > 0;
            g = match (&self.stages[si], &cache.stages[si]) {
                (Stage::Plain { conv, pool }, StageCache::Plain { conv: cc, act, pool: pc }) => {
                    let d = pool.backward(pc, &dy);
                    let d = relu_backward(act, &d);
                    conv.backward(params, grads, cc, &d, need_dx)
                }
                (Stage::Residual(blocks), StageCache::Residual(bcs)) => {
                    let mut d = dy;
                    for (bi, (b, bc)) in blocks.iter().zip(bcs).enumerate().rev() {
                        let need = need_dx || bi > 0;
                        let gsum = relu_backward(&bc.out, &d);
                        let dr1 = b.conv2.backward(params, grads, &bc.c2, &gsum, true).unwrap();
                        let da1 = relu_backward(&bc.r1, &dr1);
                        let dx1 = b.conv1.backward(params, grads, &bc.c1, &da1, need);
                        let dsc = match (&b.shortcut, &bc.sc) {
                            (Some(conv), Some(c)) => conv.backward(params, grads, c, &gsum, need),
                            _ => Some(gsum),
                        };
                        d = match (dx1, dsc) {
                            (Some(mut x), Some(s)) => {
                                x.add_assign(&s);
                                x
                            }
                            _ => break,
                        };
                    }
                    need_dx.then_some(d)
                }
                _ => unreachable!("cache does not match layout"),
            };
        }
    }
}

/// Bilinearly resizes level `b` to level `a`'s spatial size and concatenates
/// along channels (level `a` first).
pub fn fuse_levels<T: Scalar>(levels: &[Act<T>], (a, b): (usize, usize)) -> Result<Act<T>> {
    if !(1 <= a && a < b) {
        return Err(Error::Shape(format!("fusion levels must satisfy 1 <= a < b, got ({a}, {b})")));
    }
    let get = |t: usize| {
        levels
            .get(t - 1)
            .ok_or_else(|| Error::Shape(format!("feature level {t} does not exist")))
    };
    let (la, lb) = (get(a)?, get(b)?);
    Ok(la.concat_channels(&bilinear_resize(lb, la.h, la.w)))
}

/// Stacks images (all `C×H×W`) into a batch activation.
pub fn batch_from_images<T: Scalar>(images: &[&ImageTensor]) -> Result<Act<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (c, h, w) = first.shape();
    let mut values = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != (c, h, w) {
            return Err(Error::Shape(format!("batch mixes shapes {:?} and {:?}", (c, h, w), img.shape())));
        }
        values.extend(img.data().iter().map(|&v| T::of(v as f64)));
    }
    Ok(Act::from_nchw(images.len(), c, h, w, &values))
}
