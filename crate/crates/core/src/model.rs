//! Network descriptions and their forward passes.
//!
//! Every network is a list of levels. A level is a trunk (a plain conv stack
//! or a dense block), a strided convolution reshaped into primary capsules,
//! and a routed class-capsule head. Single-level specs cover CapsNet, DCNet
//! and the ablation variants; DCNet++ stacks three levels, feeds each level's
//! pre-squash primary-capsule maps into the next, and adds a fourth head
//! routed from all levels' primary capsules.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::capsule::{self, CapsuleLayerSpec, MarginLossConfig, NORM_EPS};
use crate::conv::Padding;
use crate::decoder::{self, DecoderKind, DecoderSpec};
use crate::dense::{DenseBlockSpec, DenseMode, KERNEL_INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const DIGITCAPS_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BaselineCapsnet,
    CapsnetVariant,
    Dcnet,
    DcnetVariantOne,
    DcnetVariantTwo,
    DcnetVariantThree,
    DcnetPlusPlus,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::BaselineCapsnet,
        ModelKind::CapsnetVariant,
        ModelKind::Dcnet,
        ModelKind::DcnetVariantOne,
        ModelKind::DcnetVariantTwo,
        ModelKind::DcnetVariantThree,
        ModelKind::DcnetPlusPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BaselineCapsnet => "baseline-capsnet",
            ModelKind::CapsnetVariant => "capsnet-variant",
            ModelKind::Dcnet => "dcnet",
            ModelKind::DcnetVariantOne => "dcnet-variant-one",
            ModelKind::DcnetVariantTwo => "dcnet-variant-two",
            ModelKind::DcnetVariantThree => "dcnet-variant-three",
            ModelKind::DcnetPlusPlus => "dcnet-plus-plus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape { channels, height, width }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TrunkSpec {
    /// Conv + ReLU layers.
    Conv { layers: Vec<ConvLayerSpec> },
    Dense(DenseBlockSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryCapsSpec {
    /// Capsule types per grid position.
    pub capsule_channels: usize,
    pub capsule_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PrimaryCapsSpec {
    pub fn conv_out_channels(&self) -> usize {
        self.capsule_channels * self.capsule_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub trunk: TrunkSpec,
    pub primary: PrimaryCapsSpec,
    /// Dimension of this level's class capsules.
    pub digit_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input: InputShape,
    pub num_classes: usize,
    pub levels: Vec<LevelSpec>,
    /// Class-capsule dimension of the head routed from all levels' primary
    /// capsules. Hierarchical models only.
    #[serde(default)]
    pub merged_digit_dim: Option<usize>,
    pub routing_iters: usize,
    #[serde(default)]
    pub decoder: Option<DecoderSpec>,
    #[serde(default)]
    pub margin: MarginLossConfig,
    /// Stop gradients between levels so each per-level head trains only its
    /// own level.
    #[serde(default)]
    pub head_isolation: bool,
    /// Learning rate the preset was tuned for, if it differs from the default.
    #[serde(default)]
    pub lr: Option<f64>,
}

/// Derived shapes of one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    pub in_channels: usize,
    pub in_size: (usize, usize),
    pub trunk_channels: usize,
    pub trunk_size: (usize, usize),
    pub grid: (usize, usize),
    pub num_capsules: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPlan {
    pub levels: Vec<LevelPlan>,
    pub merged_capsules: usize,
    /// Width of the concatenated class capsule.
    pub class_dim: usize,
    pub num_heads: usize,
}

fn level_prefix(spec: &ModelSpec, level: usize) -> String {
    if spec.levels.len() == 1 {
        String::new()
    } else {
        format!("level{}.", level + 1)
    }
}

fn out_size(size: (usize, usize), k: usize, s: usize, p: Padding) -> Option<(usize, usize)> {
    Some((p.output_size(size.0, k, s)?, p.output_size(size.1, k, s)?))
}

impl ModelSpec {
    /// Shapes of every stage; fails with the violated constraint.
    pub fn plan(&self) -> Result<ModelPlan> {
        let input = self.input;
        if input.channels == 0 || input.height == 0 || input.width == 0 {
            return Err(Error::config("input shape has a zero extent"));
        }
        if self.num_classes < 1 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.routing_iters < 1 {
            return Err(Error::config("routing_iters must be at least 1"));
        }
        if self.levels.is_empty() {
            return Err(Error::config("a model needs at least one level"));
        }
        self.margin.validate()?;
        let mut levels = Vec::new();
        let (mut channels, mut size) = (input.channels, (input.height, input.width));
        for (li, level) in self.levels.iter().enumerate() {
            let lvl = li + 1;
            let (trunk_channels, trunk_size) = match &level.trunk {
                TrunkSpec::Conv { layers } => {
                    let mut c = channels;
                    let mut s = size;
                    for (i, l) in layers.iter().enumerate() {
                        if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                            return Err(Error::config(format!("level {lvl} conv {i} has a zero extent")));
                        }
                        s = out_size(s, l.kernel, l.stride, l.padding).ok_or_else(|| {
                            Error::config(format!(
                                "level {lvl} conv {i}: {}x{} kernel does not fit a {}x{} input",
                                l.kernel, l.kernel, s.0, s.1
                            ))
                        })?;
                        c = l.out_channels;
                    }
                    (c, s)
                }
                TrunkSpec::Dense(d) => {
                    d.validate()?;
                    let s = match (d.out_size(size.0), d.out_size(size.1)) {
                        (Some(h), Some(w)) => (h, w),
                        _ => {
                            return Err(Error::config(format!(
                                "level {lvl} dense block shrinks a {}x{} input to nothing",
                                size.0, size.1
                            )))
                        }
                    };
                    (d.out_channels(channels), s)
                }
            };
            let p = &level.primary;
            if p.capsule_channels == 0 || p.capsule_dim == 0 || p.kernel == 0 || p.stride == 0 || level.digit_dim == 0 {
                return Err(Error::config(format!("level {lvl} capsule spec has a zero extent")));
            }
            let grid = out_size(trunk_size, p.kernel, p.stride, p.padding).ok_or_else(|| {
                Error::config(format!(
                    "spatial underflow at level {lvl}: {}x{} primary-capsule kernel on a {}x{} map",
                    p.kernel, p.kernel, trunk_size.0, trunk_size.1
                ))
            })?;
            let num_capsules = grid.0 * grid.1 * p.capsule_channels;
            levels.push(LevelPlan {
                in_channels: channels,
                in_size: size,
                trunk_channels,
                trunk_size,
                grid,
                num_capsules,
            });
            channels = p.conv_out_channels();
            size = grid;
        }
        let mut class_dim: usize = self.levels.iter().map(|l| l.digit_dim).sum();
        let mut merged_capsules = 0;
        if let Some(md) = self.merged_digit_dim {
            let d0 = self.levels[0].primary.capsule_dim;
            if self.levels.iter().any(|l| l.primary.capsule_dim != d0) {
                return Err(Error::config("merged head needs equal primary capsule dims across levels"));
            }
            if md == 0 {
                return Err(Error::config("merged_digit_dim must be at least 1"));
            }
            merged_capsules = levels.iter().map(|l| l.num_capsules).sum();
            class_dim += md;
        }
        if let Some(dec) = &self.decoder {
            dec.validate()?;
            if dec.input_dim != self.num_classes * class_dim {
                return Err(Error::config(format!(
                    "decoder input {} does not match {} classes x {class_dim}D",
                    dec.input_dim, self.num_classes
                )));
            }
            if (dec.out_height, dec.out_width) != (input.height, input.width)
                || (dec.out_channels != input.channels && dec.out_channels != 1)
            {
                return Err(Error::config("decoder output must match the input image (or one channel of it)"));
            }
        }
        let num_heads = self.levels.len() + usize::from(self.merged_digit_dim.is_some());
        Ok(ModelPlan {
            levels,
            merged_capsules,
            class_dim,
            num_heads,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    /// Routing-layer descriptions of every head, per-level heads first.
    pub fn capsule_layers(&self) -> Result<Vec<CapsuleLayerSpec>> {
        let plan = self.plan()?;
        let mut out: Vec<CapsuleLayerSpec> = self
            .levels
            .iter()
            .zip(&plan.levels)
            .map(|(l, p)| CapsuleLayerSpec {
                num_in: p.num_capsules,
                dim_in: l.primary.capsule_dim,
                num_out: self.num_classes,
                dim_out: l.digit_dim,
                routing_iters: self.routing_iters,
            })
            .collect();
        if let Some(md) = self.merged_digit_dim {
            out.push(CapsuleLayerSpec {
                num_in: plan.merged_capsules,
                dim_in: self.levels[0].primary.capsule_dim,
                num_out: self.num_classes,
                dim_out: md,
                routing_iters: self.routing_iters,
            });
        }
        Ok(out)
    }

    /// Exact parameter count, without allocating the parameters.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_breakdown()?.iter().map(|(_, n)| n).sum())
    }

    /// Parameter counts per module, in construction order.
    pub fn param_breakdown(&self) -> Result<Vec<(String, usize)>> {
        let plan = self.plan()?;
        let mut out = Vec::new();
        for (li, (level, lp)) in self.levels.iter().zip(&plan.levels).enumerate() {
            let prefix = level_prefix(self, li);
            match &level.trunk {
                TrunkSpec::Conv { layers } => {
                    let mut c = lp.in_channels;
                    let mut n = 0;
                    for l in layers {
                        n += l.kernel * l.kernel * c * l.out_channels + l.out_channels;
                        c = l.out_channels;
                    }
                    out.push((format!("{prefix}conv"), n));
                }
                TrunkSpec::Dense(d) => out.push((format!("{prefix}dense"), d.param_count(lp.in_channels))),
            }
            let p = &level.primary;
            out.push((
                format!("{prefix}primary"),
                p.kernel * p.kernel * lp.trunk_channels * p.conv_out_channels() + p.conv_out_channels(),
            ));
        }
        for (li, caps) in self.capsule_layers()?.iter().enumerate() {
            let name = if li < self.levels.len() {
                format!("{}digitcaps", level_prefix(self, li))
            } else {
                "merged.digitcaps".to_string()
            };
            out.push((name, caps.param_count()));
        }
        if let Some(dec) = &self.decoder {
            out.push(("decoder".to_string(), dec.param_count()));
        }
        Ok(out)
    }

    /// Allocates and initializes all parameters from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let plan = self.plan()?;
        let mut store = ParamStore::new();
        for (li, (level, lp)) in self.levels.iter().zip(&plan.levels).enumerate() {
            let prefix = level_prefix(self, li);
            match &level.trunk {
                TrunkSpec::Conv { layers } => {
                    let mut c = lp.in_channels;
                    for (i, l) in layers.iter().enumerate() {
                        let name = format!("{prefix}conv.{i}.kernel");
                        let k = rng::truncated_normal(
                            &mut rng::stream(seed, &name),
                            &[l.out_channels, c, l.kernel, l.kernel],
                            KERNEL_INIT_STD,
                        );
                        store.insert(name, k)?;
                        store.insert(format!("{prefix}conv.{i}.bias"), Tensor::zeros(&[l.out_channels]))?;
                        c = l.out_channels;
                    }
                }
                TrunkSpec::Dense(d) => d.init(&mut store, &format!("{prefix}dense"), lp.in_channels, seed)?,
            }
            let p = &level.primary;
            let name = format!("{prefix}primary.kernel");
            let k = rng::truncated_normal(
                &mut rng::stream(seed, &name),
                &[p.conv_out_channels(), lp.trunk_channels, p.kernel, p.kernel],
                KERNEL_INIT_STD,
            );
            store.insert(name, k)?;
            store.insert(format!("{prefix}primary.bias"), Tensor::zeros(&[p.conv_out_channels()]))?;
        }
        for (li, caps) in self.capsule_layers()?.iter().enumerate() {
            let name = if li < self.levels.len() {
                format!("{}digitcaps.weight", level_prefix(self, li))
            } else {
                "merged.digitcaps.weight".to_string()
            };
            let w = rng::truncated_normal(&mut rng::stream(seed, &name), &caps.weight_shape(), DIGITCAPS_INIT_STD);
            store.insert(name, w)?;
        }
        if let Some(dec) = &self.decoder {
            dec.init(&mut store, "decoder", seed)?;
        }
        Ok(store)
    }

    /// Forward pass on `x: [B,C,H,W]`. The decoder (if any) reconstructs from
    /// the class capsules masked by `mask`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound, x: Var, mask: Masking<'_>) -> Result<ModelOutput> {
        let plan = self.plan()?;
        let xs = g.shape(x).to_vec();
        let expect = [self.input.channels, self.input.height, self.input.width];
        if xs.len() != 4 || xs[1..] != expect {
            return Err(Error::dim(format!("model expects input [B,{:?}], got {xs:?}", expect)));
        }
        let batch = xs[0];
        let mut level_input = x;
        let mut primaries = Vec::new();
        let mut heads = Vec::new();
        for (li, (level, lp)) in self.levels.iter().zip(&plan.levels).enumerate() {
            let prefix = level_prefix(self, li);
            let features = match &level.trunk {
                TrunkSpec::Conv { layers } => {
                    let mut h = level_input;
                    for (i, l) in layers.iter().enumerate() {
                        let k = params.get(&format!("{prefix}conv.{i}.kernel"))?;
                        let b = params.get(&format!("{prefix}conv.{i}.bias"))?;
                        let y = g.conv2d(h, k, Some(b), l.stride, l.padding)?;
                        h = g.relu(y);
                    }
                    h
                }
                TrunkSpec::Dense(d) => d.forward(g, params, &format!("{prefix}dense"), level_input)?,
            };
            let p = &level.primary;
            let k = params.get(&format!("{prefix}primary.kernel"))?;
            let b = params.get(&format!("{prefix}primary.bias"))?;
            let maps = g.conv2d(features, k, Some(b), p.stride, p.padding)?;
            let (gh, gw) = lp.grid;
            // [B, caps*dim, h, w] -> [B, caps, h, w, dim] -> [B, I, dim]
            let caps = g.reshape(maps, &[batch, p.capsule_channels, p.capsule_dim, gh, gw])?;
            let caps = g.permute(caps, &[0, 1, 3, 4, 2])?;
            let caps = g.reshape(caps, &[batch, lp.num_capsules, p.capsule_dim])?;
            let u = g.squash(caps, T::of(NORM_EPS));
            primaries.push(u);

            let w = params.get(&format!("{prefix}digitcaps.weight"))?;
            let u_hat = g.predict(u, w)?;
            let (v, _) = capsule::route_on(g, u_hat, self.routing_iters)?;
            heads.push(v);

            level_input = if self.head_isolation { g.detach(maps) } else { maps };
        }
        if self.merged_digit_dim.is_some() {
            let all = g.concat(&primaries, 1)?;
            let w = params.get("merged.digitcaps.weight")?;
            let u_hat = g.predict(all, w)?;
            let (v, _) = capsule::route_on(g, u_hat, self.routing_iters)?;
            heads.push(v);
        }
        let class_caps = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };

        let norms = capsule::capsule_logits(g.value(class_caps))?;
        let predicted = capsule::argmax_rows(&norms);
        let recon = match &self.decoder {
            None => None,
            Some(dec) => {
                let selected: Vec<usize> = match mask {
                    Masking::Labels(labels) => {
                        if labels.len() != batch || labels.iter().any(|&l| l >= self.num_classes) {
                            return Err(Error::contract("mask labels do not match the batch"));
                        }
                        labels.to_vec()
                    }
                    Masking::Predicted => predicted.clone(),
                };
                let m = class_mask::<T>(&selected, self.num_classes, plan.class_dim);
                let masked = g.mul_const(class_caps, &m)?;
                let flat = g.reshape(masked, &[batch, self.num_classes * plan.class_dim])?;
                Some(dec.decode(g, params, "decoder", flat)?)
            }
        };
        Ok(ModelOutput {
            heads,
            class_caps,
            primaries,
            recon,
            predicted,
        })
    }

    /// Margin loss per head, their sum, the scaled reconstruction loss and
    /// the total. `recon_target` must match the decoder output shape.
    pub fn losses<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        out: &ModelOutput,
        labels: &[usize],
        recon_target: Option<Var>,
        recon_multiplier: f64,
    ) -> Result<Losses> {
        let targets = one_hot::<T>(labels, self.num_classes)?;
        let mut head_margins = Vec::new();
        for &h in &out.heads {
            let norms = g.l2_norm(h, 2, T::of(NORM_EPS))?;
            head_margins.push(g.margin_loss(norms, &targets, &self.margin)?);
        }
        let mut margin = head_margins[0];
        for &m in &head_margins[1..] {
            margin = g.add(margin, m)?;
        }
        let recon = match (out.recon, recon_target) {
            (Some(r), Some(t)) => Some(decoder::reconstruction_loss(g, r, t, recon_multiplier)?),
            _ => None,
        };
        let total = match recon {
            Some(r) => g.add(margin, r)?,
            None => margin,
        };
        Ok(Losses {
            head_margins,
            margin,
            recon,
            total,
        })
    }

    /// Reconstruction target for `images: [B,C,H,W]` in [0,1]: the image
    /// itself, or its channel mean for single-channel decoders.
    pub fn recon_target<T: Scalar>(&self, images: &Tensor<T>) -> Option<Tensor<T>> {
        let dec = self.decoder.as_ref()?;
        let s = images.shape();
        if dec.out_channels == s[1] {
            return Some(images.clone());
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::of(1.0 / c as f64);
        let mut out = vec![T::zero(); b * hw];
        for bi in 0..b {
            for ch in 0..c {
                let src = &images.data()[(bi * c + ch) * hw..][..hw];
                for (o, &x) in out[bi * hw..][..hw].iter_mut().zip(src) {
                    *o = *o + x * inv;
                }
            }
        }
        Tensor::new(&[b, 1, s[2], s[3]], out).ok()
    }
}

/// Which class capsule reaches the decoder.
#[derive(Debug, Clone, Copy)]
pub enum Masking<'a> {
    /// True labels (training).
    Labels(&'a [usize]),
    /// Longest class capsule (inference).
    Predicted,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Class capsules `[B,K,D_h]` of every routing head.
    pub heads: Vec<Var>,
    /// Per-class concatenation of all heads, `[B,K,sum D_h]`.
    pub class_caps: Var,
    /// Squashed primary capsules `[B,I_l,d]` per level.
    pub primaries: Vec<Var>,
    pub recon: Option<Var>,
    /// Argmax of class-capsule lengths per sample.
    pub predicted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Losses {
    pub head_margins: Vec<Var>,
    pub margin: Var,
    pub recon: Option<Var>,
    pub total: Var,
}

pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} out of range for {k} classes")));
        }
        t.data_mut()[i * k + l] = T::one();
    }
    Ok(t)
}

/// `[B,K,D]` mask with ones on each sample's selected class.
pub fn class_mask<T: Scalar>(selected: &[usize], k: usize, d: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[selected.len(), k, d]);
    for (b, &c) in selected.iter().enumerate() {
        m.data_mut()[(b * k + c) * d..][..d].fill(T::one());
    }
    m
}

/// A spec with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        let params = spec.init_params(seed)?;
        Ok(Model { spec, params })
    }

    /// Class capsules `[B,K,D]` and predictions for a batch, without gradients.
    pub fn infer(&self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = self.spec.forward(&mut g, &bound, x, Masking::Predicted)?;
        Ok((g.value(out.class_caps).clone(), out.predicted))
    }

    /// Decodes one sample's class capsules `[K,D]` after adding `delta` to
    /// component `dim` of class `class`, masking everything but `mask_class`.
    pub fn perturbed_reconstruction(
        &self,
        class_caps: &Tensor<f32>,
        mask_class: usize,
        class: usize,
        dim: usize,
        delta: f32,
    ) -> Result<Tensor<f32>> {
        let dec = self
            .spec
            .decoder
            .as_ref()
            .ok_or_else(|| Error::config("model has no decoder"))?;
        let (k, d) = (self.spec.num_classes, class_caps.len() / self.spec.num_classes.max(1));
        if class_caps.shape() != [k, d] || dec.input_dim != k * d {
            return Err(Error::dim(format!(
                "class capsules {:?} do not match the decoder input {}",
                class_caps.shape(),
                dec.input_dim
            )));
        }
        if class >= k || mask_class >= k || dim >= d {
            return Err(Error::contract(format!(
                "perturbation index (class {class}, dim {dim}) out of range for {k}x{d}"
            )));
        }
        let mut caps = class_caps.clone();
        caps.data_mut()[class * d + dim] += delta;
        let mask: Tensor<f32> = class_mask(&[mask_class], k, d);
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let c = g.constant(caps.reshape(&[1, k, d])?);
        let masked = g.mul_const(c, &mask)?;
        let flat = g.reshape(masked, &[1, k * d])?;
        let r = dec.decode(&mut g, &bound, "decoder", flat)?;
        let img = g.value(r);
        img.reshape(&img.shape()[1..])
    }
}

// ---------------------------------------------------------------------------
// Builders

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: Padding) -> ConvLayerSpec {
    ConvLayerSpec {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

fn primary(capsule_channels: usize, capsule_dim: usize, kernel: usize, stride: usize, padding: Padding) -> PrimaryCapsSpec {
    PrimaryCapsSpec {
        capsule_channels,
        capsule_dim,
        kernel,
        stride,
        padding,
    }
}

fn single_level(
    kind: ModelKind,
    input: InputShape,
    num_classes: usize,
    trunk: TrunkSpec,
    prim: PrimaryCapsSpec,
    digit_dim: usize,
    decoder: DecoderKind,
) -> ModelSpec {
    ModelSpec {
        kind,
        input,
        num_classes,
        levels: vec![LevelSpec {
            trunk,
            primary: prim,
            digit_dim,
        }],
        merged_digit_dim: None,
        routing_iters: 3,
        decoder: Some(DecoderSpec::for_image(
            decoder,
            num_classes * digit_dim,
            input.channels,
            input.height,
            input.width,
        )),
        margin: MarginLossConfig::default(),
        head_isolation: false,
        lr: None,
    }
}

impl ModelSpec {
    /// The network named by `kind` at the given input geometry, with the
    /// architecture of the corresponding parameter-comparison row (MNIST-style
    /// 32x8D primary capsules, 16D class capsules).
    pub fn of_kind(kind: ModelKind, input: InputShape, num_classes: usize) -> ModelSpec {
        let prim = primary(32, 8, 9, 2, Padding::Valid);
        let dense = |d: DenseBlockSpec| TrunkSpec::Dense(d);
        match kind {
            ModelKind::BaselineCapsnet => single_level(
                kind,
                input,
                num_classes,
                TrunkSpec::Conv {
                    layers: vec![conv(256, 9, 1, Padding::Valid)],
                },
                prim,
                16,
                DecoderKind::Baseline,
            ),
            ModelKind::CapsnetVariant => single_level(
                kind,
                input,
                num_classes,
                TrunkSpec::Conv {
                    layers: vec![conv(256, 9, 1, Padding::Valid), conv(256, 9, 1, Padding::Same)],
                },
                prim,
                16,
                DecoderKind::Baseline,
            ),
            ModelKind::Dcnet => single_level(
                kind,
                input,
                num_classes,
                dense(DenseBlockSpec::new(8, 32)),
                prim,
                16,
                DecoderKind::Dense,
            ),
            ModelKind::DcnetVariantOne => single_level(
                kind,
                input,
                num_classes,
                dense(DenseBlockSpec::new(3, 8)),
                prim,
                16,
                DecoderKind::Dense,
            ),
            ModelKind::DcnetVariantTwo => single_level(
                kind,
                input,
                num_classes,
                dense(DenseBlockSpec {
                    mode: DenseMode::Chain,
                    padding: Padding::Valid,
                    ..DenseBlockSpec::new(8, 32)
                }),
                prim,
                16,
                DecoderKind::Dense,
            ),
            ModelKind::DcnetVariantThree => single_level(
                kind,
                input,
                num_classes,
                dense(DenseBlockSpec {
                    mode: DenseMode::LastLayerOnly,
                    ..DenseBlockSpec::new(8, 32)
                }),
                prim,
                16,
                DecoderKind::Dense,
            ),
            ModelKind::DcnetPlusPlus => Self::dcnet_plus_plus(input, num_classes, DenseBlockSpec::new(8, 16), 12, [12, 12, 12, 18]),
        }
    }

    /// Three-level hierarchy with `capsule_channels` 8D primary capsules per
    /// level and per-head class-capsule dims `dims` (three levels, merged).
    pub fn dcnet_plus_plus(
        input: InputShape,
        num_classes: usize,
        dense: DenseBlockSpec,
        capsule_channels: usize,
        dims: [usize; 4],
    ) -> ModelSpec {
        let levels = (0..3)
            .map(|l| LevelSpec {
                trunk: TrunkSpec::Dense(dense),
                // The first level shrinks the image like DCNet; later levels
                // pad so the 9x9 kernel still fits the smaller maps.
                primary: primary(
                    capsule_channels,
                    8,
                    9,
                    2,
                    if l == 0 { Padding::Valid } else { Padding::Same },
                ),
                digit_dim: dims[l],
            })
            .collect();
        let class_dim: usize = dims.iter().sum();
        ModelSpec {
            kind: ModelKind::DcnetPlusPlus,
            input,
            num_classes,
            levels,
            merged_digit_dim: Some(dims[3]),
            routing_iters: 3,
            decoder: Some(DecoderSpec::for_image(
                DecoderKind::Dense,
                num_classes * class_dim,
                1,
                input.height,
                input.width,
            )),
            margin: MarginLossConfig::default(),
            head_isolation: true,
            lr: None,
        }
    }

    /// Named dataset presets, plus every [`ModelKind`] name at MNIST geometry.
    pub fn preset(name: &str) -> Result<ModelSpec> {
        let mnist = InputShape::new(1, 28, 28);
        let spec = match name {
            "mnist-dcnet" => Self::of_kind(ModelKind::Dcnet, mnist, 10),
            "cifar10-dcnetpp" => Self::of_kind(ModelKind::DcnetPlusPlus, InputShape::new(3, 32, 32), 10),
            "svhn-dcnet" => single_level(
                ModelKind::Dcnet,
                InputShape::new(3, 32, 32),
                10,
                TrunkSpec::Dense(DenseBlockSpec::new(4, 18)),
                primary(16, 6, 9, 2, Padding::Valid),
                8,
                DecoderKind::Dense,
            ),
            "tumor-dcnet" => {
                let mut s = single_level(
                    ModelKind::Dcnet,
                    InputShape::new(1, 64, 64),
                    3,
                    TrunkSpec::Dense(DenseBlockSpec::new(4, 16)),
                    primary(6, 8, 9, 2, Padding::Valid),
                    16,
                    DecoderKind::Dense,
                );
                s.lr = Some(1e-4);
                s
            }
            // Desk-scale DCNet for the 16x16 synthetic shapes.
            "synth-dcnet" => Self::of_kind(ModelKind::Dcnet, InputShape::new(1, 16, 16), 4).with_dense(DenseBlockSpec::new(4, 16)),
            // MNIST DCNet with the trunk scaled down to 4 layers of 16 maps.
            "mnist-dcnet-small" => Self::of_kind(ModelKind::Dcnet, mnist, 10).with_dense(DenseBlockSpec::new(4, 16)),
            other => match ModelKind::from_name(other) {
                Some(ModelKind::DcnetPlusPlus) => Self::of_kind(ModelKind::DcnetPlusPlus, InputShape::new(3, 32, 32), 10),
                Some(kind) => Self::of_kind(kind, mnist, 10),
                None => return Err(Error::config(format!("unknown preset {other}"))),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub const PRESETS: [&'static str; 6] = [
        "mnist-dcnet",
        "cifar10-dcnetpp",
        "svhn-dcnet",
        "tumor-dcnet",
        "synth-dcnet",
        "mnist-dcnet-small",
    ];

    /// Same spec with every dense trunk replaced by `dense`.
    pub fn with_dense(mut self, dense: DenseBlockSpec) -> ModelSpec {
        for l in &mut self.levels {
            if let TrunkSpec::Dense(d) = &mut l.trunk {
                *d = dense;
            }
        }
        self
    }

    /// A very small DCNet for gradient checks and overfitting tests:
    /// `dense_layers` dense layers of `growth` maps, `capsule_channels` 4-D
    /// primary capsules from a 3x3/2 convolution, 4-D class capsules and a
    /// narrow dense decoder.
    pub fn tiny_dcnet(input: InputShape, num_classes: usize, dense_layers: usize, growth: usize, capsule_channels: usize) -> ModelSpec {
        let digit = 4;
        ModelSpec {
            kind: ModelKind::Dcnet,
            input,
            num_classes,
            levels: vec![LevelSpec {
                trunk: TrunkSpec::Dense(DenseBlockSpec::new(dense_layers, growth)),
                primary: primary(capsule_channels, 4, 3, 2, Padding::Valid),
                digit_dim: digit,
            }],
            merged_digit_dim: None,
            routing_iters: 3,
            decoder: Some(DecoderSpec {
                kind: DecoderKind::Dense,
                input_dim: num_classes * digit,
                w1: 8,
                w2: 12,
                w3: 12,
                out_channels: input.channels,
                out_height: input.height,
                out_width: input.width,
            }),
            margin: MarginLossConfig::default(),
            head_isolation: false,
            lr: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ModelSpec> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST: InputShape = InputShape::new(1, 28, 28);

    #[test]
    fn baseline_has_1152_primary_capsules() {
        let plan = ModelSpec::of_kind(ModelKind::BaselineCapsnet, MNIST, 10).plan().unwrap();
        assert_eq!(plan.levels[0].grid, (6, 6));
        assert_eq!(plan.levels[0].num_capsules, 1152);
    }

    #[test]
    fn dcnet_primary_conv_sees_257_maps() {
        let plan = ModelSpec::of_kind(ModelKind::Dcnet, MNIST, 10).plan().unwrap();
        assert_eq!(plan.levels[0].trunk_channels, 257);
    }

    #[test]
    fn dcnetpp_structure() {
        let spec = ModelSpec::preset("cifar10-dcnetpp").unwrap();
        let plan = spec.plan().unwrap();
        assert_eq!(plan.num_heads, 4);
        assert_eq!(plan.class_dim, 54);
        assert_eq!(spec.levels.iter().map(|l| l.primary.capsule_channels).collect::<Vec<_>>(), vec![12; 3]);
        assert_eq!(plan.merged_capsules, plan.levels.iter().map(|l| l.num_capsules).sum::<usize>());
    }

    #[test]
    fn underflow_is_a_config_error() {
        let mut spec = ModelSpec::preset("cifar10-dcnetpp").unwrap();
        for l in &mut spec.levels {
            l.primary.padding = Padding::Valid;
        }
        let err = spec.plan().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("underflow"));
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(ModelSpec::preset("imagenet"), Err(Error::Config(_))));
    }

    #[test]
    fn presets_follow_their_descriptions() {
        let svhn = ModelSpec::preset("svhn-dcnet").unwrap();
        assert_eq!(svhn.levels[0].primary.capsule_channels, 16);
        assert_eq!(svhn.levels[0].primary.capsule_dim, 6);
        assert_eq!(svhn.levels[0].digit_dim, 8);
        assert_eq!(svhn.levels[0].trunk, TrunkSpec::Dense(DenseBlockSpec::new(4, 18)));

        let mnist = ModelSpec::preset("mnist-dcnet").unwrap();
        assert_eq!(mnist.levels[0].trunk, TrunkSpec::Dense(DenseBlockSpec::new(8, 32)));
        assert_eq!((mnist.levels[0].primary.capsule_channels, mnist.levels[0].primary.capsule_dim), (32, 8));
        assert_eq!(mnist.levels[0].digit_dim, 16);

        let tumor = ModelSpec::preset("tumor-dcnet").unwrap();
        assert_eq!(tumor.levels[0].trunk, TrunkSpec::Dense(DenseBlockSpec::new(4, 16)));
        assert_eq!(tumor.levels[0].primary.capsule_channels, 6);
        assert_eq!(tumor.lr, Some(1e-4));
    }

    #[test]
    fn closed_form_matches_allocation() {
        let spec = ModelSpec::preset("synth-dcnet").unwrap();
        assert_eq!(spec.param_count().unwrap(), spec.init_params(0).unwrap().count());
        let spec = ModelSpec::tiny_dcnet(InputShape::new(1, 8, 8), 2, 2, 3, 4);
        assert_eq!(spec.param_count().unwrap(), spec.init_params(0).unwrap().count());
    }

    #[test]
    fn json_round_trip() {
        let spec = ModelSpec::preset("cifar10-dcnetpp").unwrap();
        let back = ModelSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn decoder_width_mismatch_rejected() {
        let mut spec = ModelSpec::preset("synth-dcnet").unwrap();
        spec.decoder.as_mut().unwrap().input_dim += 1;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
