//! Differentiable building blocks: the five-level residual encoder, the
//! attention gates (FRM, RLIM), the temporal fusion block and the decoder.
//!
//! Blocks own only [`ParamId`]s; weights live in a [`ParamStore`] and every
//! forward pass runs on a [`Graph`] that borrows that store.

use std::collections::HashMap;

use mustan_autograd::params::{kaiming_normal, normal};
use mustan_autograd::{BnParams, Graph, ParamId, ParamKind, ParamStore, ShapeError, Tensor, Var};
use rand::Rng;

use crate::{Error, Result};

/// Channel widths of the five pyramid levels at width factor 1.
pub const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];

/// Spatial dimensions must be divisible by this (the coarsest stride).
pub const STRIDE_MULTIPLE: usize = 32;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-level channel counts for `width_factor`; every entry must be a
/// positive integer.
pub fn channel_schedule(width_factor: f64) -> Result<[usize; 5]> {
    if !(width_factor.is_finite() && width_factor > 0.0) {
        return Err(Error::Config(format!("width factor {width_factor} must be positive")));
    }
    let mut out = [0; 5];
    for (o, &base) in out.iter_mut().zip(&BASE_CHANNELS) {
        let c = base as f64 * width_factor;
        if (c - c.round()).abs() > 1e-9 || c.round() < 1.0 {
            return Err(Error::Config(format!(
                "width factor {width_factor} gives non-integral width {c} for base {base}"
            )));
        }
        *o = c.round() as usize;
    }
    Ok(out)
}

pub fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(STRIDE_MULTIPLE) || !w.is_multiple_of(STRIDE_MULTIPLE) {
        return Err(ShapeError::new(format!(
            "spatial size {h}×{w} is not a positive multiple of {STRIDE_MULTIPLE}"
        ))
        .into());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub width_factor: f64,
    /// 3 for single-frame encoders, `3·T` for a stacked-window encoder.
    pub in_channels: usize,
    pub window: usize,
    pub use_pretrained_stem: bool,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            kaiming_normal(&[out_ch, in_ch, kernel, kernel], rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_ch])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 1×1 convolution initialised with a small normal, used for gate heads.
    fn pointwise_small<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_ch as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            normal(&[out_ch, in_ch, 1, 1], std, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_ch])));
        Conv2d {
            weight,
            bias,
            stride: 1,
            pad: 0,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        Ok(g.conv2d(x, &w, b.as_ref(), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    params: BnParams,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let params = BnParams {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], 1.0)),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        };
        BatchNorm2d { params }
    }

    pub fn params(&self) -> &BnParams {
        &self.params
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        Ok(g.batch_norm(x, &self.params)?)
    }
}

/// Convolution followed by batch norm (no conv bias).
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        self.bn.forward(g, &h)
    }
}

/// Two 3×3 conv-bn layers with a residual connection (projected when the
/// stride or width changes).
#[derive(Clone, Debug)]
pub struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let first = ConvBn::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
        let second = ConvBn::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
        let shortcut =
            (stride != 1 || in_ch != out_ch).then(|| ConvBn::new(store, &format!("{name}.down"), in_ch, out_ch, 1, stride, 0, rng));
        BasicBlock { first, second, shortcut }
    }

    fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(&h);
        let h = self.second.forward(g, &h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x.clone(),
        };
        let sum = g.add(&h, &skip)?;
        Ok(g.relu(&sum))
    }
}

/// Five feature maps at strides 2, 4, 8, 16, 32 (finest first).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> &Var {
        &self.levels[i - 1]
    }
}

/// ResNet18-style encoder: a 7×7 stride-2 stem, a 3×3 stride-2 max-pool, then
/// four residual stages of two basic blocks; stages 3–5 downsample by 2.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    channels: [usize; 5],
    in_channels: usize,
    prefix: String,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let channels = channel_schedule(cfg.width_factor)?;
        if cfg.in_channels == 0 {
            return Err(Error::Config("encoder needs at least one input channel".into()));
        }
        let stem = ConvBn::new(store, &format!("{prefix}.stem"), cfg.in_channels, channels[0], 7, 2, 3, rng);
        let mut stages = Vec::with_capacity(4);
        for level in 2..=5 {
            let (cin, cout) = (channels[level - 2], channels[level - 1]);
            let stride = if level == 2 { 1 } else { 2 };
            let name = format!("{prefix}.stage{level}");
            stages.push(vec![
                BasicBlock::new(store, &format!("{name}.0"), cin, cout, stride, rng),
                BasicBlock::new(store, &format!("{name}.1"), cout, cout, 1, rng),
            ]);
        }
        Ok(Encoder {
            stem,
            stages,
            channels,
            in_channels: cfg.in_channels,
            prefix: prefix.to_string(),
        })
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(ShapeError::new(format!(
                "encoder {} expects {} input channels, got {c}",
                self.prefix, self.in_channels
            ))
            .into());
        }
        check_spatial(h, w)?;
        let mut levels = Vec::with_capacity(5);
        let f1 = self.stem.forward(g, x)?;
        let f1 = g.relu(&f1);
        let mut h = g.max_pool2d(&f1, 3, 2, 1)?;
        levels.push(f1);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, &h)?;
            }
            levels.push(h.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Copies ImageNet ResNet18 weights (torchvision naming) into the stem and
    /// stages 2–4, whose shapes coincide with `conv1`/`bn1` and
    /// `layer2`–`layer4`. Stage 5 keeps its random initialisation. Returns the
    /// number of arrays copied.
    pub fn load_resnet18(&self, store: &mut ParamStore, weights: &HashMap<String, Tensor>) -> Result<usize> {
        if self.in_channels != 3 || self.channels != BASE_CHANNELS {
            return Err(Error::Config(
                "pretrained ResNet18 weights need a 3-channel encoder at width factor 1".into(),
            ));
        }
        let mut pairs: Vec<(String, ParamId)> = Vec::new();
        let push_bn = |pairs: &mut Vec<(String, ParamId)>, src: &str, bn: &BatchNorm2d| {
            let p = bn.params();
            pairs.push((format!("{src}.weight"), p.gamma));
            pairs.push((format!("{src}.bias"), p.beta));
            pairs.push((format!("{src}.running_mean"), p.running_mean));
            pairs.push((format!("{src}.running_var"), p.running_var));
        };
        pairs.push(("conv1.weight".into(), self.stem.conv.weight));
        push_bn(&mut pairs, "bn1", &self.stem.bn);
        for (stage, layer) in self.stages[..3].iter().zip(2..=4) {
            for (b, block) in stage.iter().enumerate() {
                let src = format!("layer{layer}.{b}");
                pairs.push((format!("{src}.conv1.weight"), block.first.conv.weight));
                push_bn(&mut pairs, &format!("{src}.bn1"), &block.first.bn);
                pairs.push((format!("{src}.conv2.weight"), block.second.conv.weight));
                push_bn(&mut pairs, &format!("{src}.bn2"), &block.second.bn);
                if let Some(s) = &block.shortcut {
                    pairs.push((format!("{src}.downsample.0.weight"), s.conv.weight));
                    push_bn(&mut pairs, &format!("{src}.downsample.1"), &s.bn);
                }
            }
        }
        for (src, id) in &pairs {
            let t = weights
                .get(src)
                .ok_or_else(|| Error::Config(format!("pretrained weights lack array {src}")))?;
            store.set(*id, t.clone())?;
        }
        Ok(pairs.len())
    }
}

/// Additive attention gate: `a = σ(ψ(ReLU(BN(W_g·g) + BN(W_x·x))))`, output
/// `a ⊙ x`, with `x` the modulated stream.
#[derive(Clone, Debug)]
struct AttentionGate {
    guide: ConvBn,
    modulated: ConvBn,
    psi: Conv2d,
}

impl AttentionGate {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, guide_ch: usize, channels: usize, rng: &mut R) -> Self {
        AttentionGate {
            guide: ConvBn::new(store, &format!("{prefix}.guide"), guide_ch, channels, 1, 1, 0, rng),
            modulated: ConvBn::new(store, &format!("{prefix}.input"), channels, channels, 1, 1, 0, rng),
            psi: Conv2d::pointwise_small(store, &format!("{prefix}.psi"), channels, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, guide: &Var, x: &Var) -> Result<(Var, Var)> {
        let a = self.guide.forward(g, guide)?;
        let b = self.modulated.forward(g, x)?;
        let s = g.add(&a, &b)?;
        let s = g.relu(&s);
        let logits = self.psi.forward(g, &s)?;
        let att = g.sigmoid(&logits);
        let out = g.gate_mul(&att, x)?;
        Ok((out, att))
    }
}

/// Feature refinement: temporal-context features gate the current-frame
/// features at one pyramid level.
#[derive(Clone, Debug)]
pub struct Frm {
    gate: AttentionGate,
}

impl Frm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        Frm {
            gate: AttentionGate::new(store, prefix, channels, channels, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, context: &Var, frame: &Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, context, frame)?.0)
    }

    /// Also returns the `N×1×h×w` attention map.
    pub fn forward_with_attention(&self, g: &mut Graph, context: &Var, frame: &Var) -> Result<(Var, Var)> {
        if context.shape() != frame.shape() {
            return Err(ShapeError::new(format!(
                "frm: context {:?} and frame {:?} differ",
                context.shape(),
                frame.shape()
            ))
            .into());
        }
        self.gate.forward(g, context, frame)
    }

    /// Bias of the 1-channel attention head.
    pub fn gate_bias(&self) -> ParamId {
        self.gate.psi.bias.expect("gate head has a bias")
    }
}

/// Localisation refinement: a half-resolution embedding, upsampled ×2 and
/// projected, gates a full-resolution embedding.
#[derive(Clone, Debug)]
pub struct Rlim {
    gate: AttentionGate,
}

impl Rlim {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, low_channels: usize, high_channels: usize, rng: &mut R) -> Self {
        Rlim {
            gate: AttentionGate::new(store, prefix, low_channels, high_channels, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, lre: &Var, hre: &Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, lre, hre)?.0)
    }

    pub fn forward_with_attention(&self, g: &mut Graph, lre: &Var, hre: &Var) -> Result<(Var, Var)> {
        let (ln, _, lh, lw) = lre.value().dims4()?;
        let (hn, _, hh, hw) = hre.value().dims4()?;
        if ln != hn || 2 * lh != hh || 2 * lw != hw {
            return Err(ShapeError::new(format!(
                "rlim: low-resolution input {:?} is not half of {:?}",
                lre.shape(),
                hre.shape()
            ))
            .into());
        }
        let up = g.upsample2x(lre)?;
        self.gate.forward(g, &up, hre)
    }
}

/// Temporal fusion: concatenate `T` same-shaped maps along channels and
/// project back to one map's width with a 1×1 conv, batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    proj: ConvBn,
    window: usize,
}

impl FusionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, window: usize, channels: usize, rng: &mut R) -> Self {
        FusionBlock {
            proj: ConvBn::new(store, &format!("{prefix}.proj"), window * channels, channels, 1, 1, 0, rng),
            window,
        }
    }

    pub fn forward(&self, g: &mut Graph, feats: &[Var]) -> Result<Var> {
        if feats.len() != self.window {
            return Err(ShapeError::new(format!(
                "fusion block expects {} maps, got {}",
                self.window,
                feats.len()
            ))
            .into());
        }
        if let Some(bad) = feats.iter().find(|f| f.shape() != feats[0].shape()) {
            return Err(ShapeError::new(format!(
                "fusion block inputs differ: {:?} vs {:?}",
                bad.shape(),
                feats[0].shape()
            ))
            .into());
        }
        let refs: Vec<&Var> = feats.iter().collect();
        let cat = g.concat(&refs)?;
        let h = self.proj.forward(g, &cat)?;
        Ok(g.relu(&h))
    }
}

/// Four upsample-concat-conv blocks (levels 4 → 1), then a final ×2
/// upsample, 1×1 conv to one channel and sigmoid.
#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<Conv2d>,
    head: Conv2d,
    channels: [usize; 5],
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: [usize; 5], rng: &mut R) -> Self {
        let blocks = (1..=4)
            .rev()
            .map(|level| {
                let cin = channels[level] + channels[level - 1];
                Conv2d::new(store, &format!("{prefix}.block{level}"), cin, channels[level - 1], 3, 1, 1, true, rng)
            })
            .collect();
        let head = Conv2d::new(store, &format!("{prefix}.head"), channels[0], 1, 1, 1, 0, true, rng);
        Decoder { blocks, head, channels }
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Skips ordered from level 4 down to level 1.
    pub fn forward(&self, g: &mut Graph, bottleneck: &Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != 4 {
            return Err(ShapeError::new(format!("decoder needs 4 skips, got {}", skips.len())).into());
        }
        self.forward_with(g, bottleneck, |_, level, _| Ok(skips[4 - level].clone()))
    }

    /// Like [`forward`](Self::forward), but each skip is produced on demand
    /// from `(graph, level, running decoder feature)`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        bottleneck: &Var,
        mut skip_for: impl FnMut(&mut Graph, usize, &Var) -> Result<Var>,
    ) -> Result<Var> {
        let (_, c5, _, _) = bottleneck.value().dims4()?;
        if c5 != self.channels[4] {
            return Err(ShapeError::new(format!(
                "decoder bottleneck has {c5} channels, expected {}",
                self.channels[4]
            ))
            .into());
        }
        let mut running = bottleneck.clone();
        for (block, level) in self.blocks.iter().zip((1..=4).rev()) {
            let skip = skip_for(g, level, &running)?;
            let (_, rc, rh, rw) = running.value().dims4()?;
            let (_, sc, sh, sw) = skip.value().dims4()?;
            if sc != self.channels[level - 1] || (sh, sw) != (2 * rh, 2 * rw) || rc != self.channels[level] {
                return Err(ShapeError::new(format!(
                    "decoder level {level}: skip {:?} does not match running feature {:?}",
                    skip.shape(),
                    running.shape()
                ))
                .into());
            }
            let up = g.upsample2x(&running)?;
            let cat = g.concat(&[&up, &skip])?;
            let h = block.forward(g, &cat)?;
            running = g.relu(&h);
        }
        let full = g.upsample2x(&running)?;
        let logits = self.head.forward(g, &full)?;
        Ok(g.sigmoid(&logits))
    }
}
