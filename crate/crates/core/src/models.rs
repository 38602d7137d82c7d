//! MUSTAN1, MUSTAN2 and the plain encoder-decoder baseline, assembled from
//! [`crate::nnblocks`], plus prediction, parameter counting and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use mustan_autograd::{Graph, ParamStore, ShapeError, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, ArrayKind};
use crate::dataio::ClipSample;
use crate::nnblocks::{channel_schedule, BlockConfig, Decoder, Encoder, FeaturePyramid, Frm, FusionBlock, Rlim};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mustan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mustan1,
    Mustan2,
    UnetBaseline,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mustan1 => "mustan1",
            Arch::Mustan2 => "mustan2",
            Arch::UnetBaseline => "unet_baseline",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mustan1" => Ok(Arch::Mustan1),
            "mustan2" => Ok(Arch::Mustan2),
            "unet_baseline" => Ok(Arch::UnetBaseline),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Temporal window length `T`.
    #[serde(rename = "T")]
    pub window: usize,
    pub width_factor: f64,
    pub share_mustan2_encoders: bool,
    /// Initialise 3-channel encoders from ImageNet ResNet18 weights.
    pub pretrained: bool,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Mustan2,
            window: 3,
            width_factor: 1.0,
            share_mustan2_encoders: true,
            pretrained: false,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window length T must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        channel_schedule(self.width_factor)?;
        Ok(())
    }

    /// The baseline is single-frame, so its window is forced to 1.
    pub fn normalized(mut self) -> Self {
        if self.arch == Arch::UnetBaseline {
            self.window = 1;
        }
        self
    }
}

// A model holds exactly one of these, so the variant size gap costs nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum Net {
    Mustan1 {
        cnet: Encoder,
        fnet: Encoder,
        frms: Vec<Frm>,
        rlims: Vec<Rlim>,
        decoder: Decoder,
    },
    Mustan2 {
        encoders: Vec<Encoder>,
        fusions: Vec<FusionBlock>,
        rlims: Vec<Rlim>,
        decoder: Decoder,
    },
    Unet {
        encoder: Encoder,
        decoder: Decoder,
    },
}

/// Per-pixel probabilities and the thresholded mask (`p ≥ threshold`), both
/// row-major `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub height: usize,
    pub width: usize,
    pub prob: Vec<f64>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    net: Net,
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.clone().normalized();
        cfg.validate()?;
        let channels = channel_schedule(cfg.width_factor)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = cfg.window;
        let block = |in_channels: usize| BlockConfig {
            width_factor: cfg.width_factor,
            in_channels,
            window: t,
            use_pretrained_stem: cfg.pretrained && in_channels == 3 && cfg.width_factor == 1.0,
        };
        let rlims = |store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Vec<Rlim> {
            (1..=4)
                .map(|l| Rlim::new(store, &format!("rlim{l}"), channels[l], channels[l - 1], rng))
                .collect()
        };
        let net = match cfg.arch {
            Arch::Mustan1 => {
                let cnet = Encoder::new(&mut store, "cnet", &block(3 * t), &mut rng)?;
                let fnet = Encoder::new(&mut store, "fnet", &block(3), &mut rng)?;
                let frms = (1..=5)
                    .map(|l| Frm::new(&mut store, &format!("frm{l}"), channels[l - 1], &mut rng))
                    .collect();
                let rlims = rlims(&mut store, &mut rng);
                let decoder = Decoder::new(&mut store, "dec", channels, &mut rng);
                Net::Mustan1 {
                    cnet,
                    fnet,
                    frms,
                    rlims,
                    decoder,
                }
            }
            Arch::Mustan2 => {
                let n_enc = if cfg.share_mustan2_encoders { 1 } else { t };
                let encoders = (0..n_enc)
                    .map(|k| {
                        let name = if cfg.share_mustan2_encoders { "enc".to_string() } else { format!("enc{k}") };
                        Encoder::new(&mut store, &name, &block(3), &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fusions = (1..=5)
                    .map(|l| FusionBlock::new(&mut store, &format!("fb{l}"), t, channels[l - 1], &mut rng))
                    .collect();
                let rlims = rlims(&mut store, &mut rng);
                let decoder = Decoder::new(&mut store, "dec", channels, &mut rng);
                Net::Mustan2 {
                    encoders,
                    fusions,
                    rlims,
                    decoder,
                }
            }
            Arch::UnetBaseline => Net::Unet {
                encoder: Encoder::new(&mut store, "enc", &block(3), &mut rng)?,
                decoder: Decoder::new(&mut store, "dec", channels, &mut rng),
            },
        };
        Ok(Model { cfg, store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn window_len(&self) -> usize {
        self.cfg.window
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    fn encoders(&self) -> Vec<&Encoder> {
        match &self.net {
            Net::Mustan1 { cnet, fnet, .. } => vec![cnet, fnet],
            Net::Mustan2 { encoders, .. } => encoders.iter().collect(),
            Net::Unet { encoder, .. } => vec![encoder],
        }
    }

    /// Copies ResNet18 weights (torchvision names) into every 3-channel
    /// encoder. Returns the number of arrays copied.
    pub fn load_pretrained(&mut self, weights: &HashMap<String, Tensor>) -> Result<usize> {
        if self.cfg.width_factor != 1.0 {
            return Err(Error::Config("pretrained weights need width factor 1".into()));
        }
        let encoders: Vec<Encoder> = self.encoders().into_iter().filter(|e| e.in_channels() == 3).cloned().collect();
        let mut copied = 0;
        for enc in &encoders {
            copied += enc.load_resnet18(&mut self.store, weights)?;
        }
        Ok(copied)
    }

    /// Reads a weight archive (see [`crate::archive`]) and applies
    /// [`load_pretrained`](Self::load_pretrained).
    pub fn load_pretrained_file(&mut self, path: &Path) -> Result<usize> {
        let arch = read_archive(path)?;
        let weights = arch
            .header
            .arrays
            .into_iter()
            .map(|r| r.name)
            .zip(arch.tensors)
            .collect();
        self.load_pretrained(&weights)
    }

    /// Runs the network on a window of `T` batches (`N×3×H×W` each, oldest
    /// first) and returns `N×1×H×W` probabilities.
    pub fn forward(&self, g: &mut Graph, frames: &[Var]) -> Result<Var> {
        if frames.len() != self.cfg.window {
            return Err(Error::Contract(format!(
                "model expects a window of {} frames, got {}",
                self.cfg.window,
                frames.len()
            )));
        }
        if let Some(bad) = frames.iter().find(|f| f.shape() != frames[0].shape()) {
            return Err(ShapeError::new(format!(
                "window frames differ in shape: {:?} vs {:?}",
                bad.shape(),
                frames[0].shape()
            ))
            .into());
        }
        let current = frames.last().expect("window is non-empty");
        match &self.net {
            Net::Mustan1 {
                cnet,
                fnet,
                frms,
                rlims,
                decoder,
            } => {
                let refs: Vec<&Var> = frames.iter().collect();
                let stacked = g.concat(&refs)?;
                let c = cnet.forward(g, &stacked)?;
                let f = fnet.forward(g, current)?;
                let r = frms
                    .iter()
                    .zip(c.levels.iter().zip(&f.levels))
                    .map(|(frm, (ci, fi))| frm.forward(g, ci, fi))
                    .collect::<Result<Vec<_>>>()?;
                decoder.forward_with(g, &r[4], |g, level, running| rlims[level - 1].forward(g, running, &r[level - 1]))
            }
            Net::Mustan2 {
                encoders,
                fusions,
                rlims,
                decoder,
            } => {
                let pyramids = frames
                    .iter()
                    .enumerate()
                    .map(|(k, x)| encoders[k.min(encoders.len() - 1)].forward(g, x))
                    .collect::<Result<Vec<FeaturePyramid>>>()?;
                let fused = fusions
                    .iter()
                    .enumerate()
                    .map(|(l, fb)| {
                        let maps: Vec<Var> = pyramids.iter().map(|p| p.levels[l].clone()).collect();
                        fb.forward(g, &maps)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cur = pyramids.last().expect("window is non-empty");
                decoder.forward_with(g, &fused[4], |g, level, _| {
                    rlims[level - 1].forward(g, &cur.levels[level], &fused[level - 1])
                })
            }
            Net::Unet { encoder, decoder } => {
                let e = encoder.forward(g, current)?;
                let skips: Vec<Var> = e.levels[..4].iter().rev().cloned().collect();
                decoder.forward(g, &e.levels[4], &skips)
            }
        }
    }

    /// Stacks windows (each `T` frames of `3×H×W`, oldest first) into
    /// per-position batches of shape `N×3×H×W`.
    pub fn batch_windows(&self, windows: &[&[Tensor]]) -> Result<Vec<Tensor>> {
        if let Some(w) = windows.iter().find(|w| w.len() != self.cfg.window) {
            return Err(Error::Contract(format!(
                "got a window of {} frames; the model expects {}",
                w.len(),
                self.cfg.window
            )));
        }
        (0..self.cfg.window)
            .map(|k| {
                let frames: Vec<Tensor> = windows.iter().map(|w| w[k].clone()).collect();
                Ok(Tensor::stack(&frames)?)
            })
            .collect()
    }

    pub fn batch_frames(&self, clips: &[&ClipSample]) -> Result<Vec<Tensor>> {
        let windows: Vec<&[Tensor]> = clips.iter().map(|c| c.frames.as_slice()).collect();
        self.batch_windows(&windows)
    }

    /// Inference-mode prediction for a batch of frame windows.
    pub fn predict_windows(&self, windows: &[&[Tensor]]) -> Result<Vec<MaskPrediction>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let batches = self.batch_windows(windows)?;
        let mut g = Graph::inference(&self.store);
        let inputs: Vec<Var> = batches.into_iter().map(|b| g.constant(b)).collect();
        let out = self.forward(&mut g, &inputs)?;
        let (n, _, h, w) = out.value().dims4()?;
        let data = out.value().data();
        Ok((0..n)
            .map(|i| {
                let prob = data[i * h * w..(i + 1) * h * w].to_vec();
                let mask = prob.iter().map(|&p| u8::from(p >= self.cfg.threshold)).collect();
                MaskPrediction {
                    height: h,
                    width: w,
                    prob,
                    mask,
                }
            })
            .collect())
    }

    pub fn predict_batch(&self, clips: &[&ClipSample]) -> Result<Vec<MaskPrediction>> {
        let windows: Vec<&[Tensor]> = clips.iter().map(|c| c.frames.as_slice()).collect();
        self.predict_windows(&windows)
    }

    pub fn predict_mask(&self, clip: &ClipSample) -> Result<MaskPrediction> {
        Ok(self.predict_batch(&[clip])?.pop().expect("one clip in, one prediction out"))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.cfg });
        let arrays: Vec<(&str, ArrayKind, &Tensor)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), ArrayKind::from(e.kind), &e.value))
            .collect();
        write_archive(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, meta, &arrays)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::load_checkpoint_impl(path, None)
    }

    /// Loads a checkpoint and rejects it unless its configuration equals
    /// `expected` (after normalisation).
    pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        Self::load_checkpoint_impl(path, Some(expected))
    }

    fn load_checkpoint_impl(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let arch = read_archive(path)?;
        let h = &arch.header;
        if h.format != CHECKPOINT_FORMAT || h.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "format {} v{} is not {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
                h.format, h.format_version
            )));
        }
        let cfg: ModelConfig = serde_json::from_value(h.meta["model"].clone())
            .map_err(|e| bad(format!("bad model config in header: {e}")))?;
        if let Some(exp) = expected {
            let exp = exp.clone().normalized();
            if exp != cfg {
                return Err(bad(format!(
                    "header config {} does not match the requested {}",
                    serde_json::to_string(&cfg)?,
                    serde_json::to_string(&exp)?
                )));
            }
        }
        let mut model = Model::build(&cfg, 0)?;
        let entries = model.store.entries();
        if entries.len() != h.arrays.len() {
            return Err(bad(format!(
                "{} arrays stored, architecture has {}",
                h.arrays.len(),
                entries.len()
            )));
        }
        for (rec, e) in h.arrays.iter().zip(entries) {
            if rec.name != e.name || rec.shape != e.value.shape() || rec.kind != ArrayKind::from(e.kind) {
                return Err(bad(format!(
                    "array {} {:?} does not match architecture array {} {:?}",
                    rec.name,
                    rec.shape,
                    e.name,
                    e.value.shape()
                )));
            }
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, t) in ids.into_iter().zip(arch.tensors) {
            model.store.set(id, t)?;
        }
        Ok(model)
    }
}
