//! Optimisation loop (Adam under a step-decay schedule), per-epoch
//! validation and checkpointing, and the evaluation driver.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mustan_autograd::{Adam, Graph, Mode, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, build_clip_index, ClipRef, ClipSample, DatasetManifest, FrameList, SplitMode};
use crate::metrics::{aggregate_report_with, confusion_counts, FrameCounts, MetricsReport, OverallMode};
use crate::models::{Model, ModelConfig};
use crate::nnblocks::check_spatial;
use crate::objective::{combined_loss, LossConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
    pub frame_stride: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// `(H, W)`.
    pub resolution: (usize, usize),
    /// Random horizontal flips of whole clips.
    pub augment: bool,
    /// Stop after this many optimiser steps (the current epoch is closed).
    pub max_steps: Option<u64>,
    /// Weight archive with torchvision ResNet18 names, used when
    /// `model.pretrained` is set.
    pub pretrained_weights: Option<PathBuf>,
    /// Keep a checkpoint for every epoch, not only the last and best.
    pub save_every_epoch: bool,
    /// Restrict supervised frames to those listed in this file.
    pub frame_list: Option<PathBuf>,
    /// Preload all clips when they fit in this many MiB.
    pub cache_mib: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            step_size: 20,
            gamma: 0.1,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            split_ratio: 0.9,
            split_mode: SplitMode::Global,
            frame_stride: 1,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            resolution: (320, 480),
            augment: false,
            max_steps: None,
            pretrained_weights: None,
            save_every_epoch: true,
            frame_list: None,
            cache_mib: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if self.step_size == 0 || self.epochs == 0 || self.batch_size == 0 || self.frame_stride == 0 {
            return bad("step_size, epochs, batch_size and frame_stride must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} must lie in (0, 1)", self.split_ratio));
        }
        if self.model.pretrained && self.pretrained_weights.is_none() {
            return bad("model.pretrained needs pretrained_weights (a weight archive path)".into());
        }
        check_spatial(self.resolution.0, self.resolution.1)?;
        self.loss.validate()?;
        self.model.validate()
    }
}

/// `lr0 · gamma^floor(epoch / step_size)`, rounded to 15 significant digits
/// so decimal schedules come out exact (`1e-4 · 0.1` is `1e-5`).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.step_size) as i32;
    let lr = cfg.lr0 * cfg.gamma.powi(k);
    if lr == 0.0 || !lr.is_finite() {
        return lr;
    }
    format!("{lr:.14e}").parse().expect("formatted float parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub degenerate: bool,
}

/// Stacks the current-frame masks of `clips` into flat `target` / `ignore`
/// vectors matching an `N×1×H×W` prediction.
fn stack_masks(clips: &[&ClipSample]) -> (Vec<u8>, Vec<u8>) {
    let target = clips.iter().flat_map(|c| c.target.iter().copied()).collect();
    let ignore = clips.iter().flat_map(|c| c.ignore.iter().copied()).collect();
    (target, ignore)
}

/// Owns the optimiser state for one model.
pub struct Trainer {
    pub model: Model,
    adam: Adam,
    loss: LossConfig,
}

impl Trainer {
    pub fn new(model: Model, loss: LossConfig) -> Self {
        Trainer {
            model,
            adam: Adam::default(),
            loss,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// One Adam update on `batch`; batches whose pixels are all ignored are
    /// skipped and flagged as degenerate.
    pub fn step(&mut self, batch: &[&ClipSample], lr: f64) -> Result<StepStats> {
        let inputs = self.model.batch_frames(batch)?;
        let (target, ignore) = stack_masks(batch);
        let (value, grads) = {
            let mut g = Graph::new(self.model.store(), Mode::Train);
            let vars: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
            let out = self.model.forward(&mut g, &vars)?;
            let loss = combined_loss(out.value().data(), &target, &ignore, &self.loss)?;
            if loss.degenerate {
                return Ok(StepStats {
                    loss: 0.0,
                    degenerate: true,
                });
            }
            if !loss.value.is_finite() {
                return Ok(StepStats {
                    loss: loss.value,
                    degenerate: false,
                });
            }
            let seed = Tensor::from_vec(out.shape(), loss.grad)?;
            (loss.value, g.backward(&out, seed)?)
        };
        let store = self.model.store_mut();
        store.apply_bn_updates(&grads.bn_updates);
        self.adam.step(store, grads.params(), lr);
        Ok(StepStats {
            loss: value,
            degenerate: false,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub resolution: (usize, usize),
    pub frame_stride: usize,
    pub batch_size: usize,
    pub frame_list: Option<FrameList>,
    pub overall_mode: OverallMode,
    pub label: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            resolution: (320, 480),
            frame_stride: 1,
            batch_size: 8,
            frame_list: None,
            overall_mode: OverallMode::CategoryMean,
            label: "in-domain".into(),
        }
    }
}

/// Per-frame confusion counts of `model` on already-loaded clips.
pub fn frame_counts(
    model: &Model,
    samples: &[&ClipSample],
    categories: &HashMap<String, String>,
    batch_size: usize,
) -> Result<Vec<FrameCounts>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        for (clip, pred) in chunk.iter().zip(model.predict_batch(chunk)?) {
            let video_id = clip.meta.video_id.clone();
            out.push(FrameCounts {
                category: categories.get(&video_id).cloned().unwrap_or_else(|| video_id.clone()),
                counts: confusion_counts(&pred.mask, &clip.target, &clip.ignore)?,
                video_id,
            });
        }
    }
    Ok(out)
}

fn categories(manifest: &DatasetManifest) -> HashMap<String, String> {
    manifest
        .videos
        .iter()
        .map(|v| (v.video_id.clone(), v.category.clone()))
        .collect()
}

/// Predicts every annotated clip of `manifest` and aggregates a labelled
/// report.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<MetricsReport> {
    let mut clips = build_clip_index(manifest, model.window_len(), opts.frame_stride)?;
    if let Some(fl) = &opts.frame_list {
        clips = fl.filter(clips);
    }
    let cats = categories(manifest);
    let mut counts = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(opts.batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|c| dataio::load_clip(manifest, c, opts.resolution))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ClipSample> = samples.iter().collect();
        counts.extend(frame_counts(model, &refs, &cats, opts.batch_size)?);
    }
    Ok(aggregate_report_with(&counts, opts.overall_mode)?.with_label(opts.label.clone()))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub train_clips: usize,
    pub val_clips: usize,
}

/// Clip storage: everything in memory when it fits, otherwise loaded per batch.
enum ClipSource<'a> {
    Cached(HashMap<ClipRef, ClipSample>),
    Lazy(&'a DatasetManifest, (usize, usize)),
}

impl ClipSource<'_> {
    fn load(&self, clips: &[ClipRef]) -> Result<Vec<ClipSample>> {
        clips
            .iter()
            .map(|c| match self {
                ClipSource::Cached(m) => Ok(m[c].clone()),
                ClipSource::Lazy(manifest, hw) => dataio::load_clip(manifest, c, *hw),
            })
            .collect()
    }
}

fn flip_horizontal(clip: &mut ClipSample) {
    let (h, w) = (clip.height, clip.width);
    let flip_rows = |data: &mut [f64]| {
        for row in data.chunks_mut(w) {
            row.reverse();
        }
    };
    for f in &mut clip.frames {
        flip_rows(f.data_mut());
    }
    for m in [&mut clip.target, &mut clip.ignore] {
        for row in m.chunks_mut(w) {
            row.reverse();
        }
    }
    debug_assert_eq!(clip.target.len(), h * w);
}

/// Full training run: split, per-epoch shuffled Adam steps, validation F1,
/// `log.jsonl` and checkpoints under `out_dir`.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::build(&cfg.model, cfg.seed)?;
    if let Some(path) = cfg.pretrained_weights.as_deref().filter(|_| cfg.model.pretrained) {
        let n = model.load_pretrained_file(path)?;
        log::info!("loaded {n} pretrained arrays from {}", path.display());
    }
    let mut clips = build_clip_index(manifest, model.window_len(), cfg.frame_stride)?;
    if let Some(path) = &cfg.frame_list {
        clips = FrameList::read(path)?.filter(clips);
    }
    if clips.is_empty() {
        return Err(Error::Config("the dataset has no annotated clips to train on".into()));
    }
    let (train_clips, val_clips) = dataio::split_train_val_with(&clips, cfg.split_ratio, cfg.seed, cfg.split_mode)?;
    if train_clips.is_empty() {
        return Err(Error::Config("the split left no training clips".into()));
    }
    let val_set: HashSet<&ClipRef> = val_clips.iter().collect();
    if train_clips.iter().any(|c| val_set.contains(c)) {
        return Err(Error::Contract("a validation clip is also in the training split".into()));
    }
    log::info!("{} training clips, {} validation clips", train_clips.len(), val_clips.len());

    let budget = cfg.cache_mib.saturating_mul(1 << 20);
    let source = match dataio::preload_clips(manifest, &clips, cfg.resolution, budget)? {
        Some(samples) => ClipSource::Cached(samples.into_iter().map(|s| (s.meta.clone(), s)).collect()),
        None => ClipSource::Lazy(manifest, cfg.resolution),
    };
    let val_samples = if val_clips.is_empty() { Vec::new() } else { source.load(&val_clips)? };
    let cats = categories(manifest);

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join("log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut trainer = Trainer::new(model, cfg.loss);
    let mut order = train_clips.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_e90c);
    let mut log = Vec::new();
    let mut best: Option<f64> = None;
    let best_path = ckpt_dir.join("best.ckpt");
    let last_path = ckpt_dir.join("last.ckpt");
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut stopped = false;
        for batch_refs in order.chunks(cfg.batch_size) {
            if batch_refs.iter().any(|c| val_set.contains(c)) {
                return Err(Error::Contract("validation clip drawn into a training batch".into()));
            }
            let mut batch = source.load(batch_refs)?;
            if cfg.augment {
                for clip in &mut batch {
                    if shuffle_rng.random_bool(0.5) {
                        flip_horizontal(clip);
                    }
                }
            }
            let refs: Vec<&ClipSample> = batch.iter().collect();
            let stats = trainer.step(&refs, lr)?;
            if stats.degenerate {
                continue;
            }
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: trainer.steps_taken() + 1,
                    lr,
                    clips: batch_refs
                        .iter()
                        .map(|c| format!("{}#{}", c.video_id, c.current_index))
                        .collect(),
                });
            }
            loss_sum += stats.loss;
            batches += 1;
            if cfg.max_steps.is_some_and(|m| trainer.steps_taken() >= m) {
                stopped = true;
                break;
            }
        }
        let val_f1 = if val_samples.is_empty() {
            None
        } else {
            let refs: Vec<&ClipSample> = val_samples.iter().collect();
            let counts = frame_counts(&trainer.model, &refs, &cats, cfg.batch_size)?;
            Some(aggregate_report_with(&counts, OverallMode::CategoryMean)?.overall.f1)
        };
        let record = EpochRecord {
            epoch,
            step: trainer.steps_taken(),
            lr,
            loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
            val_f1,
        };
        log::info!(
            "epoch {epoch}: step {} lr {lr:e} loss {:.6} val F1 {}",
            record.step,
            record.loss,
            val_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"))
        );
        writeln!(log_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        log.push(record);

        if cfg.save_every_epoch {
            trainer.model.save_checkpoint(&ckpt_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
        trainer.model.save_checkpoint(&last_path)?;
        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|b| score > b) {
            best = Some(score);
            trainer.model.save_checkpoint(&best_path)?;
        }
        if stopped {
            break 'epochs;
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        train_clips: train_clips.len(),
        val_clips: val_clips.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_step_decay() {
        let cfg = TrainConfig::default();
        for e in 0..20 {
            assert_eq!(lr_at_epoch(&cfg, e), 1e-4);
        }
        for e in 20..40 {
            assert_eq!(lr_at_epoch(&cfg, e), 1e-5);
        }
        assert_eq!(lr_at_epoch(&cfg, 40), 1e-6);
        let flat = TrainConfig {
            gamma: 1.0,
            ..TrainConfig::default()
        };
        assert!((0..100).all(|e| lr_at_epoch(&flat, e) == 1e-4));
    }

    #[test]
    fn schedule_never_increases_when_gamma_at_most_one() {
        for gamma in [0.1, 0.5, 0.9, 1.0] {
            for step_size in [1, 3, 20] {
                let cfg = TrainConfig {
                    gamma,
                    step_size,
                    ..TrainConfig::default()
                };
                for e in 0..100 {
                    assert!(lr_at_epoch(&cfg, e + 1) <= lr_at_epoch(&cfg, e));
                }
            }
        }
    }

    #[test]
    fn defaults_mirror_the_recipe() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["lr0"], 1e-4);
        assert_eq!(v["step_size"], 20);
        assert_eq!(v["gamma"], 0.1);
        assert_eq!(v["epochs"], 40);
        assert_eq!(v["batch_size"], 8);
        assert_eq!(v["split_ratio"], 0.9);
        assert_eq!(v["resolution"], serde_json::json!([320, 480]));
        assert_eq!(v["augment"], false);
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = TrainConfig {
            resolution: (100, 100),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.model.pretrained = true;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.split_ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn flipping_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = ClipSample {
            frames: vec![Tensor::from_fn(&[3, 2, 4], |_| rng.random())],
            target: vec![1, 0, 0, 0, 0, 0, 1, 1],
            ignore: vec![0, 0, 1, 0, 0, 0, 0, 0],
            height: 2,
            width: 4,
            meta: ClipRef {
                video_id: "v".into(),
                current_index: 1,
                window_indices: vec![1],
            },
        };
        let mut f = clip.clone();
        flip_horizontal(&mut f);
        assert_eq!(f.target, vec![0, 0, 0, 1, 1, 1, 0, 0]);
        flip_horizontal(&mut f);
        assert_eq!(f, clip);
    }
}
