//! Dataset discovery, ground-truth decoding, temporal clip indexing and
//! train/validation splitting.
//!
//! Frame indices are 1-based throughout: index `k` refers to
//! `frame_paths[k - 1]`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use mustan_autograd::{ShapeError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nnblocks::check_spatial;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Cdnet,
    Simple,
}

/// Binary region-of-interest image; nonzero pixels are inside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMask {
    pub width: u32,
    pub height: u32,
    pub inside: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub category: String,
    pub frame_paths: Vec<PathBuf>,
    /// Aligned with `frame_paths`; `None` for unannotated frames.
    pub annotation_paths: Vec<Option<PathBuf>>,
    pub roi_path: Option<PathBuf>,
    #[serde(skip)]
    pub roi_mask: Option<RoiMask>,
    /// Inclusive 1-based range of evaluated frames.
    pub temporal_roi: Option<(usize, usize)>,
}

impl VideoEntry {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }

    /// 1-based indices of annotated frames inside the temporal ROI.
    pub fn annotated_indices(&self) -> Vec<usize> {
        let (lo, hi) = self.temporal_roi.unwrap_or((1, self.len()));
        (lo..=hi.min(self.len()))
            .filter(|&k| self.annotation_paths[k - 1].is_some())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let layout = |reason: String| Error::Layout {
            video: self.video_id.clone(),
            reason,
        };
        if self.annotation_paths.len() != self.frame_paths.len() {
            return Err(Error::Alignment {
                video: self.video_id.clone(),
                frames: self.frame_paths.len(),
                masks: self.annotation_paths.len(),
            });
        }
        if let Some((lo, hi)) = self.temporal_roi {
            if lo < 1 || lo > hi || hi > self.len() {
                return Err(layout(format!(
                    "temporal ROI ({lo}, {hi}) outside frames 1..={}",
                    self.len()
                )));
            }
        }
        if self.annotated_indices().is_empty() {
            return Err(layout("no annotated frames".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    pub layout_kind: LayoutKind,
    pub root_path: PathBuf,
}

impl DatasetManifest {
    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn annotated_frame_count(&self) -> usize {
        self.videos.iter().map(|v| v.annotated_indices().len()).sum()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads an exported manifest, reloading ROI images from their paths.
    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        for v in &mut m.videos {
            v.roi_mask = v.roi_path.as_deref().and_then(|p| read_roi(p, &v.video_id));
            v.validate()?;
        }
        Ok(m)
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(list_dir(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(list_dir(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_roi(path: &Path, video: &str) -> Option<RoiMask> {
    match image::open(path) {
        Ok(img) => {
            let g = img.to_luma8();
            Some(RoiMask {
                width: g.width(),
                height: g.height(),
                inside: g.pixels().map(|p| u8::from(p.0[0] >= 128)).collect(),
            })
        }
        Err(e) => {
            log::warn!("video {video}: ignoring unreadable ROI image {}: {e}", path.display());
            None
        }
    }
}

fn parse_temporal_roi(path: &Path, video: &str) -> Result<(usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Layout {
            video: video.to_string(),
            reason: format!("temporalROI.txt is not two integers: {:?}", text.trim()),
        })?;
    match nums[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(Error::Layout {
            video: video.to_string(),
            reason: format!("temporalROI.txt is not two integers: {:?}", text.trim()),
        }),
    }
}

/// Scans `<root>/<category>/<video>/{input,groundtruth}`.
pub fn scan_cdnet(root: &Path) -> Result<DatasetManifest> {
    let mut videos = Vec::new();
    for cat_dir in subdirs(root)? {
        let category = file_name(&cat_dir);
        for vdir in subdirs(&cat_dir)? {
            let video_id = file_name(&vdir);
            let input = vdir.join("input");
            if !input.is_dir() {
                return Err(Error::Layout {
                    video: format!("{category}/{video_id}"),
                    reason: "missing input directory".into(),
                });
            }
            let gt_dir = vdir.join("groundtruth");
            let frame_paths = image_files(&input)?;
            let annotation_paths = frame_paths
                .iter()
                .map(|f| {
                    let stem = f.file_stem()?.to_string_lossy();
                    let digits = stem.trim_start_matches(|c: char| !c.is_ascii_digit());
                    let gt = gt_dir.join(format!("gt{digits}.png"));
                    gt.is_file().then_some(gt)
                })
                .collect();
            let troi = vdir.join("temporalROI.txt");
            let temporal_roi = troi.is_file().then(|| parse_temporal_roi(&troi, &video_id)).transpose()?;
            let roi_path = ["ROI.bmp", "ROI.png", "ROI.jpg"]
                .iter()
                .map(|n| vdir.join(n))
                .find(|p| p.is_file());
            let roi_mask = roi_path.as_deref().and_then(|p| read_roi(p, &video_id));
            let entry = VideoEntry {
                video_id,
                category: category.clone(),
                frame_paths,
                annotation_paths,
                roi_path,
                roi_mask,
                temporal_roi,
            };
            entry.validate()?;
            videos.push(entry);
        }
    }
    Ok(DatasetManifest {
        videos,
        layout_kind: LayoutKind::Cdnet,
        root_path: root.to_path_buf(),
    })
}

/// Scans `<root>/<video>/{frames,masks}`. The category is the directory name
/// unless a `category.txt` file names one.
pub fn scan_simple(root: &Path) -> Result<DatasetManifest> {
    let mut videos = Vec::new();
    for vdir in subdirs(root)? {
        let video_id = file_name(&vdir);
        let frames_dir = vdir.join("frames");
        let masks_dir = vdir.join("masks");
        for d in [&frames_dir, &masks_dir] {
            if !d.is_dir() {
                return Err(Error::Layout {
                    video: video_id,
                    reason: format!("missing {} directory", file_name(d)),
                });
            }
        }
        let frame_paths = image_files(&frames_dir)?;
        let masks = image_files(&masks_dir)?;
        if frame_paths.len() != masks.len() {
            return Err(Error::Alignment {
                video: video_id,
                frames: frame_paths.len(),
                masks: masks.len(),
            });
        }
        let cat_file = vdir.join("category.txt");
        let category = if cat_file.is_file() {
            fs::read_to_string(&cat_file).map_err(|e| Error::io(&cat_file, e))?.trim().to_string()
        } else {
            video_id.clone()
        };
        let entry = VideoEntry {
            video_id,
            category,
            frame_paths,
            annotation_paths: masks.into_iter().map(Some).collect(),
            roi_path: None,
            roi_mask: None,
            temporal_roi: None,
        };
        entry.validate()?;
        videos.push(entry);
    }
    Ok(DatasetManifest {
        videos,
        layout_kind: LayoutKind::Simple,
        root_path: root.to_path_buf(),
    })
}

/// Picks the layout from the directory structure: simple when any video
/// directory has a `frames/` child, CDnet otherwise.
pub fn scan_auto(root: &Path) -> Result<DatasetManifest> {
    let simple = subdirs(root)?.iter().any(|d| d.join("frames").is_dir());
    if simple {
        scan_simple(root)
    } else {
        scan_cdnet(root)
    }
}

/// Maps ground-truth values to `(target, ignore)`: 255 is foreground, 0 and
/// 50 background, 85 and 170 ignored.
pub fn decode_cdnet_label(image: &GrayImage) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = image.len();
    let mut target = Vec::with_capacity(n);
    let mut ignore = Vec::with_capacity(n);
    for (x, y, p) in image.enumerate_pixels() {
        let (t, i) = match p.0[0] {
            255 => (1, 0),
            0 | 50 => (0, 0),
            85 | 170 => (0, 1),
            value => return Err(Error::Label { value, x, y }),
        };
        target.push(t);
        ignore.push(i);
    }
    Ok((target, ignore))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipRef {
    pub video_id: String,
    pub current_index: usize,
    /// `T` indices, oldest first; the last equals `current_index`.
    pub window_indices: Vec<usize>,
}

/// The `t` 1-based indices ending at `current`, `stride` apart, clamped to
/// frame 1.
pub fn causal_window(current: usize, t: usize, stride: usize) -> Vec<usize> {
    (0..t).rev().map(|back| current.saturating_sub(back * stride).max(1)).collect()
}

/// One clip per annotated frame; windows are causal
/// (`current − (T−1)·s, …, current`) and clamp to the first frame.
pub fn build_clip_index(manifest: &DatasetManifest, t: usize, frame_stride: usize) -> Result<Vec<ClipRef>> {
    if t == 0 || frame_stride == 0 {
        return Err(Error::Config(format!(
            "window length {t} and frame stride {frame_stride} must be positive"
        )));
    }
    let mut clips = Vec::new();
    for v in &manifest.videos {
        for current in v.annotated_indices() {
            clips.push(ClipRef {
                video_id: v.video_id.clone(),
                current_index: current,
                window_indices: causal_window(current, t, frame_stride),
            });
        }
    }
    Ok(clips)
}

/// Explicit `(video, frame range)` selections read from a frame-list file.
///
/// Each non-blank line not starting with `#` is `<video_id> <index>` or
/// `<video_id> <first>-<last>` (inclusive, 1-based).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameList {
    ranges: HashMap<String, Vec<(usize, usize)>>,
}

impl FrameList {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ranges: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("frame list line {}: cannot parse {line:?}", lineno + 1));
            let mut parts = line.split_whitespace();
            let (Some(video), Some(spec), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let range = match spec.split_once('-') {
                Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
                None => {
                    let k = spec.parse().map_err(|_| bad())?;
                    (k, k)
                }
            };
            if range.0 == 0 || range.0 > range.1 {
                return Err(bad());
            }
            ranges.entry(video.to_string()).or_default().push(range);
        }
        Ok(FrameList { ranges })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, video: &str, index: usize) -> bool {
        self.ranges
            .get(video)
            .is_some_and(|rs| rs.iter().any(|&(lo, hi)| (lo..=hi).contains(&index)))
    }

    /// Keeps the clips whose supervised frame is listed.
    pub fn filter(&self, clips: Vec<ClipRef>) -> Vec<ClipRef> {
        clips.into_iter().filter(|c| self.contains(&c.video_id, c.current_index)).collect()
    }
}

/// A loaded clip: `T` frames of shape `3×H×W` in `[0, 1]` (oldest first) and
/// the current frame's row-major `H×W` target and ignore masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub frames: Vec<Tensor>,
    pub target: Vec<u8>,
    pub ignore: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub meta: ClipRef,
}

impl ClipSample {
    pub fn window_len(&self) -> usize {
        self.frames.len()
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::image(path, other),
    })
}

/// Frame images of a single video directory: its `frames/` or `input/`
/// child when present, otherwise the directory itself.
pub fn video_frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let sub = ["frames", "input"].iter().map(|s| dir.join(s)).find(|d| d.is_dir());
    let frames = image_files(sub.as_deref().unwrap_or(dir))?;
    if frames.is_empty() {
        return Err(Error::Layout {
            video: dir.display().to_string(),
            reason: "no frame images".into(),
        });
    }
    Ok(frames)
}

/// Reads an RGB frame as a `3×H×W` tensor in `[0, 1]`, bilinearly resized.
pub fn load_frame(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let mut rgb: RgbImage = open_image(path)?.to_rgb8();
    if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
        rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, p) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(p.0[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

fn resize_nearest(g: GrayImage, h: usize, w: usize) -> GrayImage {
    if (g.height() as usize, g.width() as usize) == (h, w) {
        g
    } else {
        imageops::resize(&g, w as u32, h as u32, FilterType::Nearest)
    }
}

/// Loads the frames of `clip` (bilinear resize) and its current mask (nearest
/// resize) at `out_hw`. Pixels outside the video ROI are ignored.
pub fn load_clip(manifest: &DatasetManifest, clip: &ClipRef, out_hw: (usize, usize)) -> Result<ClipSample> {
    let (h, w) = out_hw;
    check_spatial(h, w)?;
    let video = manifest.video(&clip.video_id).ok_or_else(|| Error::Layout {
        video: clip.video_id.clone(),
        reason: "not in manifest".into(),
    })?;
    let frame = |k: usize| -> Result<&PathBuf> {
        video.frame_paths.get(k.wrapping_sub(1)).ok_or_else(|| Error::Layout {
            video: clip.video_id.clone(),
            reason: format!("frame {k} out of range 1..={}", video.len()),
        })
    };
    let frames = clip
        .window_indices
        .iter()
        .map(|&k| load_frame(frame(k)?, h, w))
        .collect::<Result<Vec<_>>>()?;
    frame(clip.current_index)?;
    let ann = video.annotation_paths[clip.current_index - 1].as_ref().ok_or_else(|| Error::Layout {
        video: clip.video_id.clone(),
        reason: format!("frame {} has no annotation", clip.current_index),
    })?;
    let label = resize_nearest(open_image(ann)?.to_luma8(), h, w);
    let (target, mut ignore) = decode_cdnet_label(&label)?;
    if let Some(roi) = &video.roi_mask {
        let roi_img = GrayImage::from_raw(roi.width, roi.height, roi.inside.clone())
            .ok_or_else(|| ShapeError::new("ROI mask buffer does not match its size"))?;
        for (ig, inside) in ignore.iter_mut().zip(resize_nearest(roi_img, h, w).into_raw()) {
            if inside == 0 {
                *ig = 1;
            }
        }
    }
    Ok(ClipSample {
        frames,
        target,
        ignore,
        height: h,
        width: w,
        meta: clip.clone(),
    })
}

/// Loads every clip, or returns `None` when the estimated footprint exceeds
/// `budget_bytes`.
pub fn preload_clips(
    manifest: &DatasetManifest,
    clips: &[ClipRef],
    out_hw: (usize, usize),
    budget_bytes: usize,
) -> Result<Option<Vec<ClipSample>>> {
    let t = clips.first().map_or(0, |c| c.window_indices.len());
    let estimate = clips.len() * (t * 3 * 8 + 2) * out_hw.0 * out_hw.1;
    if estimate > budget_bytes {
        return Ok(None);
    }
    clips.iter().map(|c| load_clip(manifest, c, out_hw)).collect::<Result<Vec<_>>>().map(Some)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle all clips together.
    #[default]
    Global,
    /// Split each video separately so every video appears in both parts.
    PerVideo,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    Ok(())
}

fn split_shuffled(mut clips: Vec<ClipRef>, ratio: f64, rng: &mut ChaCha8Rng) -> (Vec<ClipRef>, Vec<ClipRef>) {
    clips.shuffle(rng);
    let n_train = (ratio * clips.len() as f64).round() as usize;
    let val = clips.split_off(n_train.min(clips.len()));
    (clips, val)
}

/// Seeded shuffle followed by a `round(ratio·N)` / rest partition.
pub fn split_train_val(clips: &[ClipRef], ratio: f64, seed: u64) -> Result<(Vec<ClipRef>, Vec<ClipRef>)> {
    split_train_val_with(clips, ratio, seed, SplitMode::Global)
}

pub fn split_train_val_with(
    clips: &[ClipRef],
    ratio: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(Vec<ClipRef>, Vec<ClipRef>)> {
    check_ratio(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SplitMode::Global => Ok(split_shuffled(clips.to_vec(), ratio, &mut rng)),
        SplitMode::PerVideo => {
            let mut groups: BTreeMap<&str, Vec<ClipRef>> = BTreeMap::new();
            for c in clips {
                groups.entry(&c.video_id).or_default().push(c.clone());
            }
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (_, group) in groups {
                let (t, v) = split_shuffled(group, ratio, &mut rng);
                train.extend(t);
                val.extend(v);
            }
            Ok((train, val))
        }
    }
}
