//! Procedural surveillance-style scenes: textured sprites moving over
//! parametric backgrounds, rendered with exact per-frame foreground masks and
//! instance maps.
//!
//! Geometry lives in scene coordinates; pixel `(y, x)` of frame `t` samples
//! the scene at its centre `(y + ½, x + ½)` shifted by that frame's camera
//! jitter. Sprite positions wrap around the frame borders.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TOYSET_FORMAT: &str = "mustan-toyset";
pub const NIGHT_FACTOR: f64 = 0.35;
const CHECKER_CELL: f64 = 8.0;
const STRIPE_PERIOD: f64 = 4.0;
const NOISE_AMPLITUDE: f64 = 12.0;
const FLICKER_AMPLITUDE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    FlatColor,
    Gradient,
    Checker,
    NoiseFlicker,
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::FlatColor,
        Background::Gradient,
        Background::Checker,
        Background::NoiseFlicker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Background::FlatColor => "flat_color",
            Background::Gradient => "gradient",
            Background::Checker => "checker",
            Background::NoiseFlicker => "noise_flicker",
        }
    }
}

impl std::str::FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Background::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown background {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lighting {
    #[default]
    Day,
    Night,
}

impl std::str::FromStr for Lighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Lighting::Day),
            "night" => Ok(Lighting::Night),
            other => Err(Error::Config(format!("unknown lighting {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Striped,
}

/// Motion in pixels per frame, `(dy, dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Linear {
        velocity: (f64, f64),
    },
    /// Linear drift plus a vertical oscillation `amplitude·sin(2πt/period)`.
    Sinusoidal {
        velocity: (f64, f64),
        amplitude: f64,
        period: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: Shape,
    /// `(h, w)` in pixels.
    pub size: (usize, usize),
    /// Top-left corner `(y, x)` at frame 0.
    pub origin: (f64, f64),
    pub trajectory: Trajectory,
    pub texture: Texture,
    pub color: [u8; 3],
    pub z_order: i32,
}

impl SpriteSpec {
    /// Top-left corner at frame `t`.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        match self.trajectory {
            Trajectory::Linear { velocity: (vy, vx) } => (self.origin.0 + vy * t, self.origin.1 + vx * t),
            Trajectory::Sinusoidal {
                velocity: (vy, vx),
                amplitude,
                period,
            } => (
                self.origin.0 + vy * t + amplitude * (TAU * t / period).sin(),
                self.origin.1 + vx * t,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    /// Two background colours (flat colour uses the first).
    pub palette: [[u8; 3]; 2],
    pub lighting: Lighting,
    /// Maximum per-frame camera offset in pixels (integer offsets in
    /// `[-j, j]` on each axis).
    pub camera_jitter: usize,
    /// `(H, W)`.
    pub size: (usize, usize),
    pub num_frames: usize,
    pub sprites: Vec<SpriteSpec>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        crate::nnblocks::check_spatial(h, w)?;
        if self.num_frames == 0 {
            return Err(Error::Config("a scene needs at least one frame".into()));
        }
        if self.sprites.len() > 255 {
            return Err(Error::Config(format!("{} sprites exceed the 8-bit instance range", self.sprites.len())));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            let (sh, sw) = s.size;
            let (oy, ox) = s.origin;
            if sh == 0 || sw == 0 || sh > h || sw > w {
                return Err(Error::Config(format!("sprite {i} size {sh}×{sw} does not fit a {h}×{w} frame")));
            }
            if !(oy >= 0.0 && ox >= 0.0 && oy + sh as f64 <= h as f64 && ox + sw as f64 <= w as f64) {
                return Err(Error::Config(format!("sprite {i} at ({oy}, {ox}) is not inside the frame at t=0")));
            }
            let finite = match s.trajectory {
                Trajectory::Linear { velocity: (a, b) } => a.is_finite() && b.is_finite(),
                Trajectory::Sinusoidal {
                    velocity: (a, b),
                    amplitude,
                    period,
                } => a.is_finite() && b.is_finite() && amplitude.is_finite() && period.is_finite() && period > 0.0,
            };
            if !finite {
                return Err(Error::Config(format!("sprite {i} has a non-finite trajectory")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVideo {
    pub frames: Vec<RgbImage>,
    /// Foreground masks with values 0 / 255.
    pub masks: Vec<GrayImage>,
    /// Instance ids: sprite `i` is `i + 1`, background 0.
    pub instances: Vec<GrayImage>,
}

/// Signed offset of `v` from `origin` wrapped into `[-period/2, period/2)`.
fn wrapped(v: f64, origin: f64, period: f64) -> f64 {
    (v - origin + period / 2.0).rem_euclid(period) - period / 2.0
}

/// Whether scene point `(py, px)` lies on the sprite whose top-left is
/// `(top, left)`, with everything multiplied by `scale`. Returns the local
/// offset inside the sprite when it does.
fn covers(s: &SpriteSpec, top: f64, left: f64, py: f64, px: f64, frame: (f64, f64), scale: f64) -> Option<(f64, f64)> {
    let (h, w) = (s.size.0 as f64 * scale, s.size.1 as f64 * scale);
    let (top, left) = (top * scale, left * scale);
    match s.shape {
        Shape::Rect => {
            let dy = (py - top).rem_euclid(frame.0);
            let dx = (px - left).rem_euclid(frame.1);
            (dy < h && dx < w).then_some((dy, dx))
        }
        Shape::Ellipse => {
            let dy = wrapped(py, top + h / 2.0, frame.0);
            let dx = wrapped(px, left + w / 2.0, frame.1);
            let r = (dy / (h / 2.0)).powi(2) + (dx / (w / 2.0)).powi(2);
            (r <= 1.0).then_some((dy + h / 2.0, dx + w / 2.0))
        }
    }
}

/// Sprite indices sorted by ascending `z_order` (stable, so later sprites win ties).
fn paint_order(spec: &SceneSpec) -> Vec<usize> {
    let mut order: Vec<usize> = (0..spec.sprites.len()).collect();
    order.sort_by_key(|&i| spec.sprites[i].z_order);
    order
}

/// Per-frame integer camera offsets, drawn before any noise so that day and
/// night renders of one seed share them.
fn jitter_offsets(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(i64, i64)> {
    let j = spec.camera_jitter as i64;
    (0..spec.num_frames)
        .map(|_| {
            if j == 0 {
                (0, 0)
            } else {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            }
        })
        .collect()
}

/// Instance map of frame `t` rendered at `scale`× resolution; `jitter` is in
/// unscaled pixels.
pub fn render_instance_map(spec: &SceneSpec, t: usize, jitter: (i64, i64), scale: usize) -> GrayImage {
    let (h, w) = (spec.size.0 * scale, spec.size.1 * scale);
    let sc = scale as f64;
    let frame = (h as f64, w as f64);
    let order = paint_order(spec);
    let positions: Vec<(f64, f64)> = spec.sprites.iter().map(|s| s.position(t)).collect();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let py = y as f64 + 0.5 + jitter.0 as f64 * sc;
        let px = x as f64 + 0.5 + jitter.1 as f64 * sc;
        let mut id = 0u8;
        for &i in &order {
            let (top, left) = positions[i];
            if covers(&spec.sprites[i], top, left, py, px, frame, sc).is_some() {
                id = (i + 1) as u8;
            }
        }
        Luma([id])
    })
}

fn background_color(spec: &SceneSpec, py: f64, px: f64, noise: f64) -> [f64; 3] {
    let [a, b] = spec.palette.map(|c| c.map(f64::from));
    match spec.background {
        Background::FlatColor => a,
        Background::Gradient => {
            let u = (px / spec.size.1 as f64).rem_euclid(1.0);
            [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * u)
        }
        Background::Checker => {
            let cell = ((py / CHECKER_CELL).floor() + (px / CHECKER_CELL).floor()) as i64;
            if cell.rem_euclid(2) == 0 {
                a
            } else {
                b
            }
        }
        Background::NoiseFlicker => a.map(|v| v + noise),
    }
}

fn sprite_color(s: &SpriteSpec, local: (f64, f64)) -> [f64; 3] {
    let base = s.color.map(f64::from);
    match s.texture {
        Texture::Solid => base,
        Texture::Striped => {
            if (local.1 / STRIPE_PERIOD).floor() as i64 % 2 == 0 {
                base
            } else {
                base.map(|v| v * 0.5)
            }
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders every frame of `spec`.
pub fn generate_toy_video(spec: &SceneSpec) -> Result<ToyVideo> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets = jitter_offsets(spec, &mut rng);
    let order = paint_order(spec);
    let frame = (h as f64, w as f64);
    let light = match spec.lighting {
        Lighting::Day => 1.0,
        Lighting::Night => NIGHT_FACTOR,
    };
    let mut video = ToyVideo {
        frames: Vec::with_capacity(spec.num_frames),
        masks: Vec::with_capacity(spec.num_frames),
        instances: Vec::with_capacity(spec.num_frames),
    };
    for (t, &(jy, jx)) in offsets.iter().enumerate() {
        let flicker = if spec.background == Background::NoiseFlicker {
            rng.random_range(-FLICKER_AMPLITUDE..=FLICKER_AMPLITUDE)
        } else {
            0.0
        };
        let positions: Vec<(f64, f64)> = spec.sprites.iter().map(|s| s.position(t)).collect();
        let mut rgb = RgbImage::new(w as u32, h as u32);
        let mut inst = GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let py = y as f64 + 0.5 + jy as f64;
                let px = x as f64 + 0.5 + jx as f64;
                let noise = if spec.background == Background::NoiseFlicker {
                    flicker + rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)
                } else {
                    0.0
                };
                let mut color = background_color(spec, py, px, noise);
                let mut id = 0u8;
                for &i in &order {
                    let s = &spec.sprites[i];
                    let (top, left) = positions[i];
                    if let Some(local) = covers(s, top, left, py, px, frame, 1.0) {
                        color = sprite_color(s, local);
                        id = (i + 1) as u8;
                    }
                }
                rgb.put_pixel(x as u32, y as u32, Rgb(color.map(|v| to_u8(v * light))));
                inst.put_pixel(x as u32, y as u32, Luma([id]));
            }
        }
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if inst.get_pixel(x, y).0[0] > 0 { 255 } else { 0 }]));
        video.frames.push(rgb);
        video.masks.push(mask);
        video.instances.push(inst);
    }
    Ok(video)
}

/// Per-frame camera offsets `generate_toy_video` uses for `spec`.
pub fn camera_offsets(spec: &SceneSpec) -> Vec<(i64, i64)> {
    jitter_offsets(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToysetVideo {
    pub video_id: String,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToysetManifest {
    pub format: String,
    pub format_version: u32,
    pub videos: Vec<ToysetVideo>,
}

fn is_toyset(dir: &Path) -> bool {
    fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<ToysetManifest>(&t).ok())
        .is_some_and(|m| m.format == TOYSET_FORMAT)
}

fn save_png(img: impl Into<image::DynamicImage>, path: &Path) -> Result<()> {
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::image(path, other),
        })
}

/// Writes one simple-layout video directory per spec
/// (`video_NNN/{frames,masks,instances}/%06d.png` plus `category.txt`, which
/// names the background) and a `manifest.json`. A non-empty `out_dir` is
/// replaced only when `overwrite` is set and it already holds a toyset.
pub fn write_toyset(specs: &[SceneSpec], out_dir: &Path, overwrite: bool) -> Result<PathBuf> {
    for s in specs {
        s.validate()?;
    }
    let non_empty = out_dir.is_dir() && fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?.next().is_some();
    if non_empty {
        if !(overwrite && is_toyset(out_dir)) {
            return Err(Error::OutputExists(out_dir.to_path_buf()));
        }
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut videos = Vec::with_capacity(specs.len());
    for (v, spec) in specs.iter().enumerate() {
        let video_id = format!("video_{v:03}");
        let vdir = out_dir.join(&video_id);
        let video = generate_toy_video(spec)?;
        for sub in ["frames", "masks", "instances"] {
            let d = vdir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for t in 0..spec.num_frames {
            let name = format!("{:06}.png", t + 1);
            save_png(video.frames[t].clone(), &vdir.join("frames").join(&name))?;
            save_png(video.masks[t].clone(), &vdir.join("masks").join(&name))?;
            save_png(video.instances[t].clone(), &vdir.join("instances").join(&name))?;
        }
        let cat = vdir.join("category.txt");
        fs::write(&cat, format!("{}\n", spec.background.name())).map_err(|e| Error::io(&cat, e))?;
        videos.push(ToysetVideo {
            video_id,
            spec: spec.clone(),
        });
    }
    let manifest = ToysetManifest {
        format: TOYSET_FORMAT.into(),
        format_version: 1,
        videos,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Recipe for sampling many scene specs: which backgrounds and lightings to
/// draw from and the ranges of sprite geometry and motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRecipe {
    pub videos: usize,
    pub frames: usize,
    pub size: (usize, usize),
    pub backgrounds: Vec<Background>,
    pub lighting: Vec<Lighting>,
    pub camera_jitter: usize,
    pub sprites: (usize, usize),
    pub sprite_size: (usize, usize),
    pub speed: (f64, f64),
    /// Draw sprite colours close to the background palette.
    pub camouflage: bool,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            videos: 4,
            frames: 30,
            size: (64, 96),
            backgrounds: Background::ALL.to_vec(),
            lighting: vec![Lighting::Day],
            camera_jitter: 0,
            sprites: (1, 3),
            sprite_size: (8, 20),
            speed: (0.5, 2.5),
            camouflage: false,
            seed: 0,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene recipe: {m}")));
        if self.backgrounds.is_empty() || self.lighting.is_empty() {
            return bad("needs at least one background and one lighting");
        }
        if self.sprites.0 > self.sprites.1 || self.sprite_size.0 == 0 || self.sprite_size.0 > self.sprite_size.1 {
            return bad("sprite count and size ranges must be non-empty");
        }
        if self.sprite_size.1 > self.size.0.min(self.size.1) {
            return bad("sprites larger than the frame");
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1 && self.speed.1.is_finite()) {
            return bad("speed range must be finite and ordered");
        }
        crate::nnblocks::check_spatial(self.size.0, self.size.1)
    }

    /// Deterministic specs for `self.seed`; video `v` uses background
    /// `backgrounds[v mod len]` and lighting `lighting[v mod len]`.
    pub fn sample(&self) -> Result<Vec<SceneSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = self.size;
        let mut specs = Vec::with_capacity(self.videos);
        for v in 0..self.videos {
            let palette = [random_color(&mut rng), random_color(&mut rng)];
            let n = rng.random_range(self.sprites.0..=self.sprites.1);
            let sprites = (0..n)
                .map(|z| {
                    let size = (
                        rng.random_range(self.sprite_size.0..=self.sprite_size.1),
                        rng.random_range(self.sprite_size.0..=self.sprite_size.1),
                    );
                    let origin = (
                        rng.random_range(0..=h - size.0) as f64,
                        rng.random_range(0..=w - size.1) as f64,
                    );
                    let speed = rng.random_range(self.speed.0..=self.speed.1);
                    let angle = rng.random_range(0.0..TAU);
                    let velocity = (speed * angle.sin(), speed * angle.cos());
                    let trajectory = if rng.random_bool(0.5) {
                        Trajectory::Linear { velocity }
                    } else {
                        Trajectory::Sinusoidal {
                            velocity,
                            amplitude: rng.random_range(1.0..4.0),
                            period: rng.random_range(8.0..20.0),
                        }
                    };
                    let color = if self.camouflage {
                        let base = palette[rng.random_range(0..2)];
                        base.map(|c| to_u8(f64::from(c) + rng.random_range(-30.0..30.0)))
                    } else {
                        random_color(&mut rng)
                    };
                    SpriteSpec {
                        shape: if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
                        size,
                        origin,
                        trajectory,
                        texture: if rng.random_bool(0.5) { Texture::Solid } else { Texture::Striped },
                        color,
                        z_order: z as i32,
                    }
                })
                .collect();
            specs.push(SceneSpec {
                background: self.backgrounds[v % self.backgrounds.len()],
                palette,
                lighting: self.lighting[v % self.lighting.len()],
                camera_jitter: self.camera_jitter,
                size: self.size,
                num_frames: self.frames,
                sprites,
                seed: rng.random(),
            });
        }
        Ok(specs)
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random_range(30..=225), rng.random_range(30..=225), rng.random_range(30..=225)]
}
