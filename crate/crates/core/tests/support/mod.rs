//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use mustan::dataio::{build_clip_index, load_clip, scan_simple, ClipSample, DatasetManifest};
use mustan::metrics::ConfusionCounts;
use mustan::models::{Arch, Model, ModelConfig};
use mustan::nnblocks::{Decoder, FusionBlock, Frm, Rlim};
use mustan::objective::{combined_loss, LossConfig, LossValue};
use mustan::toygen::{write_toyset, Background, Lighting, SceneRecipe, SceneSpec};
use mustan::trainer::{evaluate, EvalOptions, Trainer};
use mustan_autograd::{Graph, Mode, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step; 1e-3 steps across ReLU kinks of these small
/// random networks.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance on every checked derivative.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Magnitudes below this are compared absolutely (a bias feeding a
/// training-mode batch norm has an exactly zero gradient).
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;
/// Coordinates checked per tensor.
const COORDS_PER_TENSOR: usize = 16;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    fn merge(mut self, other: GradCheck) -> Self {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= GRAD_REL_TOL
    }
}

fn coords(len: usize) -> impl Iterator<Item = usize> {
    let step = len.div_ceil(COORDS_PER_TENSOR).max(1);
    (0..len).step_by(step)
}

/// Compares reverse-mode gradients of `⟨f(inputs), w⟩` (random `w`) with
/// central differences, for the inputs and every trainable parameter the
/// output depends on.
pub fn check_graph<F>(store: &ParamStore, inputs: &[Tensor], seed: u64, f: F) -> Result<GradCheck, String>
where
    F: Fn(&mut Graph, &[Var]) -> mustan::Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<Tensor, String> {
        let mut g = Graph::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        f(&mut g, &vars).map(|v| v.value().clone()).map_err(|e| e.to_string())
    };
    let mut g = Graph::new(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).map_err(|e| e.to_string())?;
    let weights = random_tensor(out.shape(), &mut rng(seed));
    let objective = |t: &Tensor| t.dot(&weights);
    let grads = g.backward(&out, weights.clone()).map_err(|e| e.to_string())?;

    let mut check = GradCheck::default();
    for (k, (var, x0)) in vars.iter().zip(inputs).enumerate() {
        let dx = grads.wrt(var).ok_or_else(|| format!("no gradient for input {k}"))?;
        for i in coords(x0.len()) {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] = x0.data()[i] + FD_STEP;
            let plus = objective(&eval(store, &shifted)?);
            shifted[k].data_mut()[i] = x0.data()[i] - FD_STEP;
            let minus = objective(&eval(store, &shifted)?);
            check.record(dx.data()[i], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    for (id, dp) in grads.params() {
        for i in coords(dp.len()) {
            let mut sp = store.clone();
            sp.get_mut(*id).data_mut()[i] += FD_STEP;
            let mut sm = store.clone();
            sm.get_mut(*id).data_mut()[i] -= FD_STEP;
            let numeric = (objective(&eval(&sp, inputs)?) - objective(&eval(&sm, inputs)?)) / (2.0 * FD_STEP);
            check.record(dp.data()[i], numeric);
        }
    }
    Ok(check)
}

pub fn frm_gradcheck(seed: u64) -> Result<GradCheck, String> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let frm = Frm::new(&mut store, "frm", 4, &mut r);
    let inputs = [random_tensor(&[2, 4, 8, 12], &mut r), random_tensor(&[2, 4, 8, 12], &mut r)];
    check_graph(&store, &inputs, seed, |g, v| frm.forward(g, &v[0], &v[1]))
}

pub fn rlim_gradcheck(seed: u64) -> Result<GradCheck, String> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let rlim = Rlim::new(&mut store, "rlim", 6, 4, &mut r);
    let inputs = [random_tensor(&[2, 6, 4, 6], &mut r), random_tensor(&[2, 4, 8, 12], &mut r)];
    check_graph(&store, &inputs, seed, |g, v| rlim.forward(g, &v[0], &v[1]))
}

pub fn fusion_gradcheck(seed: u64) -> Result<GradCheck, String> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let fb = FusionBlock::new(&mut store, "fb", 3, 4, &mut r);
    let inputs: Vec<Tensor> = (0..3).map(|_| random_tensor(&[2, 4, 8, 12], &mut r)).collect();
    check_graph(&store, &inputs, seed, |g, v| fb.forward(g, v))
}

/// The decoder needs four halvings below its finest skip, so that skip is
/// 16×16 with 2 channels.
pub fn decoder_gradcheck(seed: u64) -> Result<GradCheck, String> {
    let mut r = rng(seed);
    let channels = [2, 3, 4, 5, 6];
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, "dec", channels, &mut r);
    let mut inputs = vec![random_tensor(&[1, channels[4], 1, 1], &mut r)];
    for level in (1..=4).rev() {
        let side = 1 << (5 - level);
        inputs.push(random_tensor(&[1, channels[level - 1], side, side], &mut r));
    }
    check_graph(&store, &inputs, seed, |g, v| dec.forward(g, &v[0], &v[1..]))
}

/// Checks `LossValue::grad` of `loss` against central differences in `p`.
pub fn loss_gradcheck<F>(seed: u64, n: usize, loss: F) -> Result<GradCheck, String>
where
    F: Fn(&[f64], &[u8], &[u8]) -> mustan::Result<LossValue>,
{
    let mut r = rng(seed);
    let p: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
    let y: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
    let ignore: Vec<u8> = (0..n).map(|_| r.random_bool(0.2) as u8).collect();
    let base = loss(&p, &y, &ignore).map_err(|e| e.to_string())?;
    let mut check = GradCheck::default();
    for i in 0..n {
        let mut q = p.clone();
        q[i] = p[i] + FD_STEP;
        let plus = loss(&q, &y, &ignore).map_err(|e| e.to_string())?.value;
        q[i] = p[i] - FD_STEP;
        let minus = loss(&q, &y, &ignore).map_err(|e| e.to_string())?.value;
        check.record(base.grad[i], (plus - minus) / (2.0 * FD_STEP));
    }
    Ok(check)
}

pub fn combined_loss_gradcheck(seed: u64) -> Result<GradCheck, String> {
    let cfg = LossConfig::default();
    loss_gradcheck(seed, 8 * 12, |p, y, i| combined_loss(p, y, i, &cfg))
}

/// Every module check of the gradient criterion, with per-module results.
pub fn module_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheck)>, String> {
    Ok(vec![
        ("frm", frm_gradcheck(seed)?),
        ("rlim", rlim_gradcheck(seed + 1)?),
        ("fusion", fusion_gradcheck(seed + 2)?),
        ("decoder", decoder_gradcheck(seed + 3)?),
        ("combined_loss", combined_loss_gradcheck(seed + 4)?),
    ])
}

pub fn total(checks: &[(&str, GradCheck)]) -> GradCheck {
    checks.iter().fold(GradCheck::default(), |acc, (_, c)| acc.merge(*c))
}

/// Per-pixel tally, the reference for `confusion_counts`.
pub fn brute_counts(pred: &[u8], target: &[u8], ignore: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if ignore[i] != 0 {
            continue;
        }
        match (pred[i] != 0, target[i] != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Varied scenes: every background, both lightings, jitter, 0–4 sprites from
/// 2 to 24 pixels, several frame sizes.
pub fn random_scene_specs(n: usize, seed: u64) -> Vec<SceneSpec> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let recipe = SceneRecipe {
                videos: 1,
                frames: r.random_range(1..4),
                size: [(32, 32), (64, 96), (32, 64)][i % 3],
                backgrounds: vec![Background::ALL[i % 4]],
                lighting: vec![if i % 2 == 0 { Lighting::Day } else { Lighting::Night }],
                camera_jitter: i % 3,
                sprites: (0, 4),
                sprite_size: (2, 24),
                camouflage: i % 5 == 0,
                seed: r.random(),
                ..SceneRecipe::default()
            };
            recipe.sample().expect("valid recipe").remove(0)
        })
        .collect()
}

/// Writes `recipe` as a toyset under `dir` and loads every clip at `hw`.
pub fn toy_samples(
    dir: &Path,
    recipe: &SceneRecipe,
    window: usize,
    hw: (usize, usize),
) -> mustan::Result<(DatasetManifest, Vec<ClipSample>)> {
    write_toyset(&recipe.sample()?, dir, false)?;
    let manifest = scan_simple(dir)?;
    let clips = build_clip_index(&manifest, window, 1)?;
    let samples = clips
        .iter()
        .map(|c| load_clip(&manifest, c, hw))
        .collect::<mustan::Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// The toyset of the overfit check: 2 videos of 4 frames, 8 clips.
pub fn overfit_recipe() -> SceneRecipe {
    SceneRecipe {
        videos: 2,
        frames: 4,
        seed: 1,
        ..SceneRecipe::default()
    }
}

pub const OVERFIT_HW: (usize, usize) = (64, 96);
pub const OVERFIT_LR: f64 = 1e-3;
pub const OVERFIT_EVAL_EVERY: usize = 10;

#[derive(Clone, Debug)]
pub struct OverfitRun {
    /// `(steps taken, training F1)` at every evaluation.
    pub f1_trace: Vec<(usize, f64)>,
    pub steps_to_target: Option<usize>,
    pub first_loss: f64,
    pub last_loss: f64,
    pub elapsed: Duration,
}

/// Full-batch training on the overfit toyset until the harness F1 reaches
/// `target` or `max_steps` updates were taken.
pub fn overfit(arch: Arch, max_steps: usize, target: f64, dir: &Path) -> mustan::Result<OverfitRun> {
    let cfg = ModelConfig {
        arch,
        window: 3,
        width_factor: 0.125,
        ..ModelConfig::default()
    };
    let model = Model::build(&cfg, 0)?;
    let (manifest, samples) = toy_samples(dir, &overfit_recipe(), model.window_len(), OVERFIT_HW)?;
    let batch: Vec<&ClipSample> = samples.iter().collect();
    let opts = EvalOptions {
        resolution: OVERFIT_HW,
        ..EvalOptions::default()
    };
    let mut trainer = Trainer::new(model, LossConfig::default());
    let start = Instant::now();
    let mut run = OverfitRun {
        f1_trace: Vec::new(),
        steps_to_target: None,
        first_loss: f64::NAN,
        last_loss: f64::NAN,
        elapsed: Duration::ZERO,
    };
    for step in 1..=max_steps {
        let stats = trainer.step(&batch, OVERFIT_LR)?;
        if step == 1 {
            run.first_loss = stats.loss;
        }
        run.last_loss = stats.loss;
        if step % OVERFIT_EVAL_EVERY == 0 || step == max_steps {
            let f1 = evaluate(&trainer.model, &manifest, &opts)?.overall.f1;
            run.f1_trace.push((step, f1));
            if f1 >= target {
                run.steps_to_target = Some(step);
                break;
            }
        }
    }
    run.elapsed = start.elapsed();
    Ok(run)
}
