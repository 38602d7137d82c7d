//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mustan::dataio::{decode_cdnet_label, scan_simple, DatasetManifest};
use mustan::metrics::{confusion_counts, metrics_from_counts, ConfusionCounts, Metrics};
use mustan::models::{Arch, Model, ModelConfig};
use mustan::nnblocks::{channel_schedule, BlockConfig, Encoder, BASE_CHANNELS};
use mustan::objective::{bce_loss, tversky_loss, LossConfig};
use mustan::toygen::{generate_toy_video, write_toyset, SceneRecipe};
use mustan::trainer::{evaluate, lr_at_epoch, EvalOptions, TrainConfig};
use mustan::Tensor;
use mustan_autograd::{Graph, ParamStore};
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let checks = support::module_gradchecks(2024)?;
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .map(|(name, c)| format!("{name} {:.1e}", c.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    for (name, c) in &checks {
        check(c.passes(), || format!("{name}: max relative error {:e} > {:e}", c.max_rel_err, support::GRAD_REL_TOL))?;
    }
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let n = support::total(&checks).checked;
    Ok(format!("{n} derivatives, worst relative error per block: {worst}; {elapsed:.2?}"))
}

fn oracle_metrics(c: &ConfusionCounts) -> Metrics {
    let r = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Metrics {
        precision: r(c.tp, c.tp + c.fp),
        recall: r(c.tp, c.tp + c.fn_),
        specificity: r(c.tn, c.tn + c.fp),
        f1: r(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = support::rng(7);
    let mut identity_checked = 0;
    for trial in 0..1000 {
        let density = [0.0, 0.05, 0.5, 0.95, 1.0][trial % 5];
        let mut bits = |p: f64| -> Vec<u8> { (0..256).map(|_| u8::from(rng.random_bool(p))).collect() };
        let (pred, target, ignore) = (bits(density), bits(0.3), bits(0.1));
        let got = confusion_counts(&pred, &target, &ignore).map_err(err)?;
        let want = support::brute_counts(&pred, &target, &ignore);
        check(got == want, || format!("trial {trial}: counts {got:?} vs oracle {want:?}"))?;
        let m = metrics_from_counts(&got);
        check(m == oracle_metrics(&want), || format!("trial {trial}: {m:?}"))?;
        let den = 2 * got.tp + got.fp + got.fn_;
        if den > 0 {
            identity_checked += 1;
            check(m.f1 == (2 * got.tp) as f64 / den as f64, || format!("trial {trial}: F1 identity"))?;
        }
    }
    Ok(format!("1000 random 16×16 triples exact; F1 identity checked on {identity_checked}"))
}

fn soft_dice(p: &[f64], y: &[u8], ignore: &[u8], eps: f64) -> f64 {
    let (mut inter, mut sum) = (0.0, 0.0);
    for i in 0..p.len() {
        if ignore[i] == 0 {
            inter += p[i] * f64::from(y[i]);
            sum += p[i] + f64::from(y[i]);
        }
    }
    (2.0 * inter + 2.0 * eps) / (sum + 2.0 * eps)
}

fn loss_anchors() -> Outcome {
    let p = [1.0, 1.0, 0.0, 0.0];
    let y = [1u8, 0, 1, 0];
    // The anchor is exact in the ε → 0 limit; 1e-300 vanishes next to the
    // unit counts.
    let limit = LossConfig {
        epsilon: 1e-300,
        ..LossConfig::default()
    };
    let anchor = tversky_loss(&p, &y, &[0; 4], &limit).map_err(err)?.value;
    check(anchor == 0.5, || format!("Tversky anchor {anchor:?}"))?;
    let default = tversky_loss(&p, &y, &[0; 4], &LossConfig::default()).map_err(err)?.value;
    let bce = bce_loss(&[0.5], &[1], &[0], 1e-6).map_err(err)?.value;
    check((bce - std::f64::consts::LN_2).abs() <= 1e-9, || format!("BCE {bce}"))?;
    let cfg = LossConfig::default();
    let mut rng = support::rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..300);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let ig: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.1))).collect();
        let l = tversky_loss(&p, &y, &ig, &cfg).map_err(err)?;
        if !l.degenerate {
            worst = worst.max((l.value - (1.0 - soft_dice(&p, &y, &ig, cfg.epsilon))).abs());
        }
    }
    check(worst <= 1e-9, || format!("Tversky vs 1 - soft Dice differs by {worst:e}"))?;
    Ok(format!(
        "Tversky anchor = 0.5 exactly (ε = 1e-300; {default:.9} at ε = 1e-6), BCE = ln 2 ± {:.0e}, |Tversky − (1 − Dice)| ≤ {worst:.0e}",
        (bce - std::f64::consts::LN_2).abs()
    ))
}

fn pyramid_shapes(width: f64, hw: (usize, usize)) -> Result<Vec<Vec<usize>>, String> {
    let mut store = ParamStore::new();
    let cfg = BlockConfig {
        width_factor: width,
        in_channels: 3,
        window: 1,
        use_pretrained_stem: false,
    };
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut support::rng(0)).map_err(err)?;
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::full(&[1, 3, hw.0, hw.1], 0.5));
    let p = enc.forward(&mut g, &x).map_err(err)?;
    Ok(p.levels.iter().map(|v| v.shape().to_vec()).collect())
}

fn shape_invariants() -> Outcome {
    let mut notes = Vec::new();
    for (width, hw) in [(0.125, (64, 96)), (1.0, (320, 480))] {
        let schedule = channel_schedule(width).map_err(err)?;
        let expected: Vec<Vec<usize>> = (0..5)
            .map(|l| vec![1, (BASE_CHANNELS[l] as f64 * width) as usize, hw.0 >> (l + 1), hw.1 >> (l + 1)])
            .collect();
        check(schedule.iter().zip(&expected).all(|(c, e)| *c == e[1]), || format!("schedule {schedule:?}"))?;
        let got = pyramid_shapes(width, hw)?;
        check(got == expected, || format!("w={width}: pyramid {got:?}, expected {expected:?}"))?;
        for arch in [Arch::Mustan1, Arch::Mustan2] {
            let cfg = ModelConfig {
                arch,
                window: 3,
                width_factor: width,
                ..ModelConfig::default()
            };
            let model = Model::build(&cfg, 1).map_err(err)?;
            let mut rng = support::rng(5);
            let frames: Vec<Tensor> = (0..3)
                .map(|_| Tensor::from_fn(&[3, hw.0, hw.1], |_| rng.random_range(0.0..1.0)))
                .collect();
            let start = Instant::now();
            let pred = model.predict_windows(&[&frames]).map_err(err)?.remove(0);
            check((pred.height, pred.width, pred.prob.len()) == (hw.0, hw.1, hw.0 * hw.1), || {
                format!("{arch} w={width}: output {}×{}", pred.height, pred.width)
            })?;
            check(pred.prob.iter().all(|p| (0.0..=1.0).contains(p)), || format!("{arch}: value outside [0, 1]"))?;
            notes.push(format!("{arch} w={width} {}×{} in {:.1?}", hw.0, hw.1, start.elapsed()));
        }
    }
    Ok(format!("pyramids match w·[64,128,256,512,1024]; {}", notes.join(", ")))
}

fn overfit_sanity() -> Outcome {
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for arch in [Arch::Mustan2, Arch::Mustan1] {
        let dir = tempfile::tempdir().map_err(err)?;
        let run = support::overfit(arch, 200, 0.95, dir.path()).map_err(err)?;
        let best = run.f1_trace.iter().map(|&(_, f)| f).fold(0.0, f64::max);
        let note = match run.steps_to_target {
            Some(s) => format!(
                "{arch} F1 {best:.4} after {s} steps, loss {:.3} → {:.3}, {:.0?}",
                run.first_loss, run.last_loss, run.elapsed
            ),
            None => format!("{arch} best F1 {best:.4} in 200 steps"),
        };
        if run.steps_to_target.is_none() || run.elapsed >= Duration::from_secs(300) {
            failures.push(note.clone());
        }
        notes.push(note);
    }
    if failures.is_empty() {
        Ok(format!("w=1/8, T=3, 8 clips, lr {:e}: {}", support::OVERFIT_LR, notes.join("; ")))
    } else {
        Err(notes.join("; "))
    }
}

fn architecture_ordering() -> Outcome {
    let count = |arch, share| -> Result<usize, String> {
        let cfg = ModelConfig {
            arch,
            window: 3,
            width_factor: 1.0,
            share_mustan2_encoders: share,
            ..ModelConfig::default()
        };
        Ok(Model::build(&cfg, 0).map_err(err)?.count_parameters())
    };
    let m1 = count(Arch::Mustan1, true)?;
    let m2 = count(Arch::Mustan2, true)?;
    check(m1 > m2, || format!("MUSTAN1 {m1} ≤ MUSTAN2-shared {m2}"))?;
    Ok(format!("MUSTAN1 {m1} > MUSTAN2-shared {m2} (w=1, T=3)"))
}

fn schedule_check() -> Outcome {
    let cfg = TrainConfig::default();
    for epoch in 0..40 {
        let want = if epoch < 20 { 1e-4 } else { 1e-5 };
        let got = lr_at_epoch(&cfg, epoch);
        check(got == want, || format!("epoch {epoch}: {got:e}"))?;
    }
    Ok("epochs 0–19 → 1e-4, 20–39 → 1e-5 exactly".into())
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run_cli(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mustan"))
        .current_dir(cwd)
        .arg("-q")
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("mustan {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<Value, String> {
    serde_json::from_str(&fs::read_to_string(path).map_err(err)?).map_err(err)
}

fn ood_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let cfg_dir = repo_path("configs/ood_reference");
    let cfg = |name: &str| cfg_dir.join(name).display().to_string();
    run_cli(d, &["--config", &cfg("toyset_a.json"), "generate", "-o", "A"])?;
    run_cli(d, &["--config", &cfg("toyset_b.json"), "generate", "-o", "B"])?;
    let train_cfg = cfg("train.json");
    let mut ood = Vec::new();
    let mut notes = Vec::new();
    for arch in ["mustan2", "unet_baseline"] {
        run_cli(d, &["--config", &train_cfg, "train", "--data", "A", "--arch", arch, "--run-id", arch])?;
        let ckpt = format!("runs/{arch}/checkpoints/best.ckpt");
        run_cli(d, &["evaluate", "--checkpoint", &ckpt, "--data", "A"])?;
        run_cli(d, &["evaluate", "--checkpoint", &ckpt, "--data", "B", "--ood"])?;
        let record = read_json(&d.join("runs").join(arch).join("run.json"))?;
        let reports = record["reports"].as_array().cloned().unwrap_or_default();
        let labels: Vec<&str> = reports.iter().filter_map(|r| r["label"].as_str()).collect();
        check(labels == ["in-domain", "ood"], || format!("{arch}: report labels {labels:?}"))?;
        for r in &reports {
            let label = r["label"].as_str().unwrap_or_default();
            let csv = fs::read_to_string(r["csv"].as_str().map(|p| d.join(p)).unwrap_or_default()).map_err(err)?;
            check(csv.lines().skip(1).all(|l| l.starts_with(&format!("{label},"))), || {
                format!("{arch}: {label} CSV rows are not labelled")
            })?;
        }
        let f1 = |i: usize| reports[i]["overall"]["f1"].as_f64().unwrap_or(f64::NAN);
        notes.push(format!("{arch} in-domain {:.4} / OOD {:.4}", f1(0), f1(1)));
        ood.push(f1(1));
    }
    check(ood[0] >= ood[1], || format!("MUSTAN2 OOD F1 below the baseline: {}", notes.join(", ")))?;
    Ok(notes.join(", "))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    run_cli(d, &["generate", "-o", "toy", "--videos", "2", "--frames", "6", "--size", "32x64", "--seed", "4"])?;
    let args = ["train", "--data", "toy", "--width", "0.125", "--resolution", "32x64", "--epochs", "3", "--batch-size", "4"];
    for id in ["first", "second"] {
        let mut a = args.to_vec();
        a.extend(["--lr", "1e-3", "--seed", "11", "--run-id", id]);
        run_cli(d, &a)?;
    }
    let log = |id: &str| -> Result<Vec<Value>, String> {
        fs::read_to_string(d.join("runs").join(id).join("log.jsonl"))
            .map_err(err)?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(err))
            .collect()
    };
    let (a, b) = (log("first")?, log("second")?);
    check(a.len() == 3 && a.len() == b.len(), || format!("{} vs {} records", a.len(), b.len()))?;
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(&b) {
        check(ra["epoch"] == rb["epoch"] && ra["step"] == rb["step"] && ra["lr"] == rb["lr"], || {
            format!("records differ: {ra} vs {rb}")
        })?;
        for key in ["loss", "val_f1"] {
            let (x, y) = (ra[key].as_f64().unwrap_or(f64::NAN), rb[key].as_f64().unwrap_or(f64::NAN));
            worst = worst.max((x - y).abs() / x.abs().max(f64::MIN_POSITIVE));
        }
    }
    check(worst <= 5e-7, || format!("logged values differ by relative {worst:e}"))?;

    let cfg: TrainConfig = serde_json::from_value(read_json(&d.join("runs/first/config.json"))?).map_err(err)?;
    let manifest: DatasetManifest = scan_simple(&d.join("toy")).map_err(err)?;
    let opts = EvalOptions {
        resolution: cfg.resolution,
        ..EvalOptions::default()
    };
    let ckpt = d.join("runs/first/checkpoints/best.ckpt");
    let model = Model::load_checkpoint(&ckpt).map_err(err)?;
    let before = evaluate(&model, &manifest, &opts).map_err(err)?;
    let copy = d.join("copy.ckpt");
    model.save_checkpoint(&copy).map_err(err)?;
    let after = evaluate(&Model::load_checkpoint(&copy).map_err(err)?, &manifest, &opts).map_err(err)?;
    check(before == after, || "evaluation changed across a checkpoint round trip".into())?;
    Ok(format!(
        "3-epoch logs identical (max relative difference {worst:.0e}); round-tripped checkpoint evaluates identically (F1 {:.4})",
        before.overall.f1
    ))
}

fn data_pipeline() -> Outcome {
    let values = [0u8, 50, 85, 170, 255];
    let img = image::GrayImage::from_fn(5, 3, |x, _| image::Luma([values[x as usize]]));
    let (target, ignore) = decode_cdnet_label(&img).map_err(err)?;
    for (i, (t, ig)) in target.iter().zip(&ignore).enumerate() {
        let v = values[i % 5];
        let want = match v {
            255 => (1, 0),
            0 | 50 => (0, 0),
            _ => (0, 1),
        };
        check((*t, *ig) == want, || format!("label {v} decoded as {:?}", (t, ig)))?;
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let recipe = SceneRecipe {
        videos: 2,
        frames: 4,
        seed: 8,
        ..SceneRecipe::default()
    };
    let specs = recipe.sample().map_err(err)?;
    write_toyset(&specs, dir.path(), false).map_err(err)?;
    let manifest = scan_simple(dir.path()).map_err(err)?;
    check(manifest.videos.len() == 2, || "scan found a different video count".into())?;
    for (entry, spec) in manifest.videos.iter().zip(&specs) {
        let video = generate_toy_video(spec).map_err(err)?;
        for k in 0..spec.num_frames {
            let frame = image::open(&entry.frame_paths[k]).map_err(err)?.to_rgb8();
            let mask_path = entry.annotation_paths[k].as_ref().ok_or("missing mask")?;
            let mask = image::open(mask_path).map_err(err)?.to_luma8();
            check(frame == video.frames[k] && mask == video.masks[k], || {
                format!("{} frame {k} differs after the round trip", entry.video_id)
            })?;
        }
    }

    let mut frames = 0;
    for spec in support::random_scene_specs(100, 10) {
        let video = generate_toy_video(&spec).map_err(err)?;
        for (mask, inst) in video.masks.iter().zip(&video.instances) {
            frames += 1;
            let same = mask.pixels().zip(inst.pixels()).all(|(m, i)| (m.0[0] == 255) == (i.0[0] > 0) && m.0[0] % 255 == 0);
            check(same, || "mask disagrees with instance map".into())?;
        }
    }
    Ok(format!("labels {{0,50,85,170,255}} decode exactly; toyset round trip exact; masks = instances > 0 on {frames} frames of 100 scenes"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracle", metric_oracle),
        ("loss anchors", loss_anchors),
        ("shape/range invariants", shape_invariants),
        ("overfit sanity", overfit_sanity),
        ("architecture ordering", architecture_ordering),
        ("schedule", schedule_check),
        ("OOD harness", ood_harness),
        ("determinism", determinism),
        ("data-pipeline bit-exactness", data_pipeline),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}. {name} ({secs:.1} s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {n:>2}. {name} ({secs:.1} s): {reason}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
