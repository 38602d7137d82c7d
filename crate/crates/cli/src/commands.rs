use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use mustan::dataio::{self, causal_window, DatasetManifest, FrameList};
use mustan::metrics::OverallMode;
use mustan::models::Model;
use mustan::toygen::{write_toyset, SceneRecipe};
use mustan::trainer::{self, EvalOptions, TrainConfig};
use mustan::Tensor;
use serde::de::DeserializeOwned;

use crate::runs::{self, ReportEntry, RunRecord, CONFIG_FILE};
use crate::{Cli, CliError, CliResult, Command, DataArgs, EvaluateArgs, GenerateArgs, LayoutArg, PredictArgs, ReportArgs, TrainArgs};

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Report(a) => report(cli, a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(mustan::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Message(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let mut recipe: SceneRecipe = match &cli.config {
        Some(p) => read_json(p)?,
        None => SceneRecipe::default(),
    };
    if let Some(v) = a.videos {
        recipe.videos = v;
    }
    if let Some(v) = a.frames {
        recipe.frames = v;
    }
    if let Some(v) = a.size {
        recipe.size = v;
    }
    if !a.backgrounds.is_empty() {
        recipe.backgrounds = a.backgrounds.clone();
    }
    if !a.lighting.is_empty() {
        recipe.lighting = a.lighting.clone();
    }
    if let Some(v) = a.jitter {
        recipe.camera_jitter = v;
    }
    if let Some(v) = a.sprites {
        recipe.sprites = v;
    }
    if let Some(v) = a.sprite_size {
        recipe.sprite_size = v;
    }
    recipe.camouflage |= a.camouflage;
    if let Some(s) = cli.seed {
        recipe.seed = s;
    }
    let specs = recipe.sample()?;
    let manifest = write_toyset(&specs, &a.out, a.overwrite)?;
    write_file(
        &a.out.join("recipe.json"),
        serde_json::to_string_pretty(&recipe).map_err(mustan::Error::from)?,
    )?;
    log::info!("wrote {} videos of {} frames", specs.len(), recipe.frames);
    println!("{}", manifest.display());
    Ok(())
}

fn layout_name(layout: LayoutArg) -> &'static str {
    match layout {
        LayoutArg::Auto => "auto",
        LayoutArg::Cdnet => "cdnet",
        LayoutArg::Simple => "simple",
    }
}

fn scan(d: &DataArgs) -> CliResult<DatasetManifest> {
    if !d.data.is_dir() {
        return Err(CliError::Message(format!("dataset directory {} does not exist", d.data.display())));
    }
    let m = match d.layout {
        LayoutArg::Auto => dataio::scan_auto(&d.data)?,
        LayoutArg::Cdnet => dataio::scan_cdnet(&d.data)?,
        LayoutArg::Simple => dataio::scan_simple(&d.data)?,
    };
    if m.videos.is_empty() {
        return Err(CliError::Message(format!("no videos found under {}", d.data.display())));
    }
    Ok(m)
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.arch {
        cfg.model.arch = v;
    }
    if let Some(v) = a.window {
        cfg.model.window = v;
    }
    if let Some(v) = a.width {
        cfg.model.width_factor = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.split_ratio {
        cfg.split_ratio = v;
    }
    if let Some(v) = a.frame_stride {
        cfg.frame_stride = v;
    }
    if a.distinct_encoders {
        cfg.model.share_mustan2_encoders = false;
    }
    if let Some(p) = &a.pretrained_weights {
        cfg.pretrained_weights = Some(p.clone());
        cfg.model.pretrained = true;
    }
    if let Some(p) = &a.data.frame_list {
        cfg.frame_list = Some(p.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.model = cfg.model.clone().normalized();
    cfg.validate()?;
    let manifest = scan(&a.data)?;

    let run_id = a
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-{}", cfg.model.arch, chrono::Local::now().format("%Y%m%d-%H%M%S")));
    let run_dir = runs::create_run_dir(&cli.runs_dir, &run_id)?;
    write_file(
        &run_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&cfg).map_err(mustan::Error::from)?,
    )?;
    let mut record = RunRecord {
        run_id: run_id.clone(),
        arch: cfg.model.arch.to_string(),
        command: std::env::args().collect(),
        data: a.data.data.clone(),
        layout: layout_name(a.data.layout).into(),
        config: CONFIG_FILE.into(),
        created: runs::now(),
        finished: None,
        best_checkpoint: None,
        last_checkpoint: None,
        parameter_count: Model::build(&cfg.model, cfg.seed)?.count_parameters(),
        reports: Vec::new(),
    };
    record.write(&run_dir)?;

    let outcome = trainer::train(&cfg, &manifest, &run_dir)?;
    record.finished = Some(runs::now());
    record.best_checkpoint = Some(outcome.best_checkpoint.clone());
    record.last_checkpoint = Some(outcome.last_checkpoint.clone());
    record.write(&run_dir)?;
    let last = outcome.log.last();
    println!(
        "run {run_id}: {} epochs, {} steps, final loss {:.6}, best checkpoint {}",
        outcome.log.len(),
        last.map_or(0, |r| r.step),
        last.map_or(f64::NAN, |r| r.loss),
        outcome.best_checkpoint.display()
    );
    Ok(())
}

/// Resolution and stride recorded for the run that owns `checkpoint`.
fn run_defaults(checkpoint: &Path) -> CliResult<Option<(PathBuf, TrainConfig)>> {
    match runs::run_dir_of(checkpoint) {
        Some(dir) => {
            let cfg: TrainConfig = read_json(&dir.join(CONFIG_FILE))?;
            Ok(Some((dir, cfg)))
        }
        None => Ok(None),
    }
}

fn unique_stem(dir: &Path, base: &str) -> String {
    let taken = |s: &str| dir.join(format!("{s}.csv")).exists() || dir.join(format!("{s}.txt")).exists();
    if !taken(base) {
        return base.to_string();
    }
    (2..)
        .map(|k| format!("{base}-{k}"))
        .find(|s| !taken(s))
        .expect("unbounded suffix search")
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let run = run_defaults(&a.checkpoint)?;
    let model = Model::load_checkpoint(&a.checkpoint)?;
    let resolution = a
        .resolution
        .or(run.as_ref().map(|(_, c)| c.resolution))
        .unwrap_or((320, 480));
    let frame_stride = a.frame_stride.or(run.as_ref().map(|(_, c)| c.frame_stride)).unwrap_or(1);
    let label = if a.ood { "ood" } else { "in-domain" };
    let manifest = scan(&a.data)?;
    log::info!(
        "{} evaluation of {} on {} ({} videos)",
        if a.ood { "out-of-domain" } else { "in-domain" },
        a.checkpoint.display(),
        a.data.data.display(),
        manifest.videos.len()
    );
    let opts = EvalOptions {
        resolution,
        frame_stride,
        batch_size: a.batch_size,
        frame_list: a.data.frame_list.as_deref().map(FrameList::read).transpose()?,
        overall_mode: if a.video_mean {
            OverallMode::VideoMean
        } else {
            OverallMode::CategoryMean
        },
        label: label.into(),
    };
    let report = trainer::evaluate(&model, &manifest, &opts)?;

    let out_dir = match (&a.out, &run) {
        (Some(o), _) => o.clone(),
        (None, Some((dir, _))) => dir.join("reports"),
        (None, None) => {
            return Err(CliError::Message(
                "--out is required when the checkpoint is not inside a run directory".into(),
            ))
        }
    };
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let stem = unique_stem(&out_dir, a.name.as_deref().unwrap_or(label));
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let table_path = out_dir.join(format!("{stem}.txt"));
    let mut csv_buf = Vec::new();
    report.write_csv(&mut csv_buf)?;
    write_file(&csv_path, csv_buf)?;
    let table = report.render_table();
    write_file(&table_path, &table)?;
    print!("{table}");

    if let Some((dir, _)) = &run {
        let mut record = RunRecord::read(dir)?;
        record.reports.push(ReportEntry {
            name: stem,
            label: label.into(),
            data: a.data.data.clone(),
            csv: csv_path,
            table: table_path,
            created: runs::now(),
            overall: report.overall,
        });
        record.write(dir)?;
    }
    Ok(())
}

/// 16-bit quantisation of a probability.
fn quantize(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * f64::from(u16::MAX)).round() as u16
}

/// Mask value for a quantised probability, so re-thresholding the saved
/// probability file reproduces the mask file exactly.
fn mask_value(q: u16, threshold: f64) -> u8 {
    if f64::from(q) / f64::from(u16::MAX) >= threshold {
        255
    } else {
        0
    }
}

fn save_image(img: impl Into<image::DynamicImage>, path: &Path) -> CliResult<()> {
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Message(format!("cannot write {}: {e}", path.display())))
}

fn predict(a: &PredictArgs) -> CliResult<()> {
    let run = run_defaults(&a.checkpoint)?;
    let model = Model::load_checkpoint(&a.checkpoint)?;
    let (h, w) = a
        .resolution
        .or(run.as_ref().map(|(_, c)| c.resolution))
        .unwrap_or((320, 480));
    let stride = a.frame_stride.or(run.as_ref().map(|(_, c)| c.frame_stride)).unwrap_or(1);
    mustan::nnblocks::check_spatial(h, w)?;
    let frames = dataio::video_frame_paths(&a.video)?;
    let prob_dir = a.out.join("prob");
    let mask_dir = a.out.join("mask");
    for d in [&prob_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let t = model.window_len();
    let threshold = model.config().threshold;
    let mut cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    let indices: Vec<usize> = (1..=frames.len()).collect();
    for chunk in indices.chunks(a.batch_size.max(1)) {
        let windows: Vec<Vec<usize>> = chunk.iter().map(|&k| causal_window(k, t, stride)).collect();
        let oldest = windows.iter().flatten().copied().min().unwrap_or(1);
        cache.retain(|&k, _| k >= oldest);
        for &k in windows.iter().flatten() {
            if let Entry::Vacant(slot) = cache.entry(k) {
                slot.insert(dataio::load_frame(&frames[k - 1], h, w)?);
            }
        }
        let stacked: Vec<Vec<Tensor>> = windows
            .iter()
            .map(|win| win.iter().map(|k| cache[k].clone()).collect())
            .collect();
        let refs: Vec<&[Tensor]> = stacked.iter().map(Vec::as_slice).collect();
        for (&k, pred) in chunk.iter().zip(model.predict_windows(&refs)?) {
            let q: Vec<u16> = pred.prob.iter().map(|&p| quantize(p)).collect();
            let m: Vec<u8> = q.iter().map(|&v| mask_value(v, threshold)).collect();
            let name = format!(
                "{}.png",
                frames[k - 1].file_stem().map_or_else(|| format!("{k:06}"), |s| s.to_string_lossy().into_owned())
            );
            let prob_img: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w as u32, h as u32, q).expect("buffer matches size");
            save_image(prob_img, &prob_dir.join(&name))?;
            let mask_img = GrayImage::from_raw(w as u32, h as u32, m).expect("buffer matches size");
            save_image(mask_img, &mask_dir.join(&name))?;
        }
    }
    println!(
        "wrote {n} probability maps to {} and {n} masks to {}",
        prob_dir.display(),
        mask_dir.display(),
        n = frames.len()
    );
    Ok(())
}

struct ReportRow {
    run: String,
    arch: String,
    report: String,
    metrics: Option<mustan::metrics::Metrics>,
    params: usize,
}

fn report(cli: &Cli, a: &ReportArgs) -> CliResult<()> {
    let mut runs = runs::list_runs(&cli.runs_dir);
    if !a.runs.is_empty() {
        for id in &a.runs {
            if !runs.iter().any(|(_, r)| &r.run_id == id) {
                log::warn!("run {id} not found in {}", cli.runs_dir.display());
            }
        }
        runs.retain(|(_, r)| a.runs.contains(&r.run_id));
    }
    if runs.is_empty() {
        return Err(CliError::Message(format!("no runs found in {}", cli.runs_dir.display())));
    }
    let mut rows = Vec::new();
    for (_, r) in &runs {
        if r.reports.is_empty() {
            rows.push(ReportRow {
                run: r.run_id.clone(),
                arch: r.arch.clone(),
                report: "-".into(),
                metrics: None,
                params: r.parameter_count,
            });
        }
        for rep in &r.reports {
            rows.push(ReportRow {
                run: r.run_id.clone(),
                arch: r.arch.clone(),
                report: rep.name.clone(),
                metrics: Some(rep.overall),
                params: r.parameter_count,
            });
        }
    }
    let run_w = rows.iter().map(|r| r.run.len()).chain([3]).max().unwrap_or(3);
    let arch_w = rows.iter().map(|r| r.arch.len()).chain([4]).max().unwrap_or(4);
    let rep_w = rows.iter().map(|r| r.report.len()).chain([6]).max().unwrap_or(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<run_w$} | {:<arch_w$} | {:<rep_w$} | {:>8} | {:>9} | {:>8} | {:>11} | {:>12}",
        "Run", "Arch", "Report", "F1", "Precision", "Recall", "Specificity", "Parameters"
    );
    let _ = writeln!(s, "{}", "-".repeat(run_w + arch_w + rep_w + 74));
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for r in &rows {
        let m = r.metrics;
        let _ = writeln!(
            s,
            "{:<run_w$} | {:<arch_w$} | {:<rep_w$} | {:>8} | {:>9} | {:>8} | {:>11} | {:>12}",
            r.run,
            r.arch,
            r.report,
            fmt(m.map(|m| m.f1)),
            fmt(m.map(|m| m.precision)),
            fmt(m.map(|m| m.recall)),
            fmt(m.map(|m| m.specificity)),
            r.params
        );
    }
    print!("{s}");
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path).map_err(mustan::Error::from)?;
        w.write_record(["run", "arch", "report", "f1", "precision", "recall", "specificity", "parameters"])
            .map_err(mustan::Error::from)?;
        for r in &rows {
            let m = r.metrics;
            let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
            w.write_record([
                r.run.clone(),
                r.arch.clone(),
                r.report.clone(),
                cell(m.map(|m| m.f1)),
                cell(m.map(|m| m.precision)),
                cell(m.map(|m| m.recall)),
                cell(m.map(|m| m.specificity)),
                r.params.to_string(),
            ])
            .map_err(mustan::Error::from)?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
