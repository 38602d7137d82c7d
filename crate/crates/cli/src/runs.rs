//! Run directories: `<runs_dir>/<run_id>/{config.json, log.jsonl,
//! checkpoints/, reports/, run.json}`.

use std::fs;
use std::path::{Path, PathBuf};

use mustan::metrics::Metrics;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub label: String,
    pub data: PathBuf,
    pub csv: PathBuf,
    pub table: PathBuf,
    pub created: String,
    pub overall: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub arch: String,
    pub command: Vec<String>,
    pub data: PathBuf,
    pub layout: String,
    pub config: PathBuf,
    pub created: String,
    pub finished: Option<String>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub parameter_count: usize,
    pub reports: Vec<ReportEntry>,
}

pub fn now() -> String {
    chrono::Local::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(mustan::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl RunRecord {
    pub fn read(run_dir: &Path) -> CliResult<Self> {
        let path = run_dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Message(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, run_dir: &Path) -> CliResult<()> {
        let path = run_dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).map_err(mustan::Error::from)?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

/// Creates `<runs_dir>/<run_id>`, refusing ids that already exist.
pub fn create_run_dir(runs_dir: &Path, run_id: &str) -> CliResult<PathBuf> {
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(CliError::Message(format!("invalid run id {run_id:?}")));
    }
    let dir = runs_dir.join(run_id);
    if dir.exists() {
        return Err(CliError::Message(format!(
            "run {run_id} already exists in {}; runs are never overwritten",
            runs_dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// The run directory owning `checkpoint` (`<run>/checkpoints/x.ckpt`), if any.
pub fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    let ckpt_dir = checkpoint.parent()?;
    if ckpt_dir.file_name()? != "checkpoints" {
        return None;
    }
    let run = ckpt_dir.parent()?;
    run.join(RUN_FILE).is_file().then(|| run.to_path_buf())
}

/// All run directories with a readable `run.json`, sorted by id; malformed
/// ones are skipped with a warning.
pub fn list_runs(runs_dir: &Path) -> Vec<(PathBuf, RunRecord)> {
    let Ok(entries) = fs::read_dir(runs_dir) else {
        return Vec::new();
    };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.into_iter()
        .filter_map(|d| match RunRecord::read(&d) {
            Ok(r) => Some((d, r)),
            Err(e) => {
                log::warn!("skipping {}: {e}", d.display());
                None
            }
        })
        .collect()
}
