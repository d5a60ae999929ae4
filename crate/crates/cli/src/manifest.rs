//! Run manifests: one `manifest.json` per successful run, recording what ran,
//! with which resolved configuration and seed, on which inputs, and what it
//! produced.

use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use datforecast::{DatError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Full argument vector for the record.
    pub argv: Vec<String>,
    /// SHA-256 of the canonical TOML rendering of the resolved config.
    pub config_sha256: String,
    /// Effective seed of the stage.
    pub seed: u64,
    /// Paths consumed (cohorts, checkpoints).
    pub inputs: Vec<String>,
    /// Paths produced under the output directory.
    pub outputs: Vec<String>,
    pub started_utc: String,
    pub finished_utc: String,
    pub duration_seconds: f64,
    /// `git describe --always --dirty --tags`, or "unknown" outside a repo.
    pub git_describe: String,
}

pub struct RunContext {
    started: SystemTime,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunContext {
    pub fn new(command: &str, config_sha256: String, seed: u64) -> Self {
        RunContext {
            started: SystemTime::now(),
            command: command.to_string(),
            config_sha256,
            seed,
            inputs: vec![],
            outputs: vec![],
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes `<out>/manifest.json`; returns its path.
    pub fn finish(self, out_dir: &Path) -> Result<PathBuf> {
        let finished = SystemTime::now();
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            config_sha256: self.config_sha256,
            seed: self.seed,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            started_utc: iso8601(self.started),
            finished_utc: iso8601(finished),
            duration_seconds: finished
                .duration_since(self.started)
                .unwrap_or(Duration::ZERO)
                .as_secs_f64(),
            git_describe: git_describe(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| DatError::internal(format!("manifest encode: {e}")))?;
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// UTC ISO-8601 with second precision, via the days-from-civil inverse.
fn iso8601(t: SystemTime) -> String {
    let secs = t
        .duration_since(UNIX_EPOCH)
        .unwrap_or(Duration::ZERO)
        .as_secs() as i64;
    let (days, rem) = (secs.div_euclid(86_400), secs.rem_euclid(86_400));
    let (h, m, s) = (rem / 3600, (rem % 3600) / 60, rem % 60);
    let (y, mo, d) = civil_from_days(days);
    format!("{y:04}-{mo:02}-{d:02}T{h:02}:{m:02}:{s:02}Z")
}

/// Howard Hinnant's days-to-civil-date algorithm.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = (if mp < 10 { mp + 3 } else { mp - 9 }) as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}
