//! Run directories, atomic file writes and the JSON run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::CliError;

pub const LATEST_POINTER: &str = "latest";

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Comma-separated table with a header line and LF endings.
pub struct CsvTable {
    text: String,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        CsvTable { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:e}").expect("writing to a String cannot fail");
    s
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub struct RunDir {
    pub path: PathBuf,
    parent: Option<PathBuf>,
    files: BTreeMap<String, String>,
}

/// SHA-256 of the canonical JSON of the settings and subcommand arguments.
pub fn config_hash(resolved: &Resolved, args: &serde_json::Value) -> String {
    let body = serde_json::json!({ "settings": resolved, "args": args });
    let digest = Sha256::digest(serde_json::to_vec(&body).expect("settings serialize"));
    hex::encode(&digest[..6])
}

impl RunDir {
    pub fn create(
        resolved: &Resolved,
        kind: &str,
        args: &serde_json::Value,
    ) -> Result<Self, CliError> {
        let (path, parent) = match &resolved.run_dir {
            Some(p) => (p.clone(), None),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
                let name = format!("{stamp}-{kind}-{}", config_hash(resolved, args));
                (resolved.out_dir.join(name), Some(resolved.out_dir.clone()))
            }
        };
        fs::create_dir_all(&path)?;
        Ok(RunDir {
            path,
            parent,
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, label: &str, file_name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path.join(file_name), bytes)?;
        self.files.insert(label.to_string(), file_name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(
        &mut self,
        label: &str,
        file_name: &str,
        value: &T,
    ) -> Result<(), CliError> {
        let mut bytes =
            serde_json::to_vec_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        bytes.push(b'\n');
        self.write(label, file_name, &bytes)
    }

    /// Writes `report.json`, then points `latest` at this run.
    pub fn finish(self, report: ExperimentReport) -> Result<PathBuf, CliError> {
        let report = ExperimentReport {
            files: self.files,
            ..report
        };
        let mut bytes =
            serde_json::to_vec_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&self.path.join("report.json"), &bytes)?;
        if let Some(parent) = &self.parent {
            let name = self
                .path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            write_atomic(&parent.join(LATEST_POINTER), format!("{name}\n").as_bytes())?;
        }
        Ok(self.path)
    }
}

#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub version: String,
    pub started_at: String,
    pub wall_time_secs: f64,
    pub settings: Resolved,
    pub args: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Summary statistics; bulky outputs live in `files`.
    pub summary: serde_json::Value,
    pub files: BTreeMap<String, String>,
}
