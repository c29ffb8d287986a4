//! Per-run manifests and output directories.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use svdamage::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";
/// Root under which runs without `--out` get a fresh directory.
pub const OUTPUT_ROOT_ENV: &str = "SVDAMAGE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full argument vector, program name first.
    pub command_line: Vec<String>,
    /// Directory the command ran in; relative arguments resolve against it.
    pub working_dir: PathBuf,
    pub subcommand: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    pub version: String,
}

impl RunManifest {
    pub fn start(command_line: Vec<String>, subcommand: &str) -> Self {
        Self {
            command_line,
            working_dir: std::env::current_dir().unwrap_or_default(),
            subcommand: subcommand.to_string(),
            config_hash: None,
            seed: None,
            outputs: Vec::new(),
            started_at: Utc::now(),
            finished_at: None,
            exit_code: None,
            error: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `out` when given, else a new `<root>/<subcommand>-<timestamp>` directory
/// with the root taken from the environment.
pub fn output_dir(out: Option<&Path>, subcommand: &str) -> Result<PathBuf> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    for n in 0.. {
        let name = if n == 0 {
            format!("{subcommand}-{stamp}")
        } else {
            format!("{subcommand}-{stamp}-{n}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}
