//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: Option<String>,
    pub data: Option<String>,
    pub inputs: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_seconds: f64,
    /// `ok`, `not_converged` or `error`.
    pub status: String,
    pub converged: Option<bool>,
    pub message: Option<String>,
    pub error: Option<String>,
    pub outputs: Vec<String>,
}

/// Writer confined to the `--out` directory that tracks every file it creates.
pub struct Run {
    out: PathBuf,
    start: Instant,
    pub manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("{}: cannot create output directory", out.display()))?;
        Ok(Run {
            out: out.to_path_buf(),
            start: Instant::now(),
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                ..Default::default()
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("{}: cannot write", path.display()))?;
        self.record(name);
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let bytes = csv_bytes(rows)?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Write the manifest with the final status and return the exit code.
    pub fn finish(mut self, outcome: &Result<Option<bool>>) -> i32 {
        let code = match outcome {
            Ok(converged) => {
                self.manifest.converged = *converged;
                if *converged == Some(false) {
                    self.manifest.status = "not_converged".into();
                    2
                } else {
                    self.manifest.status = "ok".into();
                    0
                }
            }
            Err(e) => {
                self.manifest.status = "error".into();
                self.manifest.error = Some(format!("{e:#}"));
                1
            }
        };
        self.manifest.wall_time_seconds = self.start.elapsed().as_secs_f64();
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        if let Err(e) = fs::write(self.path(MANIFEST), text) {
            eprintln!("error: cannot write manifest: {e}");
            return 1;
        }
        code
    }
}

/// CSV with a header row; floats use the shortest round-trip representation.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}
