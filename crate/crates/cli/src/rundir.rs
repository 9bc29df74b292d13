//! Run directory layout:
//!
//! ```text
//! <run>/manifest.json        written by the command that created the run
//! <run>/manifests/<cmd>.json one per later command run against it
//! <run>/log.jsonl            training log, one record per line
//! <run>/checkpoints/         epoch-NNNN.ckpt and final.ckpt
//! <run>/reports/             metric reports as JSON and CSV
//! <run>/charts/              SVG training curves
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capsie::synthgen::checksum_file;
use serde::Serialize;
use serde_json::Value;

pub struct RunDir {
    pub root: PathBuf,
}

/// A file consumed by a command, recorded with its SHA-256.
#[derive(Debug, Serialize)]
pub struct Input {
    pub role: &'static str,
    pub path: PathBuf,
    pub sha256: String,
}

impl Input {
    pub fn new(role: &'static str, path: &Path) -> Result<Self> {
        Ok(Self {
            role,
            path: path.to_path_buf(),
            sha256: checksum_file(path).with_context(|| format!("hashing {}", path.display()))?,
        })
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    config: &'a Value,
    inputs: &'a [Input],
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["checkpoints", "reports", "charts"] {
            std::fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating run directory {}", root.display()))?;
        }
        Ok(Self { root })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn charts(&self) -> PathBuf {
        self.root.join("charts")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    /// Records the resolved config and input checksums. The first command
    /// in a run owns `manifest.json`; later ones go under `manifests/`.
    pub fn write_manifest(
        &self,
        command: &str,
        config: &Value,
        inputs: &[Input],
    ) -> Result<PathBuf> {
        let top = self.root.join("manifest.json");
        let path = if top.exists() && !self.owned_by(&top, command) {
            let dir = self.root.join("manifests");
            std::fs::create_dir_all(&dir)?;
            dir.join(format!("{command}.json"))
        } else {
            top
        };
        let m = Manifest {
            tool: "capsie",
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            config,
            inputs,
        };
        write_json(&path, &m)?;
        Ok(path)
    }

    fn owned_by(&self, manifest: &Path, command: &str) -> bool {
        std::fs::read(manifest)
            .ok()
            .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
            .is_some_and(|v| v["command"] == command)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f =
        std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// The run a checkpoint belongs to: the parent of its `checkpoints/`
/// directory, or the directory holding it.
pub fn run_of_checkpoint(ckpt: &Path) -> PathBuf {
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_paths_map_to_their_run() {
        assert_eq!(
            run_of_checkpoint(Path::new("runs/a/checkpoints/final.ckpt")),
            Path::new("runs/a")
        );
        assert_eq!(
            run_of_checkpoint(Path::new("elsewhere/x.ckpt")),
            Path::new("elsewhere")
        );
    }

    #[test]
    fn later_commands_get_their_own_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path().join("r")).unwrap();
        let first = run.write_manifest("pretrain", &Value::Null, &[]).unwrap();
        assert_eq!(first, run.root.join("manifest.json"));
        let again = run.write_manifest("pretrain", &Value::Null, &[]).unwrap();
        assert_eq!(again, first);
        let other = run
            .write_manifest("eval-rotation", &Value::Null, &[])
            .unwrap();
        assert_eq!(other, run.root.join("manifests/eval-rotation.json"));
    }
}
