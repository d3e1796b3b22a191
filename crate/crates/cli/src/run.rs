//! Per-invocation bookkeeping: input/output digests and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use bitefuse::annotations::{parse_csv, parse_json, serialize, BoxFormat};
use bitefuse::{AnnotationSet, ErrorKind, FileFormat};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Written next to the primary output of every run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub jobs: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub runtime_seconds: f64,
}

pub struct Run {
    manifest: RunManifest,
    started: Instant,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn internal(message: String) -> anyhow::Error {
    CliError {
        kind: ErrorKind::Internal,
        message,
    }
    .into()
}

impl Run {
    pub fn new(command: &'static str, config: &impl Serialize, jobs: usize) -> anyhow::Result<Self> {
        Ok(Self {
            manifest: RunManifest {
                tool: "bitefuse",
                version: env!("CARGO_PKG_VERSION"),
                command,
                config: serde_json::to_value(config).context("serializing run configuration")?,
                jobs,
                inputs: Vec::new(),
                outputs: Vec::new(),
                runtime_seconds: 0.0,
            },
            started: Instant::now(),
        })
    }

    fn digest(path: &Path, bytes: &[u8]) -> FileDigest {
        FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        }
    }

    /// Reads a text input and records its digest.
    pub fn read_text(&mut self, path: &Path) -> anyhow::Result<String> {
        let bytes = fs::read(path).map_err(|source| bitefuse::Error::Io {
            path: path.to_owned(),
            source,
        })?;
        self.manifest.inputs.push(Self::digest(path, &bytes));
        String::from_utf8(bytes).map_err(|_| crate::parse_error(format!("{} is not valid UTF-8", path.display())))
    }

    pub fn read_annotations(&mut self, path: &Path) -> anyhow::Result<AnnotationSet> {
        let text = self.read_text(path)?;
        let origin = path.display().to_string();
        Ok(match FileFormat::from_path(path) {
            FileFormat::Json => parse_json(&text, &origin)?,
            FileFormat::Csv => parse_csv(&text, &origin, BoxFormat::Xyxy)?,
        })
    }

    /// Union of several annotation files.
    pub fn read_annotation_union(&mut self, paths: &[PathBuf]) -> anyhow::Result<AnnotationSet> {
        let sets = paths
            .iter()
            .map(|p| self.read_annotations(p))
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(AnnotationSet::union(sets)?)
    }

    /// One id per line; blank lines and `#` comments are skipped.
    pub fn read_id_list(&mut self, path: &Path) -> anyhow::Result<Vec<String>> {
        Ok(self
            .read_text(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect())
    }

    pub fn write_text(&mut self, path: &Path, contents: &str) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| internal(format!("cannot create {}: {e}", dir.display())))?;
        }
        fs::write(path, contents).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.outputs.push(Self::digest(path, contents.as_bytes()));
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
        text.push('\n');
        self.write_text(path, &text)
    }

    pub fn write_annotations(&mut self, path: &Path, set: &AnnotationSet) -> anyhow::Result<()> {
        self.write_text(path, &serialize(set, FileFormat::from_path(path)))
    }

    /// Writes the manifest to `path`, stamping the elapsed time.
    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.runtime_seconds = self.started.elapsed().as_secs_f64();
        let mut text = serde_json::to_string_pretty(&self.manifest).context("serializing manifest")?;
        text.push('\n');
        fs::write(path, text).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

/// `out.json` → `out.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.manifest.json"))
}

/// `out.json` → `out.csv`.
pub fn csv_path_for(output: &Path) -> PathBuf {
    output.with_extension("csv")
}
