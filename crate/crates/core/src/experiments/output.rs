//! CSV outputs with provenance headers, atomic completion and manifests.
//!
//! A CSV is written to `<name>.partial` and renamed when complete. Its first
//! line records the configuration hash, so a later run can tell a finished
//! output of the same configuration (skipped) from one of another
//! configuration (rejected). Leftover partial files are discarded.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grammar::fingerprint_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub grammar_fingerprint: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Missing,
    /// Finished by a run of the same configuration.
    Complete,
}

#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    provenance: String,
    files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl OutputDir {
    pub fn new(dir: &Path, config_hash: &str, fingerprint: u64, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            provenance: format!(
                "# config_sha256={config_hash} grammar={} seed={seed} version={}",
                fingerprint_hex(fingerprint),
                env!("CARGO_PKG_VERSION")
            ),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Removes a stale partial file and reports whether `name` is already
    /// complete. A finished file from another configuration is an error.
    pub fn status(&mut self, name: &str) -> Result<Status> {
        let partial = self.path(&format!("{name}.partial"));
        if partial.exists() {
            eprintln!("discarding incomplete {}", partial.display());
            fs::remove_file(&partial)?;
        }
        let path = self.path(name);
        if !path.exists() {
            return Ok(Status::Missing);
        }
        let mut first = String::new();
        BufReader::new(fs::File::open(&path)?).read_line(&mut first)?;
        if first.trim_end() != self.provenance {
            return Err(Error::config(format!(
                "{} was produced by a different configuration; remove it or choose another output directory",
                path.display()
            )));
        }
        self.files.insert(name.to_string(), sha256_file(&path)?);
        Ok(Status::Complete)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let partial = self.path(&format!("{name}.partial"));
        {
            let mut file = fs::File::create(&partial)?;
            writeln!(file, "{}", self.provenance)?;
            let mut w = csv::Writer::from_writer(file);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        let path = self.path(name);
        fs::rename(&partial, &path)?;
        self.files.insert(name.to_string(), sha256_file(&path)?);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let partial = self.path(&format!("{name}.partial"));
        fs::write(&partial, text)?;
        let path = self.path(name);
        fs::rename(&partial, &path)?;
        self.files.insert(name.to_string(), sha256_file(&path)?);
        Ok(())
    }

    pub fn write_manifest(
        &self,
        command: &str,
        config: &ExperimentConfig,
        fingerprint: u64,
        wall_clock_seconds: f64,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_sha256: config.hash(),
            grammar_fingerprint: fingerprint_hex(fingerprint),
            seed: config.seed,
            wall_clock_seconds,
            files: self.files.clone(),
        };
        fs::write(
            self.path(&format!("{command}.manifest.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

/// Rows of a CSV written by this module, without the provenance line.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let body = text.split_once('\n').map_or("", |(_, rest)| rest);
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}
