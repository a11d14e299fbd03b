//! Output tracking and the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use neurosem_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad run manifest {}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::Io)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Files written by one command under its output directory.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(Error::Io)?;
        Ok(Self { root, files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, creating its parent directory.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(Error::Io)?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(Error::Io)?;
        self.record(rel)?;
        Ok(p)
    }

    /// Registers a file, or every file below a directory.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        if p.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&p)
                .map_err(Error::Io)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<std::io::Result<_>>()
                .map_err(Error::Io)?;
            names.sort();
            for n in names {
                self.record(&format!("{rel}/{n}"))?;
            }
        } else if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<OutputRecord>> {
        self.files
            .iter()
            .map(|f| Ok(OutputRecord { path: f.clone(), sha256: sha256_file(&self.root.join(f))? }))
            .collect()
    }

    pub fn finish(self, command: &str, args: &[String], seed: Option<u64>, config: Option<RunConfig>) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            cwd: std::env::current_dir().map_err(Error::Io)?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            outputs: self.records()?,
        };
        let p = self.path(&format!("manifests/run_{command}.json"))?;
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::Io)?;
        Ok(manifest)
    }
}

/// Replaces (or appends) `--flag value` in an argument list.
pub fn set_flag(args: &[String], flag: &str, value: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len() + 2);
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == flag {
            skip = true;
            continue;
        }
        if a.starts_with(&format!("{flag}=")) {
            continue;
        }
        out.push(a.clone());
    }
    out.push(flag.to_string());
    out.push(value.to_string());
    out
}

pub fn has_flag(args: &[String], flag: &str) -> bool {
    args.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}
