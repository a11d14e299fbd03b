//! TOML run configuration.

use std::path::{Path, PathBuf};

use neurosem_core::encoder::EncoderConfig;
use neurosem_core::retrieval::{DEFAULT_CONCURRENCY, DEFAULT_TIMEOUT};
use neurosem_core::trainer::TrainConfig;
use neurosem_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub bank: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    /// Seed for the stratified train/val/test split.
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub concurrency: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
            concurrency: DEFAULT_CONCURRENCY,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub endpoint: EndpointConfig,
}

impl RunConfig {
    pub fn minimal(dataset: impl Into<PathBuf>, bank: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: None,
            data: DataConfig { dataset: dataset.into(), bank: bank.into(), layout: None, split_seed: 0 },
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("dataset", Some(&self.data.dataset)), ("bank", Some(&self.data.bank)), ("layout", self.data.layout.as_ref())] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("data.{what} path {} does not exist", p.display())));
                }
            }
        }
        self.encoder.validate()?;
        self.train.validate(&self.encoder)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    // Relative paths are taken relative to the directory holding the file.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dataset);
        fix(&mut self.data.bank);
        if let Some(p) = self.data.layout.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output_dir.as_mut() {
            fix(p);
        }
    }
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.resolve(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = std::path::absolute(path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    parse_config_str(&text, &base).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurosem_core::trainer::LossKind;

    fn data_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("eeg.nsd"), b"").unwrap();
        std::fs::write(dir.path().join("bank.jsonl"), b"").unwrap();
        dir
    }

    const MINIMAL: &str = "[data]\ndataset = \"eeg.nsd\"\nbank = \"bank.jsonl\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = data_dir();
        let cfg = parse_config_str(MINIMAL, dir.path()).unwrap();
        assert_eq!(cfg.encoder.d_model, 64);
        assert_eq!(cfg.train.temperature, 0.07);
        assert_eq!(cfg.train.loss_kind, LossKind::Contrastive);
        assert_eq!(cfg.endpoint.timeout_secs, 30);
        assert_eq!(cfg.data.dataset, dir.path().join("eeg.nsd"));
    }

    #[test]
    fn misspelled_key_is_named() {
        let dir = data_dir();
        let text = format!("{MINIMAL}[train]\ntemprature = 0.1\n");
        match parse_config_str(&text, dir.path()) {
            Err(Error::Config(m)) => assert!(m.contains("temprature"), "{m}"),
            other => panic!("{other:?}"),
        }
        let text = format!("{MINIMAL}[encoder]\nd_model = \"wide\"\n");
        assert!(matches!(parse_config_str(&text, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let dir = data_dir();
        let text = format!("{MINIMAL}[encoder]\nd_model = 32\n[train]\nepochs = 3\nloss_kind = \"mse\"\n");
        let cfg = parse_config_str(&text, dir.path()).unwrap();
        assert_eq!((cfg.encoder.d_model, cfg.encoder.patch_len), (32, 16));
        assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.train.loss_kind), (3, 32, LossKind::Mse));
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = data_dir();
        let text = format!("{MINIMAL}[train]\nactive_heads = [\"ObjectSnap\", \"ThemeTag\"]\ncheckpoint_every = 5\n[endpoint]\nurl = \"http://localhost:1/x\"\n");
        let cfg = parse_config_str(&text, dir.path()).unwrap();
        let again = parse_config_str(&cfg.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_paths_and_bad_values_are_config_errors() {
        let dir = data_dir();
        let text = "[data]\ndataset = \"nope.nsd\"\nbank = \"bank.jsonl\"\n";
        assert!(matches!(parse_config_str(text, dir.path()), Err(Error::Config(m)) if m.contains("nope.nsd")));
        let text = format!("{MINIMAL}[encoder]\npatch_len = 15\n");
        assert!(matches!(parse_config_str(&text, dir.path()), Err(Error::Config(_))));
        assert!(matches!(parse_config_str("[train]\nepochs = 1\n", dir.path()), Err(Error::Config(m)) if m.contains("data")));
    }
}
