use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use siltwin_core::sim::{Actor, AttackLabel, Catalog, ProcessParams, StageId};
use siltwin_core::trust::{BnSettings, KnowledgeUpdate, Scenario1Config, Scenario2Config};

use crate::error::{CliError, CliResult};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

/// Fleet shape for `simulate`; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    pub size: usize,
    #[serde(default)]
    pub devices_per_wafer: Option<usize>,
    #[serde(default)]
    pub wafers_per_lot: Option<usize>,
    #[serde(default)]
    pub id_prefix: String,
    #[serde(default)]
    pub params: Option<ProcessParams>,
}

/// One attack for `inject`. Either explicit targets or a count of clean
/// devices drawn with the run seed (failed dies for `defective-shipped`,
/// shipped ones otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionBlock {
    pub attack: AttackLabel,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub count: Option<usize>,
    pub magnitude: f64,
    #[serde(default)]
    pub origin: Option<StageId>,
    #[serde(default)]
    pub actor: Option<Actor>,
    #[serde(default)]
    pub items: Option<Vec<String>>,
}

/// File locations, relative to the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub fleet: Option<PathBuf>,
    #[serde(default)]
    pub history: Vec<PathBuf>,
    pub registry: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub update: Option<PathBuf>,
    pub hmm: Option<PathBuf>,
    pub sequence: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub evidence: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    Bn,
    Hmm,
    Mln,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub fleet: Option<FleetSection>,
    #[serde(default)]
    pub injections: Vec<InjectionBlock>,
    #[serde(default)]
    pub engine: Option<EngineChoice>,
    #[serde(default)]
    pub scenario: Option<u8>,
    #[serde(default)]
    pub observation: Option<String>,
    /// Device under test for `infer`.
    #[serde(default)]
    pub device: Option<String>,
    #[serde(default)]
    pub learner: BnSettings,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub scenario1: Option<Scenario1Config>,
    #[serde(default)]
    pub scenario2: Option<Scenario2Config>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed: None,
            fleet: None,
            injections: Vec::new(),
            engine: None,
            scenario: None,
            observation: None,
            device: None,
            learner: BnSettings::default(),
            paths: Paths::default(),
            scenario1: None,
            scenario2: None,
        }
    }
}

/// A parsed config with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Hex SHA-256 of the config file bytes, or of the empty input when no
    /// file was given.
    pub sha256: String,
    pub base: PathBuf,
    pub seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_text(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = read_text(path, what)?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("malformed {what} {}: {e}", path.display())))
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> CliResult<Self> {
        let (config, bytes, base) = match path {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| CliError::input(format!("cannot read config {}: {e}", p.display())))?;
                let config: RunConfig = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::input(format!("malformed config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, bytes, base)
            }
            None => (RunConfig::default(), Vec::new(), PathBuf::new()),
        };
        if config.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::input(format!(
                "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                config.format_version
            )));
        }
        let seed = seed_flag
            .or(config.seed)
            .ok_or_else(|| CliError::input("no seed given: pass --seed or set `seed` in the config"))?;
        Ok(LoadedConfig {
            sha256: sha256_hex(&bytes),
            config,
            base,
            seed,
        })
    }

    /// Resolves a config-relative path and checks that it exists.
    pub fn input(&self, p: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        let p = p.as_ref().ok_or_else(|| CliError::input(format!("config is missing paths.{key}")))?;
        self.existing(p, key)
    }

    pub fn optional_input(&self, p: &Option<PathBuf>, key: &str) -> CliResult<Option<PathBuf>> {
        p.as_ref().map(|p| self.existing(p, key)).transpose()
    }

    fn existing(&self, p: &Path, key: &str) -> CliResult<PathBuf> {
        let full = if p.is_absolute() { p.to_path_buf() } else { self.base.join(p) };
        if !full.exists() {
            return Err(CliError::input(format!("paths.{key}: {} does not exist", full.display())));
        }
        Ok(full)
    }

    pub fn update(&self) -> CliResult<Option<KnowledgeUpdate>> {
        self.optional_input(&self.config.paths.update, "update")?
            .map(|p| read_json(&p, "knowledge update"))
            .transpose()
    }

    /// Simulator parameters and catalog, extended by the update when one
    /// is configured.
    pub fn simulator(&self) -> CliResult<(ProcessParams, Catalog, Option<KnowledgeUpdate>)> {
        let mut params = self.config.fleet.as_ref().and_then(|f| f.params.clone()).unwrap_or_default();
        let mut catalog = Catalog::standard();
        let update = self.update()?;
        if let Some(u) = &update {
            u.apply_to_catalog(&mut params, &mut catalog);
        }
        Ok((params, catalog, update))
    }
}

/// Output file name → content hash, written next to every command's
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: BTreeMap<String, String>,
}
