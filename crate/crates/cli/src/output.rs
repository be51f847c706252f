use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use crate::config::{sha256_hex, LoadedConfig, Manifest, CONFIG_FORMAT_VERSION};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

/// Collects a command's outputs and writes them in one go, refusing to
/// overwrite existing files unless forced.
pub struct Outputs {
    dir: PathBuf,
    force: bool,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(dir: PathBuf, force: bool) -> Self {
        Outputs {
            dir,
            force,
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, content: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), content.into()));
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.add(name, text);
    }

    /// Hash of a staged file.
    pub fn checksum(&self, name: &str) -> Option<String> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| sha256_hex(b))
    }

    pub fn commit(mut self, command: &str, cfg: &LoadedConfig) -> CliResult<PathBuf> {
        let outputs: BTreeMap<String, String> = self.files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect();
        let manifest = Manifest {
            format_version: CONFIG_FORMAT_VERSION,
            command: command.into(),
            config_sha256: cfg.sha256.clone(),
            seed: cfg.seed,
            outputs,
        };
        self.add_json(MANIFEST, &manifest);
        if !self.force {
            for (name, _) in &self.files {
                let p = self.dir.join(name);
                if p.exists() {
                    return Err(CliError::input(format!("{} already exists; pass --force to overwrite", p.display())));
                }
            }
        }
        fs::create_dir_all(&self.dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", self.dir.display())))?;
        for (name, bytes) in &self.files {
            let p = self.dir.join(name);
            fs::write(&p, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", p.display())))?;
        }
        Ok(self.dir)
    }
}
