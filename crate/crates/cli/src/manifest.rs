//! `manifest.json`: what each command in a run directory was given and
//! produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use factcheck_core::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommandRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub threads: usize,
    /// Input path to sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl CommandRecord {
    pub fn new(config: &ExperimentConfig, threads: usize) -> Self {
        CommandRecord {
            config: config.clone(),
            seed: config.train.seed,
            threads,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }
}

/// Merge `record` under `command` into the run directory's manifest.
pub fn record(run_dir: &Path, command: &str, record: CommandRecord) -> Result<PathBuf> {
    let path = run_dir.join(FILE_NAME);
    let mut manifest = match fs::read_to_string(&path) {
        Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    manifest.commands.insert(command.to_string(), record);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
