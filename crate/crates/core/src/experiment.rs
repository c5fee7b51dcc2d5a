//! Experiment configuration files, bundled presets and `key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::retrieval::RetrievalConfig;
use crate::training::TrainConfig;

/// Store files backing each encoder. A missing path falls back to the
/// deterministic encoder seeded by `encoder_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub clip_text: Option<PathBuf>,
    pub clip_image: Option<PathBuf>,
    pub sbert: Option<PathBuf>,
    pub sbert_qa: Option<PathBuf>,
    pub word: Option<PathBuf>,
    pub encoder_seed: u64,
    /// Width of the deterministic stand-in for the sentence encoders.
    pub sentence_dim: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            clip_text: None,
            clip_image: None,
            sbert: None,
            sbert_qa: None,
            word: None,
            encoder_seed: 0,
            sentence_dim: 768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub stores: StoreConfig,
}

/// Bundled presets as `(file stem, contents)`.
pub const PRESETS: [(&str, &str); 8] = [
    ("model_wo_ER", include_str!("../presets/model_wo_ER.toml")),
    ("SBERT_sentence_ER_top5", include_str!("../presets/SBERT_sentence_ER_top5.toml")),
    ("SBERT_sentence_ER_top10", include_str!("../presets/SBERT_sentence_ER_top10.toml")),
    ("SBERT_sentence_ER_top15", include_str!("../presets/SBERT_sentence_ER_top15.toml")),
    ("SBERT-QA_paragraph_ER_top5", include_str!("../presets/SBERT-QA_paragraph_ER_top5.toml")),
    ("SBERT-QA_sentence_ER_top5", include_str!("../presets/SBERT-QA_sentence_ER_top5.toml")),
    ("BigBird_wo_ER", include_str!("../presets/BigBird_wo_ER.toml")),
    ("overfit_fixture", include_str!("../presets/overfit_fixture.toml")),
];

/// Names accepted by [`preset`]: the experiment names.
pub fn preset_names() -> Vec<String> {
    PRESETS
        .iter()
        .map(|(_, src)| parse_experiment(src).map(|c| c.name).unwrap_or_default())
        .collect()
}

/// Look up a bundled preset by experiment name or file name, with or
/// without the `.toml` suffix.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let stem = name.strip_suffix(".toml").unwrap_or(name);
    for (file, src) in PRESETS {
        let cfg = parse_experiment(src)?;
        if file == stem || cfg.name == stem {
            return Ok(cfg);
        }
    }
    Err(Error::Config(format!(
        "unknown preset {name:?}; available: {}",
        preset_names().join(", ")
    )))
}

pub fn parse_experiment(src: &str) -> Result<ExperimentConfig> {
    toml::from_str(src).map_err(|e| Error::Config(format!("experiment config: {e}")))
}

/// Read a config file if `name` names an existing file, else a preset.
pub fn load_experiment(name: &str) -> Result<ExperimentConfig> {
    let path = Path::new(name);
    if path.is_file() {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_experiment(&src);
    }
    preset(name)
}

/// Apply `section.field=value` overrides. Values are parsed as TOML
/// literals, falling back to a bare string.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = toml::Table::try_from(cfg)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let value = parse_value(raw.trim());
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let (last, parents) = parts.split_last().expect("nonempty");
        let mut table = &mut root;
        for p in parents {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
        }
        table.insert(last.to_string(), value);
    }
    let out: ExperimentConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(format!("override rejected: {e}")))?;
    Ok(out)
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        if self.retrieval.enabled {
            self.retrieval.validate()?;
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
