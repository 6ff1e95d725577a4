//! Experiment configuration: one JSON file, overridable by
//! `ENNDOLA_<SECTION>_<FIELD>` environment variables and `--set` flags,
//! with `--seed` taking final precedence.

use crate::CliError;
use enndola_core::data::ReadMode;
use enndola_core::dola::DolaConfig;
use enndola_core::epinet::EpinetConfig;
use enndola_core::eval::DEFAULT_PROMPT_TEMPLATE;
use enndola_core::lm::{BaseTrainConfig, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "ENNDOLA_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Plain-text corpus for base-LM training.
    pub corpus: PathBuf,
    /// Documents for pair generation (.jsonl with "text", a file, or a dir).
    pub docs: PathBuf,
    /// All artifacts and manifests land here.
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsConfig {
    #[serde(default = "default_prefix_drop")]
    pub prefix_drop: f64,
    #[serde(default = "default_read_mode")]
    pub read_mode: ReadMode,
}

fn default_prefix_drop() -> f64 {
    0.2
}

fn default_read_mode() -> ReadMode {
    ReadMode::InMemory
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            prefix_drop: default_prefix_drop(),
            read_mode: default_read_mode(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_template")]
    pub template: String,
    /// Divide each choice logprob by its token count. Off by default.
    #[serde(default)]
    pub length_normalize: bool,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: None,
            template: default_template(),
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; sub-stage streams are derived from it.
    pub seed: u64,
    #[serde(default)]
    pub model_label: Option<String>,
    pub model: ModelConfig,
    pub dola: DolaConfig,
    pub base_train: BaseTrainConfig,
    pub epinet: EpinetConfig,
    #[serde(default)]
    pub pairs: PairsConfig,
    #[serde(default)]
    pub eval: EvalSection,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn model_label(&self) -> String {
        self.model_label.clone().unwrap_or_else(|| {
            format!("enndola-{}L-{}d", self.model.n_layers, self.model.d_model)
        })
    }

    /// Stage seeds derived from the single global seed.
    pub fn derive_seeds(&mut self) {
        self.base_train.seed = self.seed;
        self.epinet.seed = self.seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| CliError::Usage(msg);
        self.model
            .validate()
            .map_err(|e| usage(format!("model: {e}")))?;
        self.dola
            .validate()
            .map_err(|e| usage(format!("dola: {e}")))?;
        if self.dola.mature_layer != self.model.n_layers {
            return Err(usage(format!(
                "dola.mature_layer {} must equal model.n_layers {}",
                self.dola.mature_layer, self.model.n_layers
            )));
        }
        self.epinet
            .validate()
            .map_err(|e| usage(format!("epinet: {e}")))?;
        if !(0.0..1.0).contains(&self.pairs.prefix_drop) {
            return Err(usage(format!(
                "pairs.prefix_drop must be in [0,1), got {}",
                self.pairs.prefix_drop
            )));
        }
        if !self.eval.template.contains("{question}") {
            return Err(usage("eval.template must contain {question}".into()));
        }
        Ok(())
    }
}

/// Applies one `section.field=value` (or root `field=value`) override onto
/// the raw JSON tree. Values parse as JSON scalars, falling back to string.
fn apply_override(tree: &mut serde_json::Value, key_path: &str, raw: &str) -> Result<(), CliError> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let obj = tree
        .as_object_mut()
        .ok_or_else(|| CliError::Usage("config root must be a JSON object".into()))?;
    match key_path.split_once('.') {
        None => {
            obj.insert(key_path.to_string(), parsed);
        }
        Some((section, field)) => {
            let entry = obj
                .entry(section.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            let section_obj = entry.as_object_mut().ok_or_else(|| {
                CliError::Usage(format!("config section {section:?} is not an object"))
            })?;
            section_obj.insert(field.to_string(), parsed);
        }
    }
    Ok(())
}

/// Maps `ENNDOLA_EPINET_LEARNING_RATE` style variables to key paths by
/// longest match against the known top-level keys.
fn env_to_key_path(var: &str) -> Option<String> {
    const ROOT_SCALARS: &[&str] = &["seed", "model_label"];
    const SECTIONS: &[&str] = &[
        "base_train",
        "model",
        "dola",
        "epinet",
        "pairs",
        "paths",
        "eval",
    ];
    let rest = var.strip_prefix(ENV_PREFIX)?;
    let lower = rest.to_ascii_lowercase();
    for key in ROOT_SCALARS {
        if lower == *key {
            return Some((*key).to_string());
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for section in SECTIONS {
        let prefix = format!("{section}_");
        if lower.starts_with(&prefix) && best.map_or(true, |(_, l)| section.len() > l) {
            best = Some((section, section.len()));
        }
    }
    let (section, len) = best?;
    Some(format!("{}.{}", section, &lower[len + 1..]))
}

/// Loads, overrides (env then flags then --seed), derives stage seeds,
/// and validates.
pub fn load_config(
    path: &Path,
    set_flags: &[String],
    seed_flag: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Usage(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut tree: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;

    let mut env_pairs: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    env_pairs.sort();
    for (var, value) in env_pairs {
        let key_path = env_to_key_path(&var).ok_or_else(|| {
            CliError::Usage(format!("unrecognized override variable {var}"))
        })?;
        apply_override(&mut tree, &key_path, &value)?;
    }
    for flag in set_flags {
        let (key, value) = flag.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects key=value, got {flag:?}"))
        })?;
        apply_override(&mut tree, key.trim(), value)?;
    }
    if let Some(seed) = seed_flag {
        apply_override(&mut tree, "seed", &seed.to_string())?;
    }

    let mut config: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    config.derive_seeds();
    config.validate()?;
    Ok(config)
}
