//! Engine configuration: TOML file, key=value overrides, validation.
//!
//! Precedence is flags > file > defaults. Overrides use dotted paths
//! (`router.epsilon=0.4`); unknown keys and cross-field violations are
//! rejected with the offending field named.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunParams;
use crate::router::RouterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Deterministic hashed character 3-grams.
    Hashed,
    /// Precomputed vectors from `paths.embeddings`.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub seed: u64,
    /// Number of blocks (L).
    pub layers: usize,
    /// Hidden width (d).
    pub d: usize,
    /// JSON array of answer strings.
    pub vocab_path: Option<PathBuf>,
    /// Full model spec file; when set it overrides seed/layers/d/vocab_path.
    pub spec_path: Option<PathBuf>,
    pub encoder: EncoderKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            seed: 7,
            layers: 4,
            d: 64,
            vocab_path: None,
            spec_path: None,
            encoder: EncoderKind::Hashed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub lambda: f64,
    pub layer_index: usize,
    pub experts: usize,
    pub per_edit_epochs: usize,
    pub lr: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            layer_index: 0,
            experts: 1,
            per_edit_epochs: 25,
            lr: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub batch_size: usize,
    /// Edits to apply; defaults to the whole dataset.
    pub t: Option<usize>,
    /// Batches evaluated in single-editing mode.
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            batch_size: 5,
            t: None,
            n_trials: 10,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    /// Embedding table backing `embedder = "table"` or the table encoder.
    pub embeddings: Option<PathBuf>,
    /// Where to persist the final vector store, if set.
    pub store: Option<PathBuf>,
    /// Trained projection-head checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Where to persist the final adapter checkpoint, if set.
    pub adapter: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Router embedding dimension.
    pub dim: usize,
    pub threads: usize,
    /// Router-side base embedder.
    pub embedder: EncoderKind,
    pub model: ModelSection,
    pub router: RouterConfig,
    pub adapter: AdapterSection,
    pub harness: HarnessSection,
    pub paths: PathsSection,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            threads: 1,
            embedder: EncoderKind::Hashed,
            model: ModelSection::default(),
            router: RouterConfig::default(),
            adapter: AdapterSection::default(),
            harness: HarnessSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Apply dotted-path overrides (`section.key=value`). Types are taken
    /// from the existing value where present; unknown keys fail on the
    /// re-deserialization pass.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree =
            toml::Value::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for entry in overrides {
            let (key, raw) = entry.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override '{entry}' is not key=value"))
            })?;
            set_path(&mut tree, key.trim(), raw.trim())?;
        }
        *self = tree
            .try_into()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Cross-field validation; every violation names the fields involved.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be >= 1".into()));
        }
        self.router.validate()?;
        if self.model.layers == 0 {
            return Err(Error::InvalidConfig("model.layers must be >= 1".into()));
        }
        if self.model.d == 0 {
            return Err(Error::InvalidConfig("model.d must be >= 1".into()));
        }
        if self.adapter.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "adapter.lambda must be non-negative, got {}",
                self.adapter.lambda
            )));
        }
        if self.adapter.experts == 0 {
            return Err(Error::InvalidConfig("adapter.experts must be >= 1".into()));
        }
        if self.adapter.lr.is_nan() || self.adapter.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "adapter.lr must be positive, got {}",
                self.adapter.lr
            )));
        }
        if self.router.top_k > self.adapter.experts {
            return Err(Error::InvalidConfig(format!(
                "router.top_k ({}) exceeds adapter.experts ({})",
                self.router.top_k, self.adapter.experts
            )));
        }
        if self.adapter.layer_index >= self.model.layers {
            return Err(Error::InvalidConfig(format!(
                "adapter.layer_index ({}) must be below model.layers ({})",
                self.adapter.layer_index, self.model.layers
            )));
        }
        if self.harness.batch_size == 0 {
            return Err(Error::InvalidConfig("harness.batch_size must be >= 1".into()));
        }
        if self.harness.n_trials == 0 {
            return Err(Error::InvalidConfig("harness.n_trials must be >= 1".into()));
        }
        if self.embedder == EncoderKind::Table && self.paths.embeddings.is_none() {
            return Err(Error::InvalidConfig(
                "embedder = \"table\" requires paths.embeddings".into(),
            ));
        }
        if self.model.encoder == EncoderKind::Table {
            if self.paths.embeddings.is_none() {
                return Err(Error::InvalidConfig(
                    "model.encoder = \"table\" requires paths.embeddings".into(),
                ));
            }
            if self.model.d != self.dim {
                return Err(Error::InvalidConfig(format!(
                    "model.encoder = \"table\" requires model.d ({}) == dim ({})",
                    self.model.d, self.dim
                )));
            }
        }
        Ok(())
    }

    /// JSON snapshot embedded in metrics reports. Keys are sorted by
    /// serde_json, so the snapshot is byte-stable.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn run_params(&self) -> RunParams {
        RunParams {
            router: self.router.clone(),
            experts: self.adapter.experts,
            lambda: self.adapter.lambda,
            layer_index: self.adapter.layer_index,
            per_edit_epochs: self.adapter.per_edit_epochs,
            expert_lr: self.adapter.lr,
            batch_size: self.harness.batch_size,
        }
    }
}

fn set_path(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key '{key}'")));
    }
    let mut current = tree;
    for segment in &segments[..segments.len() - 1] {
        current = current
            .get_mut(segment)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config section '{segment}'")))?;
    }
    let table = current
        .as_table_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("'{key}' does not address a field")))?;
    let last = segments[segments.len() - 1];
    let parsed = match table.get(last) {
        Some(toml::Value::Integer(_)) => toml::Value::Integer(raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("'{key}' expects an integer, got '{raw}'"))
        })?),
        Some(toml::Value::Float(_)) => toml::Value::Float(raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("'{key}' expects a float, got '{raw}'"))
        })?),
        Some(toml::Value::Boolean(_)) => toml::Value::Boolean(raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("'{key}' expects a bool, got '{raw}'"))
        })?),
        Some(toml::Value::String(_)) => toml::Value::String(raw.to_string()),
        // Absent (e.g. an unset optional path) or structured: best-effort
        // parse, with unknown keys caught on re-deserialization.
        _ => {
            if let Ok(v) = raw.parse::<i64>() {
                toml::Value::Integer(v)
            } else if let Ok(v) = raw.parse::<f64>() {
                toml::Value::Float(v)
            } else if let Ok(v) = raw.parse::<bool>() {
                toml::Value::Boolean(v)
            } else {
                toml::Value::String(raw.to_string())
            }
        }
    };
    table.insert(last.to_string(), parsed);
    Ok(())
}

/// Load a vocabulary file: a JSON array of answer strings.
pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let vocab: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::ParseError {
        line: e.line(),
        message: format!("vocab file: {e}"),
    })?;
    if vocab.is_empty() {
        return Err(Error::InvalidInput("vocab file is empty".into()));
    }
    Ok(vocab)
}

pub fn save_vocab(vocab: &[String], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab).expect("vocab serializes");
    std::fs::write(path, text)?;
    Ok(())
}
