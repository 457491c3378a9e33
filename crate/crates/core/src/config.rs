//! Run configuration: one JSON document with a section per component.
//!
//! Every field is optional. Unknown keys are rejected at every level.
//! `--set a.b=value` overrides are applied to the JSON tree before it is
//! deserialized; `value` is parsed as JSON and falls back to a string.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bsq::BsqConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ola::OlaConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OlaSection {
    /// Window length; defaults to the model's training chunk.
    pub chunk_frames: Option<usize>,
    pub overlap_frames: usize,
    pub clamp_eps: f64,
}

impl Default for OlaSection {
    fn default() -> Self {
        Self { chunk_frames: None, overlap_frames: 50, clamp_eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Manifest label keys to score.
    pub factors: Vec<String>,
    /// Cuts for the pairwise top-k Jaccard overlap.
    pub top_k: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { factors: vec!["speaker".into(), "noise".into(), "content".into()], top_k: vec![5, 10] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub bsq: BsqConfig,
    pub train: TrainConfig,
    pub ola: OlaSection,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.bsq.validate()?;
        self.train.validate()?;
        if self.corpus.feature_dim != self.model.feature_dim {
            return Err(Error::config(format!(
                "corpus.feature_dim ({}) differs from model.feature_dim ({})",
                self.corpus.feature_dim, self.model.feature_dim
            )));
        }
        if self.analysis.top_k.contains(&0) {
            return Err(Error::config("analysis.top_k entries must be positive"));
        }
        self.ola_config(&self.model)?.validate()
    }

    /// Overlap-add settings for a model (usually the one in a checkpoint).
    pub fn ola_config(&self, model: &ModelConfig) -> Result<OlaConfig> {
        let k = self.ola.chunk_frames.unwrap_or_else(|| model.chunk_frames());
        if k > model.max_frames {
            return Err(Error::config(format!("ola.chunk_frames {k} exceeds model.max_frames {}", model.max_frames)));
        }
        Ok(OlaConfig { chunk_frames: k, overlap_frames: self.ola.overlap_frames, clamp_eps: self.ola.clamp_eps })
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join("config.json"), text)?;
        Ok(())
    }
}

pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| Error::config(format!("override {key:?} descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(format!("override {key:?} descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
