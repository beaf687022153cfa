//! Pipeline configuration: a flat key-value TOML file, command-line
//! overrides, and validation. `paper_preset` records the full-scale
//! hyperparameters; the desk-scale defaults are what the toy pipeline runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{CaptionerDims, MtBlock};
use crate::error::{Error, Result};
use crate::mil::MilTrainConfig;
use crate::toygen::ToyParams;
use crate::train::{ScstConfig, XeTrainConfig};
use crate::vocab::VocabConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: String,

    // Synthetic corpus generation.
    pub toy_images: usize,
    pub toy_categories: usize,
    pub toy_predicates: usize,
    pub feature_dim: usize,
    pub toy_noise_sigma: f64,

    // Vocabulary construction.
    pub predicate_cap: usize,
    pub min_word_freq: usize,

    // Pair detector.
    pub mil_hidden: usize,
    pub mil_epochs: usize,
    pub mil_lr: f64,
    pub mil_batch: usize,

    // Graph construction.
    pub graph_threshold: f64,
    pub graph_edge_cap: usize,

    // Captioner dimensions.
    pub word_embed_dim: usize,
    pub graph_text_embed_dim: usize,
    pub bottom_hidden: usize,
    pub top_hidden: usize,
    pub graph_dim: usize,
    pub attention_dim: usize,
    pub head_hidden: usize,
    pub block: MtBlock,

    // Cross-entropy phase.
    pub gamma: f64,
    pub xe_epochs: usize,
    pub xe_lr: f64,
    pub xe_lr_decay: f64,
    pub batch_size: usize,

    // Self-critical phase.
    pub scst_steps: usize,
    pub scst_lr: f64,
    pub scst_batch: usize,

    // Generation.
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            out_dir: "out".into(),
            toy_images: 20,
            toy_categories: 6,
            toy_predicates: 3,
            feature_dim: 32,
            toy_noise_sigma: 0.05,
            predicate_cap: 16,
            min_word_freq: 1,
            mil_hidden: 64,
            mil_epochs: 30,
            mil_lr: 1e-2,
            mil_batch: 4,
            graph_threshold: 0.5,
            graph_edge_cap: 20,
            word_embed_dim: 64,
            graph_text_embed_dim: 32,
            bottom_hidden: 32,
            top_hidden: 64,
            graph_dim: 64,
            attention_dim: 32,
            head_hidden: 64,
            block: MtBlock::Mt1,
            gamma: 0.15,
            xe_epochs: 200,
            xe_lr: 5e-3,
            xe_lr_decay: 0.98,
            batch_size: 4,
            scst_steps: 200,
            scst_lr: 5e-5,
            scst_batch: 10,
            beam_width: 3,
            max_len: 28,
        }
    }
}

impl PipelineConfig {
    /// Full-scale hyperparameters: gamma 0.15, beam 3, Adam lr 5e-4,
    /// minibatch 100, 30 epochs per phase, top/bottom LSTM 1000/512, word
    /// embedding 1000, visual features 2048, 200 predicates. Validated for
    /// consistency; not trainable at desk scale.
    pub fn paper_preset() -> Self {
        PipelineConfig {
            feature_dim: 2048,
            predicate_cap: 200,
            mil_hidden: 1000,
            mil_epochs: 30,
            mil_lr: 5e-4,
            mil_batch: 100,
            word_embed_dim: 1000,
            graph_text_embed_dim: 1000,
            bottom_hidden: 512,
            top_hidden: 1000,
            graph_dim: 1000,
            attention_dim: 512,
            head_hidden: 1000,
            gamma: 0.15,
            xe_epochs: 30,
            xe_lr: 5e-4,
            xe_lr_decay: 1.0,
            batch_size: 100,
            scst_lr: 5e-4,
            scst_batch: 100,
            beam_width: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| {
            Err(Error::Config { field: field.to_string(), message })
        };
        if self.top_hidden != self.graph_dim {
            return err(
                "top_hidden",
                format!("must equal graph_dim ({} != {})", self.top_hidden, self.graph_dim),
            );
        }
        if self.gamma < 0.0 {
            return err("gamma", format!("must be nonnegative, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.graph_threshold) {
            return err("graph_threshold", format!("must be in [0, 1], got {}", self.graph_threshold));
        }
        if self.beam_width == 0 {
            return err("beam_width", "must be at least 1".into());
        }
        if self.max_len == 0 {
            return err("max_len", "must be at least 1".into());
        }
        for (name, value) in [
            ("feature_dim", self.feature_dim),
            ("predicate_cap", self.predicate_cap),
            ("mil_hidden", self.mil_hidden),
            ("graph_edge_cap", self.graph_edge_cap),
            ("word_embed_dim", self.word_embed_dim),
            ("graph_text_embed_dim", self.graph_text_embed_dim),
            ("bottom_hidden", self.bottom_hidden),
            ("top_hidden", self.top_hidden),
            ("graph_dim", self.graph_dim),
            ("attention_dim", self.attention_dim),
            ("head_hidden", self.head_hidden),
            ("batch_size", self.batch_size),
            ("mil_batch", self.mil_batch),
            ("scst_batch", self.scst_batch),
        ] {
            if value == 0 {
                return err(name, "must be positive".into());
            }
        }
        for (name, value) in [
            ("mil_lr", self.mil_lr),
            ("xe_lr", self.xe_lr),
            ("scst_lr", self.scst_lr),
            ("xe_lr_decay", self.xe_lr_decay),
            ("toy_noise_sigma", self.toy_noise_sigma),
        ] {
            if !value.is_finite() || value < 0.0 {
                return err(name, format!("must be a nonnegative number, got {value}"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "file".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let cfg: PipelineConfig = toml::from_str(&raw).map_err(|e| Error::Config {
            field: "file".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config {
            field: "file".into(),
            message: e.to_string(),
        })?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Apply `key=value` overrides. Values are parsed with TOML semantics,
    /// so strings, numbers, and booleans all work; unknown keys are
    /// rejected with the offending field named.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::Table::try_from(self).map_err(|e| Error::Config {
            field: "override".into(),
            message: e.to_string(),
        })?;
        for kv in overrides {
            let Some((key, value)) = kv.split_once('=') else {
                return Err(Error::Config {
                    field: kv.clone(),
                    message: "override must look like key=value".into(),
                });
            };
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::Config {
                    field: key.to_string(),
                    message: "unknown configuration key".into(),
                });
            }
            // Parse the value with TOML semantics; bare words fall back to
            // plain strings so `--set block=mt2` works unquoted.
            let parsed: toml::Value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(value.trim().to_string()),
            };
            table.insert(key.to_string(), parsed);
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e| Error::Config {
            field: "override".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hash over the full configuration, recorded in artifact
    /// manifests.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn toy_params(&self) -> ToyParams {
        ToyParams {
            num_images: self.toy_images,
            num_categories: self.toy_categories,
            num_predicates: self.toy_predicates,
            feature_dim: self.feature_dim,
            noise_sigma: self.toy_noise_sigma,
        }
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            predicate_cap: self.predicate_cap,
            min_word_freq: self.min_word_freq,
            synonyms: BTreeMap::new(),
        }
    }

    pub fn mil_config(&self) -> MilTrainConfig {
        MilTrainConfig {
            epochs: self.mil_epochs,
            lr: self.mil_lr,
            batch_size: self.mil_batch,
            hidden_dim: self.mil_hidden,
            seed: self.seed,
        }
    }

    pub fn graph_config(&self) -> crate::graph::GraphConfig {
        crate::graph::GraphConfig { threshold: self.graph_threshold, edge_cap: self.graph_edge_cap }
    }

    pub fn captioner_dims(&self) -> CaptionerDims {
        CaptionerDims {
            word_embed: self.word_embed_dim,
            graph_text_embed: self.graph_text_embed_dim,
            bottom_hidden: self.bottom_hidden,
            top_hidden: self.top_hidden,
            graph_dim: self.graph_dim,
            attention_dim: self.attention_dim,
            head_hidden: self.head_hidden,
        }
    }

    pub fn xe_config(&self) -> XeTrainConfig {
        XeTrainConfig {
            epochs: self.xe_epochs,
            lr: self.xe_lr,
            lr_decay: self.xe_lr_decay,
            batch_size: self.batch_size,
            gamma: self.gamma,
            seed: self.seed,
        }
    }

    pub fn scst_config(&self) -> ScstConfig {
        ScstConfig {
            steps: self.scst_steps,
            lr: self.scst_lr,
            batch_size: self.scst_batch,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn paper_preset_loads_and_validates() {
        let p = PipelineConfig::paper_preset();
        p.validate().unwrap();
        assert_eq!(p.gamma, 0.15);
        assert_eq!(p.beam_width, 3);
        assert_eq!(p.xe_lr, 5e-4);
        assert_eq!(p.batch_size, 100);
        assert_eq!(p.xe_epochs, 30);
        assert_eq!(p.top_hidden, 1000);
        assert_eq!(p.bottom_hidden, 512);
        assert_eq!(p.word_embed_dim, 1000);
        assert_eq!(p.feature_dim, 2048);
        assert_eq!(p.predicate_cap, 200);
    }

    #[test]
    fn mismatched_graph_dim_names_field() {
        let cfg = PipelineConfig { top_hidden: 48, ..Default::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("top_hidden"), "{err}");
    }

    #[test]
    fn file_roundtrip_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let cfg = PipelineConfig::default();
        cfg.save(&path).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);

        let over = loaded
            .apply_overrides(&["seed=99".to_string(), "block=\"mt2\"".to_string(), "gamma=0.3".to_string()])
            .unwrap();
        assert_eq!(over.seed, 99);
        assert_eq!(over.block, MtBlock::Mt2);
        assert_eq!(over.gamma, 0.3);
        assert_ne!(over.hash(), cfg.hash());

        let bad = loaded.apply_overrides(&["no_such_key=1".to_string()]);
        assert!(bad.unwrap_err().to_string().contains("no_such_key"));
    }

    #[test]
    fn bare_string_override_works() {
        let cfg = PipelineConfig::default();
        let over = cfg.apply_overrides(&["out_dir=elsewhere".to_string()]).unwrap();
        assert_eq!(over.out_dir, "elsewhere");
        let block = cfg.apply_overrides(&["block=mt2".to_string()]).unwrap();
        assert_eq!(block.block, MtBlock::Mt2);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(PipelineConfig::default().hash(), PipelineConfig::default().hash());
    }
}
