//! TOML configuration file.
//!
//! Every section is optional and every key falls back to its default:
//!
//! ```toml
//! [model]        # embed_dim, enc_layers, dec_layers, heads, ff_mult, dropout, ...
//! [train]        # learning_rate, batch_size, epochs, weight_decay, seed, val_fraction, ...
//! [decode]       # temperature, seed
//! [optimize]     # width, height, lr, max_iters, window, tolerance, coarse_stages, ...
//! [eval]         # error_resolution, noise_levels, noise_seed, noise_resolution
//! [serve]        # bind, port, model, cors, body_limit, static_dir
//! ```
//!
//! The `[model]` section only applies when training from scratch; missing
//! model keys take the desk-scale defaults for the chosen resolution.

use std::path::{Path, PathBuf};

use anyhow::Context;
use facaid_core::decoder::DecodeConfig;
use facaid_core::sizing::OptimizeConfig;
use facaid_core::transformer::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Settings of the local HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Checkpoint; without one only the symbolic endpoints work.
    pub model: Option<PathBuf>,
    /// Adds permissive CORS headers for a UI served from another origin.
    pub cors: bool,
    /// Maximum request body in bytes.
    pub body_limit: usize,
    /// Static UI assets served for paths no endpoint matches.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8080, model: None, cors: false, body_limit: 8 << 20, static_dir: None }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.port >= 1, "port must lie in [1, 65535]");
        anyhow::ensure!(self.body_limit > 0, "body_limit must be positive");
        Ok(())
    }
}

/// Evaluation settings; the options not listed here come from other sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub error_resolution: usize,
    pub noise_levels: Vec<f64>,
    pub noise_seed: u64,
    pub noise_resolution: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = facaid_core::eval::EvalOptions::default();
        Self {
            error_resolution: d.error_resolution,
            noise_levels: d.noise_levels,
            noise_seed: d.noise_seed,
            noise_resolution: d.noise_resolution,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Raw model table, merged over the resolution's defaults.
    pub model: Option<toml::Table>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub optimize: OptimizeConfig,
    pub eval: EvalSection,
    pub serve: ServiceConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Model config for `vocab` with the file's overrides applied.
    pub fn model_config(
        &self,
        vocab: &facaid_core::tokenizer::Vocabulary,
    ) -> anyhow::Result<facaid_core::transformer::ModelConfig> {
        let mut base = toml::Table::try_from(facaid_core::transformer::ModelConfig::for_vocab(vocab))?;
        if let Some(over) = &self.model {
            for (k, v) in over {
                anyhow::ensure!(base.contains_key(k), "unknown model key `{k}`");
                base.insert(k.clone(), v.clone());
            }
        }
        let cfg: facaid_core::transformer::ModelConfig = base.try_into()?;
        anyhow::ensure!(cfg.vocab_size == vocab.size(), "vocab_size is fixed by the resolution");
        anyhow::ensure!(cfg.resolution == vocab.resolution(), "set the resolution with --resolution");
        cfg.validate()?;
        Ok(cfg)
    }
}
