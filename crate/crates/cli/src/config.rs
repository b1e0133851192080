// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a TOML file where every key is optional, plus
//! `section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sublab_core::analysis::{DEFAULT_OVERLAP_SAMPLES, DEFAULT_RIDGE_ALPHA, DEFAULT_TRACE_TOKENS};
use sublab_core::corpus::DEFAULT_MAX_VOCAB;
use sublab_core::mask::MaskHyper;
use sublab_core::model::LmHyper;
use sublab_core::{Error, ModelConfig, Result};

/// `lm.heldout_frac` defines the one held-out split used by every
/// subcommand. The component seeds (`model.seed`, `lm.seed`, `mask.seed`)
/// are overwritten with the root `seed` when a config is loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub lm: LmHyper,
    pub mask: MaskHyper,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
    pub thresholds: Thresholds,
    pub generate: GenerateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub paths: Vec<PathBuf>,
    /// Vocabulary size including the reserved tokens.
    pub max_vocab: usize,
    /// Held-out tokens scored by evaluation subcommands (0 = all).
    pub eval_tokens: usize,
    pub bigram_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// λ grid for bigram subnetworks of the final model.
    pub lambdas: Vec<f64>,
    /// λ grid for optimal (full-model) subnetworks.
    pub optimal_lambdas: Vec<f64>,
    /// λ grid used at every intermediate checkpoint.
    pub checkpoint_lambdas: Vec<f64>,
    pub threshold: f64,
    /// Extra attempts after a spike violation, each with seed + attempt.
    pub retry_max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub ridge_alpha: f64,
    pub centered: bool,
    pub trace_tokens: usize,
    pub overlap_samples: usize,
    /// Active fraction of the random subnetwork in the covariance control.
    pub near_empty_fraction: f64,
    pub ablation_seeds: Vec<u64>,
    /// Parameter counts at which fitted power laws are evaluated.
    pub powerlaw_at: Vec<f64>,
}

/// Desk acceptance thresholds, kept together so they can be tuned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub min_bigram_r: f64,
    pub min_ablation_delta: f64,
    pub max_random_delta: f64,
    pub min_input_rotation: f64,
    pub min_covariance_similarity: f64,
    pub min_overlap_ratio: f64,
    pub max_overlap_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_tokens: usize,
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            lm: LmHyper::default(),
            mask: MaskHyper::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisConfig::default(),
            thresholds: Thresholds::default(),
            generate: GenerateConfig::default(),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            paths: vec![PathBuf::from("data/kjv.txt")],
            max_vocab: DEFAULT_MAX_VOCAB,
            eval_tokens: 16_384,
            bigram_epsilon: sublab_core::bigram::DEFAULT_EPSILON,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0],
            optimal_lambdas: vec![1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0],
            checkpoint_lambdas: vec![0.0, 1.0, 10.0, 100.0, 500.0],
            threshold: 0.5,
            retry_max: 2,
        }
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            ridge_alpha: DEFAULT_RIDGE_ALPHA,
            centered: true,
            trace_tokens: DEFAULT_TRACE_TOKENS,
            overlap_samples: DEFAULT_OVERLAP_SAMPLES,
            near_empty_fraction: 0.001,
            ablation_seeds: vec![1, 2],
            powerlaw_at: vec![1e3, 1e4, 1e5],
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            min_bigram_r: 0.85,
            min_ablation_delta: 1.0,
            max_random_delta: 0.1,
            min_input_rotation: 5.0,
            min_covariance_similarity: 0.99,
            min_overlap_ratio: 2.0,
            max_overlap_p: 0.01,
        }
    }
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_tokens: 30,
            temperature: 0.30,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Canonical serialization; this exact text is embedded in artifacts.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("override `{o}` is not key=value"))
            })?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| {
                    Error::InvalidArgument(format!("`{key}` does not name a config field"))
                })?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidArgument(format!("override: {e}")))?;
        cfg.normalized()
    }

    /// Propagates the root seed and validates.
    pub fn normalized(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.lm.seed = self.seed;
        self.mask.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab_size != self.corpus.max_vocab {
            return Err(Error::InvalidArgument(format!(
                "model.vocab_size {} differs from corpus.max_vocab {}",
                self.model.vocab_size, self.corpus.max_vocab
            )));
        }
        if !(0.0..1.0).contains(&self.lm.heldout_frac) {
            return Err(Error::InvalidArgument(format!(
                "lm.heldout_frac must lie in [0, 1), got {}",
                self.lm.heldout_frac
            )));
        }
        let grids = [
            &self.sweep.lambdas,
            &self.sweep.optimal_lambdas,
            &self.sweep.checkpoint_lambdas,
        ];
        if grids.iter().flat_map(|g| g.iter()).any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("λ values must be finite and ≥ 0".into()));
        }
        if !(self.sweep.threshold > 0.0 && self.sweep.threshold < 1.0) {
            return Err(Error::InvalidArgument("sweep.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_file_and_roundtrip() {
        let c = RunConfig::from_toml("seed = 7\n[model]\nd_model = 64\nd_mlp = 256\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.mask.seed, 7);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.n_layers, 4);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "mask.lr=0.01".into(),
                "sweep.lambdas=[0, 10]".into(),
                "out_dir=/tmp/x".into(),
            ])
            .unwrap();
        assert_eq!(c.mask.lr, 0.01);
        assert_eq!(c.sweep.lambdas, vec![0.0, 10.0]);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert!(RunConfig::default().with_overrides(&["nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["mask.lr".into()]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }
}
