//! Run configuration as a single TOML document.
//!
//! ```toml
//! [features]   # FbankConfig
//! [encoder]    # EncoderConfig
//! [head]       # HeadConfig
//! [train]      # TrainConfig
//! [train.loss] # LossConfig
//! [train.augment]
//! [train.adam]
//! [synth]      # SynthSpec
//! [trials]     # TrialConfig
//! ```
//!
//! Every table is optional; missing keys take the desk-scale defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::FbankConfig;
use crate::heads::HeadConfig;
use crate::model::ModelConfig;
use crate::synthdata::SynthSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self { n_target: 250, n_nontarget: 250, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FbankConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub trials: TrialConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small configuration that trains on one CPU core in about a minute.
    pub fn desk() -> Self {
        Self {
            features: FbankConfig::default(),
            encoder: EncoderConfig {
                num_blocks: 2,
                model_dim: 64,
                num_heads: 4,
                ff_expansion: 2,
                conv_kernel: 15,
                ..EncoderConfig::default()
            },
            head: HeadConfig { embed_dim: 64, speaker_dim: 64, attention_hidden: 32, ..HeadConfig::default() },
            train: TrainConfig { batch_size: 20, epochs: 30, crop_seconds: 0.4, ..TrainConfig::default() },
            synth: SynthSpec::default(),
            trials: TrialConfig::default(),
        }
    }

    /// Full-size setup: 6 blocks, 192-dimensional embeddings, 3 s crops,
    /// batches of 100 originals.
    pub fn full() -> Self {
        Self {
            features: FbankConfig::default(),
            encoder: EncoderConfig::full(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            trials: TrialConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.n_mels != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "features.n_mels = {} but encoder.input_dim = {}",
                self.features.n_mels, self.encoder.input_dim
            )));
        }
        self.encoder.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn model(&self, num_classes: usize) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), head: self.head.clone(), num_classes }
    }

    /// Parse a document; keys it leaves out keep the desk preset's values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::desk()).expect("run config serializes");
        merge(&mut base, overrides);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::full()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[train.loss]\nobjective = \"mfcon\"\nlambda = 0.1\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.lambda, 0.1);
        assert_eq!(cfg.train.batch_size, RunConfig::desk().train.batch_size);
    }

    #[test]
    fn unknown_keys_and_mismatches_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[features]\nn_mels = 40\n").is_err());
    }
}
