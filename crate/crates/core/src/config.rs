//! Run configuration: one JSON document with a section per pipeline stage,
//! a canonical hash for artifact chaining, and master-seed derivation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::RlConfig;
use crate::auxtasks::AuxConfig;
use crate::checkpoint::sha256_hex;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::negmine::MiningConfig;
use crate::optim::{AgentTrainConfig, OptimConfig};
use crate::rngutil::derive_seed;
use crate::synthdata::{CorpusParams, GenParams};

/// Environment count plus generation and corpus-split settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_envs: usize,
    pub gen: GenParams,
    pub corpus: CorpusParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_envs: 25, gen: GenParams::default(), corpus: CorpusParams::default() }
    }
}

/// Optimizer settings for the two training stages.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSections {
    pub pretrain: OptimConfig,
    pub agent: AgentTrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Slice fractions for the ranking experiment.
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fractions: vec![0.01, 0.02, 0.10] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::InvalidParams("eval.fractions must be non-empty".into()));
        }
        for &q in &self.fractions {
            if !(q > 0.0 && q <= 0.5) {
                return Err(Error::InvalidParams(format!(
                    "eval fraction {q} outside (0, 0.5]"
                )));
            }
        }
        Ok(())
    }
}

/// The whole run in one document. Every field has a default, so a config
/// file only needs the overrides; unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Stage seeds are derived from it by [`RunConfig::seeded`];
    /// the seeds written inside the sections below are overwritten there.
    pub seed: u64,
    pub data: DataConfig,
    pub mining: MiningConfig,
    /// Model dimensions. `vocab_size` is replaced by the generated
    /// vocabulary's size whenever artifacts are loaded from a data directory.
    pub model: EncoderConfig,
    pub tasks: AuxConfig,
    pub optim: OptimSections,
    pub agent: RlConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_envs < 2 {
            return Err(Error::InvalidParams("data.n_envs must be at least 2".into()));
        }
        self.data.gen.validate()?;
        self.model.validate()?;
        self.tasks.validate()?;
        self.optim.pretrain.validate()?;
        self.optim.agent.optim.validate()?;
        if !(self.optim.agent.lr_warm > 0.0) || !(self.optim.agent.lr_cold > 0.0) {
            return Err(Error::InvalidParams("agent learning rates must be positive".into()));
        }
        self.agent.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Canonical serialization: parse then reserialize, so the hash does not
    /// depend on key order or whitespace in the config file.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// A copy with every stage seed derived from the master seed.
    pub fn seeded(&self) -> Self {
        let mut cfg = self.clone();
        cfg.data.gen.seed = derive_seed(self.seed, "gen");
        cfg.mining.seed = derive_seed(self.seed, "mining");
        cfg.optim.pretrain.seed = derive_seed(self.seed, "pretrain");
        cfg.optim.agent.optim.seed = derive_seed(self.seed, "agent");
        cfg.agent.seed = derive_seed(self.seed, "rl");
        cfg
    }

    /// Seed for corpus generation, derived like the stage seeds above.
    pub fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, "corpus")
    }
}
