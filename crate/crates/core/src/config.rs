//! Experiment configuration: one JSON document with env, variant, network,
//! learner, distillation and evaluation sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::nets::NetDims;
use crate::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train1,
    Train2,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Sample centralized messages instead of using their mean.
    pub sample_message: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 200, sample_message: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub variant: Variant,
    #[serde(default = "default_stage")]
    pub stage: Stage,
    #[serde(default)]
    pub nets: NetDims,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_stage() -> Stage {
    Stage::Train1
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(env: EnvConfig, variant: Variant) -> Self {
        ExperimentConfig {
            env,
            variant,
            stage: default_stage(),
            nets: NetDims::default(),
            learner: LearnerConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            seeds: default_seeds(),
            out_dir: default_out_dir(),
        }
    }

    /// Parses and validates; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config { path, message: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.spec()?.validate()?;
        let n = &self.nets;
        for (p, v) in [
            ("d_z", n.d_z),
            ("d_h", n.d_h),
            ("d_g", n.d_g),
            ("mix_embed", n.mix_embed),
            ("hyper_hidden", n.hyper_hidden),
            ("student_hidden", n.student_hidden),
            ("critic_hidden", n.critic_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config { path: format!("nets.{p}"), message: "must be >= 1".into() });
            }
        }
        if !(n.sigma_min > 0.0 && n.sigma_min.is_finite()) {
            return Err(Error::Config { path: "nets.sigma_min".into(), message: "must be positive".into() });
        }
        self.learner.validate()?;
        self.distill.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config { path: "eval.episodes".into(), message: "must be >= 1".into() });
        }
        if self.seeds.is_empty() {
            return Err(Error::Config { path: "seeds".into(), message: "at least one seed is required".into() });
        }
        Ok(())
    }

    /// Hash of everything that determines results apart from the seed:
    /// sha256 over the canonical (key-sorted) JSON without `stage`,
    /// `seeds` and `out_dir`, truncated to 64 bits.
    pub fn config_hash(&self) -> u64 {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for k in ["stage", "seeds", "out_dir"] {
                obj.remove(k);
            }
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.config_hash())
    }
}
