//! One JSON document configuring a whole run: synthetic catalog, interaction
//! split, TransE pretraining, agent training and serving.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentContext;
use crate::catalog::{generate_synthetic, Catalog, InteractionSplit, SynthConfig};
use crate::error::{Error, Result};
use crate::kg_embed::{pretrain_transe, EmbeddingTable, TransEConfig};
use crate::training::TrainConfig;

/// Fractions of the distinct interactions held out for validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    /// Idle sessions are dropped after this many minutes.
    pub ttl_minutes: u64,
    /// Allowed browser origin; any origin when absent.
    pub cors_origin: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            ttl_minutes: 30,
            cors_origin: None,
        }
    }
}

fn default_synth() -> SynthConfig {
    SynthConfig::new(20, 100, 30, 6, 3, 30).with_popularity_exponent(1.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every stage; overrides `train.seed`.
    pub seed: u64,
    #[serde(default = "default_synth")]
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub transe: TransEConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: default_synth(),
            split: SplitConfig::default(),
            transe: TransEConfig::default(),
            train: TrainConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let SplitConfig { validation, test } = self.split;
        if !(0.0..1.0).contains(&validation) || !(0.0..1.0).contains(&test) || validation + test >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions {validation} and {test} must be in [0, 1) with sum below 1"
            )));
        }
        if self.transe.d == 0 {
            return Err(Error::Config("transe.d must be positive".into()));
        }
        self.train_config().validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Training settings with the pipeline seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn generate_catalog(&self) -> Result<Catalog> {
        generate_synthetic(&self.synth, self.seed)
    }

    pub fn split(&self, c: &Catalog) -> Result<InteractionSplit> {
        InteractionSplit::new(c, self.split.validation, self.split.test, self.seed)
    }

    /// TransE on the catalog graph with the test interactions removed.
    pub fn pretrain(&self, c: &Catalog, split: &InteractionSplit) -> Result<EmbeddingTable> {
        pretrain_transe(&c.without_interaction_triples(&split.test), &self.transe, self.seed)
    }

    pub fn context<'a>(&'a self, c: &'a Catalog, scores: &'a EmbeddingTable) -> AgentContext<'a> {
        AgentContext {
            catalog: c,
            scores,
            cfg: &self.train.agent,
        }
    }
}
