use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, SplitMode};
use crate::editor::EditorConfig;
use crate::error::{Error, Result};
use crate::maskforge::MaskTrainerConfig;
use crate::nanomodel::{ModelConfig, PretrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// How the binarization threshold of a trained mask is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSelection {
    /// Use `mask.gamma` as configured.
    Fixed,
    /// Highest training RSR among sweep points within `pruned_budget`.
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_train_edits: usize,
    pub n_test_edits: usize,
    pub split_mode: SplitMode,
    /// Size of the relation-disjoint held-out set (0 disables it).
    pub n_disjoint_test_edits: usize,
    pub gamma_selection: GammaSelection,
    pub gamma_grid: Vec<f64>,
    pub pruned_budget: f64,
    pub prune_pcts: Vec<f64>,
    /// Leading neutral-evaluation tokens used for perplexity.
    pub ppl_tokens: usize,
    pub kl_temperature: f64,
    pub top_k_columns: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_train_edits: 20,
            n_test_edits: 10,
            split_mode: SplitMode::StratifiedByRelation,
            n_disjoint_test_edits: 10,
            gamma_selection: GammaSelection::Fixed,
            gamma_grid: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            pruned_budget: 0.15,
            prune_pcts: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            ppl_tokens: 10_000,
            kl_temperature: 1.0,
            top_k_columns: 5,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("experiment.{key}"),
                message: message.to_string(),
            })
        };
        if self.n_train_edits == 0 || self.n_test_edits == 0 {
            return bad("n_train_edits", "train and test edit counts must be positive");
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return bad("gamma_grid", "every threshold must lie in (0, 1)");
        }
        if !(self.pruned_budget > 0.0 && self.pruned_budget <= 1.0) {
            return bad("pruned_budget", "must lie in (0, 1]");
        }
        if self.prune_pcts.iter().any(|p| !(0.0..=1.0).contains(p)) || self.prune_pcts.windows(2).any(|w| w[1] < w[0])
        {
            return bad("prune_pcts", "must be sorted ascending within [0, 1]");
        }
        if self.ppl_tokens < 2 {
            return bad("ppl_tokens", "must be at least 2");
        }
        if !(self.kl_temperature > 0.0) {
            return bad("kl_temperature", "must be > 0");
        }
        Ok(())
    }
}

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed copied into every stage by [`RunConfig::with_seed`].
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub editor: EditorConfig,
    pub mask: MaskTrainerConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            editor: EditorConfig::default(),
            mask: MaskTrainerConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                key: "schema_version".into(),
                message: format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            });
        }
        self.corpus.validate()?;
        self.model.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config {
                key: "model.vocab_size".into(),
                message: format!(
                    "must equal corpus.vocab_size ({} vs {})",
                    self.model.vocab_size, self.corpus.vocab_size
                ),
            });
        }
        self.editor.validate(self.model.n_layers)?;
        self.mask.validate()?;
        self.experiment.validate()
    }

    /// Sets the master seed and derives every stage seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.pretrain.seed = seed;
        self.mask.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}
