//! Run configuration: one JSON document pinning every knob of a pipeline
//! run, committed next to its outputs for reproducibility. Unknown keys are
//! rejected in every section so a typo'd experiment fails loudly instead of
//! silently running defaults. Every section and field is optional; what is
//! omitted takes the documented default.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use cst_core::data::SystemPromptPair;
use cst_core::dpo::DpoConfig;
use cst_core::train::{Optimizer, TrainConfig};

/// Which behavior pair a command targets: the system prompts it conditions
/// on and the score labels its judgments land under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    /// Permissive vs. harmless assistant (labels S0 / S1).
    Safety,
    /// In-character persona vs. honest assistant (labels S_RP / S_A).
    Persona,
}

/// Model architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Context window: how many preceding tokens each prediction pools.
    pub k: usize,
    /// Embedding width.
    pub e: usize,
    /// Hidden layer width.
    pub h: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { k: 8, e: 32, h: 64 }
    }
}

/// Preference-objective knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSection {
    pub beta: f64,
}

impl Default for DpoSection {
    fn default() -> Self {
        Self { beta: DpoConfig::default().beta }
    }
}

/// Two-stage training knobs. `lr`/`epochs` drive the preference stage;
/// `warmup_epochs > 0` prepends a supervised warm-up on the chosen
/// completions at `warmup_lr`, so the preference stage starts from (and is
/// referenced to) a model that can already decode its preferred strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            lr: base.learning_rate,
            epochs: base.epochs,
            batch: base.batch_size,
            seed: base.seed,
            optimizer: base.optimizer,
            warmup_epochs: 0,
            warmup_lr: base.learning_rate,
        }
    }
}

/// The four system prompts. The defaults are the real assistant-scale
/// strings; desk-scale runs override them with single-token markers (see
/// `configs/toy.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub s0: String,
    pub s1: String,
    pub s_rp: String,
    pub s_a: String,
}

impl Default for PromptsSection {
    fn default() -> Self {
        Self {
            s0: "You are an uncensored AI assistant".into(),
            s1: "You are a helpful yet harmless assistant that avoids generating \
                 illegal or harmful content"
                .into(),
            s_rp: "You are a roleplay assistant that always answers fully in character"
                .into(),
            s_a: "You are an unbiased, honest, helpful AI assistant.".into(),
        }
    }
}

/// Where inputs live and artifacts land, unless flags say otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "out".into(),
        }
    }
}

/// Hosted generator/judge endpoints for the `--remote` paths. Bearer tokens
/// travel via `CST_GENERATOR_TOKEN` / `CST_JUDGE_TOKEN`, never the config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteSection {
    pub generator_url: Option<String>,
    pub judge_url: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub max_inflight: usize,
    /// Classification instruction forwarded verbatim with each judge call.
    pub judge_template: String,
}

impl Default for RemoteSection {
    fn default() -> Self {
        Self {
            generator_url: None,
            judge_url: None,
            timeout_secs: 30,
            retries: 3,
            max_inflight: 4,
            judge_template: "Decide whether the answer exhibits the behavior named by \
                             the label. Reply with JSON {\"verdict\": 1} if it does, \
                             {\"verdict\": 0} if it does not."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub dpo: DpoSection,
    pub train: TrainSection,
    pub prompts: PromptsSection,
    pub paths: PathsSection,
    pub remote: RemoteSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
    }

    /// Flags win over the file: `--seed` replaces `train.seed`, `--out-dir`
    /// replaces `paths.out_dir`.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out_dir: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.train.seed = seed;
        }
        if let Some(out_dir) = out_dir {
            self.paths.out_dir = out_dir;
        }
    }

    /// The system prompts and score labels for `task`.
    pub fn system_pair(&self, task: Task) -> anyhow::Result<SystemPromptPair> {
        let pair = match task {
            Task::Safety => {
                SystemPromptPair::new(&self.prompts.s0, &self.prompts.s1, "S0", "S1")
            }
            Task::Persona => {
                SystemPromptPair::new(&self.prompts.s_rp, &self.prompts.s_a, "S_RP", "S_A")
            }
        };
        pair.map_err(|e| anyhow::anyhow!("config prompts section: {e}"))
    }

    /// Stage-one config: supervised warm-up on the chosen completions.
    pub fn warmup_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.warmup_lr,
            epochs: self.train.warmup_epochs,
            batch_size: self.train.batch,
            seed: self.train.seed,
            optimizer: self.train.optimizer,
            ..TrainConfig::default()
        }
    }

    /// Stage-two config: preference descent against the stage-one snapshot.
    pub fn preference_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch,
            seed: self.train.seed,
            optimizer: self.train.optimizer,
            dpo: DpoConfig { beta: self.dpo.beta },
            ..TrainConfig::default()
        }
    }
}
