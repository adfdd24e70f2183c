//! Run configuration: a TOML file, overridden field by field by flags.
//!
//! The fully resolved configuration is written next to every command's
//! outputs, so `simulstream --config <out>/resolved_config.toml <command>`
//! repeats the run.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use simulstream::model::{ChunkPolicy, ChunkSize, LossWeights, ModelConfig};
use simulstream::numerics::{AdamConfig, InverseSqrtSchedule};
use simulstream::policy::{ClockMode, CostModel, InferenceOptions};
use simulstream::toyspeech::{Corpus, ToyLanguageParams};

use crate::UsageError;

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: ModelOverrides,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            data: DataConfig::default(),
            model: ModelOverrides::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training samples.
    pub n: usize,
    /// Validation samples; a tenth of `n` when unset.
    pub n_valid: Option<usize>,
    /// Test samples; a tenth of `n` when unset.
    pub n_test: Option<usize>,
    /// Toy language knobs. Its `seed` is always taken from the run seed.
    pub toy: ToyLanguageParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            n_valid: None,
            n_test: None,
            toy: ToyLanguageParams::default(),
        }
    }
}

/// Architecture settings; unset fields keep the corpus-derived defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_multiplier: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub t2u_encoder_layers: Option<usize>,
    pub unit_decoder_layers: Option<usize>,
    pub upsample_rate: Option<usize>,
    pub loss_weights: Option<LossWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ChunkMode {
    Multi,
    Fixed,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub chunk_mode: ChunkMode,
    /// Chunk size for `chunk_mode = "fixed"`.
    pub chunk: Option<usize>,
    /// Log a progress line every this many steps.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let schedule = InverseSqrtSchedule::default();
        Self {
            steps: 4000,
            batch_size: 16,
            peak_lr: schedule.peak_lr,
            warmup_steps: schedule.warmup_steps,
            clip_norm: 1.0,
            chunk_mode: ChunkMode::Multi,
            chunk: None,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Simul,
    Waitk,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Simul => "simul",
            Mode::Waitk => "waitk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Counted,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: Mode,
    /// Chunk size for simultaneous inference.
    pub chunk: Option<ChunkSize>,
    /// Wait-k lag in chunks.
    pub k: Option<usize>,
    pub grid: Vec<ChunkSize>,
    pub clock: ClockKind,
    pub costs: CostModel,
    pub frame_ms: f64,
    pub unit_ms: f64,
    /// Evaluate only the first `limit` samples.
    pub limit: Option<usize>,
    /// Sample index for `inspect`.
    pub sample: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let opts = InferenceOptions::default();
        Self {
            mode: Mode::Simul,
            chunk: None,
            k: None,
            grid: [2, 4, 8, 16].into_iter().map(ChunkSize::Finite).chain([ChunkSize::Infinite]).collect(),
            clock: ClockKind::Counted,
            costs: CostModel::default(),
            frame_ms: opts.frame_ms,
            unit_ms: opts.unit_ms,
            limit: None,
            sample: 0,
        }
    }
}

impl EvalSection {
    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            frame_ms: self.frame_ms,
            unit_ms: self.unit_ms,
            clock: match self.clock {
                ClockKind::Counted => ClockMode::Counted(self.costs),
                ClockKind::Wall => ClockMode::Wall,
            },
            max_tokens: None,
        }
    }
}

impl RunConfig {
    /// Reads a configuration file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn toy_params(&self) -> ToyLanguageParams {
        ToyLanguageParams {
            seed: self.seed,
            ..self.data.toy.clone()
        }
    }

    pub fn model_config(&self, corpus: &Corpus) -> Result<ModelConfig> {
        let base = ModelConfig::for_corpus(corpus);
        let m = &self.model;
        let chunk_policy = match (self.train.chunk_mode, self.train.chunk) {
            (ChunkMode::Multi, None) => ChunkPolicy::Multi,
            (ChunkMode::Offline, None) => ChunkPolicy::Offline,
            (ChunkMode::Fixed, Some(c)) if c > 0 => ChunkPolicy::Fixed(c),
            (ChunkMode::Fixed, _) => return Err(UsageError("--chunk-mode fixed needs --C <positive integer>".into()).into()),
            (mode, Some(_)) => {
                return Err(UsageError(format!("--C only applies to --chunk-mode fixed, not {mode:?}")).into())
            }
        };
        Ok(ModelConfig {
            width: m.width.unwrap_or(base.width),
            heads: m.heads.unwrap_or(base.heads),
            ffn_multiplier: m.ffn_multiplier.unwrap_or(base.ffn_multiplier),
            encoder_layers: m.encoder_layers.unwrap_or(base.encoder_layers),
            conv_kernel: m.conv_kernel.unwrap_or(base.conv_kernel),
            decoder_layers: m.decoder_layers.unwrap_or(base.decoder_layers),
            t2u_encoder_layers: m.t2u_encoder_layers.unwrap_or(base.t2u_encoder_layers),
            unit_decoder_layers: m.unit_decoder_layers.unwrap_or(base.unit_decoder_layers),
            upsample_rate: m.upsample_rate.unwrap_or(base.upsample_rate),
            loss_weights: m.loss_weights.unwrap_or(base.loss_weights),
            chunk_policy,
            ..base
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            schedule: InverseSqrtSchedule {
                peak_lr: self.train.peak_lr,
                warmup_steps: self.train.warmup_steps,
            },
            ..AdamConfig::default()
        }
    }

    /// Writes the snapshot for `command` into `dir`.
    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<()> {
        let body = toml::to_string(self).context("serializing resolved config")?;
        let text = format!("# Resolved configuration of `simulstream {command}`.\n{body}");
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
