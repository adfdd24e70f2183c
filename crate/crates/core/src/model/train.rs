//! Multi-chunk training with Adam, gradient clipping and resumable checkpoints.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChunkPolicy, ChunkSize, LossBundle, Model, ModelConfig, ModelError, CONFIG_META_KEY};
use crate::ctc::CtcDistribution;
use crate::numerics::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, Tensor};
use crate::rng;
use crate::toyspeech::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            seed: 1,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
        }
    }
}

/// Mean losses of one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub chunk: ChunkSize,
    pub s2ut: f64,
    pub ar_s2tt: f64,
    pub asr: f64,
    pub nar_s2tt: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Samples left out because one of their objectives was infeasible.
    pub skipped: usize,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainingState,
    pub logs: Vec<StepLog>,
}

/// Speech prefix length `g(i)` for target positions `i = 1..=positions`.
///
/// `g(i)` is the first frame `j` at which the expected source count grows and
/// the expected target count reaches `i`, moved up to the end of its chunk.
/// When no such frame exists the whole input is used.
pub fn training_prefix_lengths(
    asr: &CtcDistribution,
    nar: &CtcDistribution,
    positions: usize,
    chunk: ChunkSize,
) -> Vec<usize> {
    let t = asr.len();
    let na = asr.expected_prefix_counts();
    let nn = nar.expected_prefix_counts();
    (1..=positions)
        .map(|i| {
            (1..=t)
                .find(|&j| na.at(j) > na.at(j - 1) && nn.at(j) >= i as f64)
                .map_or(t, |j| chunk.round_up(j, t))
        })
        .collect()
}

impl TrainingState {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self, ModelError> {
        let model = Model::new(model_config, config.seed)?;
        let adam = Adam::new(config.adam, model.params());
        Ok(Self { model, adam, config })
    }

    pub fn step(&self) -> u64 {
        self.adam.step_count()
    }

    fn batch_chunk(&self, corpus: &Corpus, batch: &[usize], r: &mut impl Rng) -> ChunkSize {
        match self.model.config().chunk_policy {
            ChunkPolicy::Multi => {
                let longest = batch.iter().map(|&i| corpus.samples[i].num_frames()).max().unwrap_or(1);
                ChunkSize::Finite(r.random_range(1..=longest.max(1)))
            }
            ChunkPolicy::Fixed(c) => ChunkSize::Finite(c),
            ChunkPolicy::Offline => ChunkSize::Infinite,
        }
    }

    /// Runs optimisation steps until `target_step` updates have been applied
    /// in total, calling `on_step` after each one.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        target_step: u64,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>, ModelError> {
        if corpus.samples.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let mut logs = Vec::new();
        while self.step() < target_step {
            let log = self.train_step(corpus)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    fn train_step(&mut self, corpus: &Corpus) -> Result<StepLog, ModelError> {
        let step = self.step() + 1;
        let mut r = rng::indexed_stream(self.config.seed, "train-batch", step);
        let batch: Vec<usize> = (0..self.config.batch_size.max(1))
            .map(|_| r.random_range(0..corpus.samples.len()))
            .collect();
        let chunk = self.batch_chunk(corpus, &batch, &mut r);

        self.model.params_mut().zero_grad();
        let mut sums = [0.0; 5];
        let mut used = 0usize;
        let mut skipped = 0usize;
        for &idx in &batch {
            let sample = &corpus.samples[idx];
            let mut g = Graph::new();
            let vars = self.model.loss_graph(&mut g, sample, chunk)?;
            let parts = [
                g.value(vars.s2ut).item(),
                g.value(vars.ar_s2tt).item(),
                g.value(vars.asr).item(),
                g.value(vars.nar_s2tt).item(),
            ];
            let total = LossBundle::weighted_total(&self.model.config().loss_weights, parts);
            if total.is_nan() || parts.iter().any(|p| p.is_nan()) {
                return Err(ModelError::Diverged {
                    step,
                    what: format!("loss of sample {idx}"),
                });
            }
            if total.is_infinite() {
                log::warn!("step {step}: skipping sample {idx}, infeasible CTC objective at chunk size {chunk}");
                skipped += 1;
                continue;
            }
            g.backward_into(vars.total, self.model.params_mut())?;
            for (s, p) in sums.iter_mut().zip(parts.iter().chain([total].iter())) {
                *s += p;
            }
            used += 1;
        }

        let lr = self.adam.next_lr();
        let mut grad_norm = 0.0;
        if used > 0 {
            let params = self.model.params_mut();
            params.scale_grads(1.0 / used as f64);
            grad_norm = params.clip_grad_norm(self.config.clip_norm);
            if !grad_norm.is_finite() {
                return Err(ModelError::Diverged {
                    step,
                    what: "gradient norm".into(),
                });
            }
            self.adam.step(params)?;
        } else {
            // Keep the step counter moving so batches stay aligned with steps.
            self.model.params_mut().zero_grad();
            self.adam.step(self.model.params_mut())?;
            log::warn!("step {step}: every sample was skipped");
        }
        let mean = |s: f64| if used > 0 { s / used as f64 } else { f64::NAN };
        Ok(StepLog {
            step,
            chunk,
            s2ut: mean(sums[0]),
            ar_s2tt: mean(sums[1]),
            asr: mean(sums[2]),
            nar_s2tt: mean(sums[3]),
            total: mean(sums[4]),
            lr,
            grad_norm,
            skipped,
        })
    }
}

/// Trains a fresh model for `config.steps` steps.
pub fn train_multichunk(
    corpus: &Corpus,
    model_config: ModelConfig,
    config: TrainConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome, ModelError> {
    if corpus.samples.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let steps = config.steps;
    let mut state = TrainingState::new(model_config, config)?;
    let logs = state.run(corpus, steps, on_step)?;
    Ok(TrainOutcome { state, logs })
}

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";
const TRAINING_META_KEY: &str = "training";

#[derive(Serialize, Deserialize)]
struct TrainingMeta {
    step: u64,
    config: TrainConfig,
}

/// Writes weights, optimizer moments and the step counter.
pub fn save_training_checkpoint(dir: &Path, state: &TrainingState) -> Result<(), ModelError> {
    let mut tensors: Vec<(String, &Tensor)> = state.model.named_tensors();
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    for (name, m) in names.iter().zip(state.adam.first_moments()) {
        tensors.push((format!("{FIRST_MOMENT}{name}"), m));
    }
    for (name, v) in names.iter().zip(state.adam.second_moments()) {
        tensors.push((format!("{SECOND_MOMENT}{name}"), v));
    }
    let meta = serde_json::json!({
        CONFIG_META_KEY: state.model.config(),
        TRAINING_META_KEY: TrainingMeta { step: state.step(), config: state.config.clone() },
    });
    save_checkpoint(dir, &tensors, meta)?;
    Ok(())
}

/// Restores a state saved by [`save_training_checkpoint`].
pub fn load_training_checkpoint(dir: &Path) -> Result<TrainingState, ModelError> {
    let (model, meta) = Model::load(dir)?;
    let training: TrainingMeta = serde_json::from_value(meta.get(TRAINING_META_KEY).cloned().ok_or_else(|| {
        ModelError::Checkpoint(format!("{}: no optimizer state; not a training checkpoint", dir.display()))
    })?)
    .map_err(|e| ModelError::Checkpoint(format!("{}: bad training metadata: {e}", dir.display())))?;
    let (tensors, _) = load_checkpoint(dir)?;
    let find = |name: String| {
        tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| ModelError::Checkpoint(format!("{}: missing tensor {name}", dir.display())))
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (_, p) in model.params().iter() {
        first.push(find(format!("{FIRST_MOMENT}{}", p.name))?);
        second.push(find(format!("{SECOND_MOMENT}{}", p.name))?);
    }
    let adam = Adam::from_state(training.config.adam, training.step, first, second, model.params())?;
    Ok(TrainingState {
        model,
        adam,
        config: training.config,
    })
}
