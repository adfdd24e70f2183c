//! The streaming speech-to-speech network: a chunked Conformer encoder with
//! source and target CTC probes, an autoregressive text decoder, and a
//! non-autoregressive text-to-unit generator, trained jointly.

mod decoder;
mod encoder;
mod layers;
mod t2u;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{CtcDistribution, CtcError};
use crate::numerics::{load_checkpoint, save_checkpoint, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::rng;
use crate::toyspeech::{Corpus, Sample, ToyLanguageSpec};
use crate::vocab::{BLANK, FIRST_CONTENT};

pub use decoder::DecoderState;
pub use encoder::EncoderCache;
pub use layers::KvCache;
pub use t2u::T2uState;
pub use train::{
    load_training_checkpoint, save_training_checkpoint, train_multichunk, training_prefix_lengths, StepLog,
    TrainConfig, TrainOutcome, TrainingState,
};

use decoder::Decoder;
use encoder::Encoder;
use layers::Linear;
use t2u::TextToUnit;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: String },
    #[error("training corpus is empty")]
    EmptyCorpus,
}

/// Encoder chunk size `C`; `Infinite` is whole-utterance (offline) encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChunkSize {
    Finite(usize),
    Infinite,
}

impl ChunkSize {
    pub fn finite(c: usize) -> Result<Self, ModelError> {
        if c == 0 {
            return Err(ModelError::Config("chunk size must be at least 1".into()));
        }
        Ok(Self::Finite(c))
    }

    /// Frames read per chunk for a stream of `total` frames.
    pub fn frames(self, total: usize) -> usize {
        match self {
            Self::Finite(c) => c.min(total.max(1)),
            Self::Infinite => total.max(1),
        }
    }

    /// Smallest chunk boundary at or after `j`, capped at `total`.
    pub fn round_up(self, j: usize, total: usize) -> usize {
        match self {
            Self::Finite(c) => (j.div_ceil(c) * c).min(total),
            Self::Infinite => total,
        }
    }
}

impl fmt::Display for ChunkSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(c) => write!(f, "{c}"),
            Self::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for ChunkSize {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "offline" => Ok(Self::Infinite),
            other => {
                let c: usize = other
                    .parse()
                    .map_err(|_| ModelError::Config(format!("chunk size {other:?} is neither a positive integer nor \"inf\"")))?;
                Self::finite(c)
            }
        }
    }
}

impl Serialize for ChunkSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ChunkSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the encoder chunk size is chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "chunk")]
pub enum ChunkPolicy {
    /// One `C ~ U{1..max |X|}` per batch.
    Multi,
    /// Always the given chunk size.
    Fixed(usize),
    /// Whole-utterance encoding.
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub s2ut: f64,
    pub ar_s2tt: f64,
    pub asr: f64,
    pub nar_s2tt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            s2ut: 1.0,
            ar_s2tt: 8.0,
            asr: 4.0,
            nar_s2tt: 4.0,
        }
    }
}

impl LossWeights {
    fn as_array(&self) -> [f64; 4] {
        [self.s2ut, self.ar_s2tt, self.asr, self.nar_s2tt]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub encoder_layers: usize,
    pub conv_kernel: usize,
    pub decoder_layers: usize,
    pub t2u_encoder_layers: usize,
    pub unit_decoder_layers: usize,
    pub upsample_rate: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub unit_vocab_size: usize,
    pub chunk_policy: ChunkPolicy,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_dim: 16,
            width: 64,
            heads: 4,
            ffn_multiplier: 4,
            encoder_layers: 2,
            conv_kernel: 7,
            decoder_layers: 2,
            t2u_encoder_layers: 2,
            unit_decoder_layers: 2,
            upsample_rate: 8,
            source_vocab_size: 24,
            target_vocab_size: 24,
            unit_vocab_size: 32,
            chunk_policy: ChunkPolicy::Multi,
            loss_weights: LossWeights::default(),
        }
    }
}

/// Upsample rate `round(2.5 · mean |U| / |Y|)`, at least 1.
pub fn upsample_rate_for(mean_unit_ratio: f64) -> usize {
    ((2.5 * mean_unit_ratio).round() as usize).max(1)
}

impl ModelConfig {
    /// Default architecture sized for a toy language and its corpus statistics.
    pub fn for_corpus(corpus: &Corpus) -> Self {
        Self::for_spec(&corpus.spec, corpus.mean_unit_ratio())
    }

    pub fn for_spec(spec: &ToyLanguageSpec, mean_unit_ratio: f64) -> Self {
        Self {
            frame_dim: spec.frame_dim,
            source_vocab_size: spec.source_vocab_size,
            target_vocab_size: spec.target_vocab_size,
            unit_vocab_size: spec.unit_vocab_size,
            upsample_rate: upsample_rate_for(mean_unit_ratio),
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_multiplier
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.upsample_rate == 0 {
            return fail("upsample rate must be at least 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} is not divisible into {} heads", self.width, self.heads));
        }
        if self.frame_dim == 0 || self.ffn_multiplier == 0 {
            return fail("frame_dim and ffn_multiplier must be positive".into());
        }
        for (name, v) in [
            ("source", self.source_vocab_size),
            ("target", self.target_vocab_size),
            ("unit", self.unit_vocab_size),
        ] {
            if v <= FIRST_CONTENT {
                return fail(format!("{name} vocabulary of {v} has no content ids"));
            }
        }
        if self.loss_weights.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail(format!("loss weights must be finite and non-negative: {:?}", self.loss_weights));
        }
        if let ChunkPolicy::Fixed(0) = self.chunk_policy {
            return fail("fixed chunk size must be at least 1".into());
        }
        Ok(())
    }
}

/// Scalar values of the four training objectives and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub s2ut: f64,
    pub ar_s2tt: f64,
    pub asr: f64,
    pub nar_s2tt: f64,
    pub total: f64,
}

impl LossBundle {
    /// Weighted sum of the components. Terms with zero weight are left out so
    /// that an infeasible but unused objective does not poison the total.
    pub fn weighted_total(weights: &LossWeights, parts: [f64; 4]) -> f64 {
        weights
            .as_array()
            .iter()
            .zip(parts)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, l)| w * l)
            .sum()
    }
}

/// Graph handles of each objective, for callers that differentiate them.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub s2ut: Var,
    pub ar_s2tt: Var,
    pub asr: Var,
    pub nar_s2tt: Var,
    pub total: Var,
}

/// Per-position log-probabilities of the two encoder CTC probes.
#[derive(Debug, Clone)]
pub struct Probes {
    pub asr: Tensor,
    pub nar_s2tt: Tensor,
}

impl Probes {
    pub fn asr_distribution(&self) -> Result<CtcDistribution, ModelError> {
        Ok(CtcDistribution::from_log_probs(&self.asr, BLANK)?)
    }

    pub fn nar_distribution(&self) -> Result<CtcDistribution, ModelError> {
        Ok(CtcDistribution::from_log_probs(&self.nar_s2tt, BLANK)?)
    }
}

/// Units produced for newly added text positions.
#[derive(Debug, Clone)]
pub struct UnitChunk {
    /// Collapsed unit ids, ready to append to earlier output.
    pub units: Vec<usize>,
    /// Per-slot log-probabilities `[positions · r, unit vocab]`.
    pub log_probs: Tensor,
}

/// A parameterised network. Immutable during inference, so it can be shared
/// across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    asr_probe: Linear,
    nar_probe: Linear,
    decoder: Decoder,
    t2u: TextToUnit,
}

/// Metadata key holding the model configuration inside a checkpoint.
pub const CONFIG_META_KEY: &str = "model_config";

impl Model {
    /// Freshly initialised weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::substream(seed, "model-init");
        let mut ps = ParamStore::new();
        let encoder = Encoder::new(&mut ps, &config, &mut r)?;
        let asr_probe = Linear::new(&mut ps, "probe.asr", config.width, config.source_vocab_size, &mut r)?;
        let nar_probe = Linear::new(&mut ps, "probe.nar", config.width, config.target_vocab_size, &mut r)?;
        let decoder = Decoder::new(&mut ps, &config, &mut r)?;
        let t2u = TextToUnit::new(&mut ps, &config, &mut r)?;
        Ok(Self {
            config,
            params: ps,
            encoder,
            asr_probe,
            nar_probe,
            decoder,
            t2u,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn upsample_rate(&self) -> usize {
        self.t2u.rate()
    }

    // ----- encoder and probes -------------------------------------------------

    pub fn encoder_cache(&self, chunk: ChunkSize) -> EncoderCache {
        EncoderCache::new(chunk, self.encoder.num_layers())
    }

    /// Encodes the next chunk(s) of a stream and returns their hidden states.
    pub fn encode_chunk(&self, cache: &mut EncoderCache, frames: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::inference();
        let h = self.encoder.forward(&mut g, &self.params, frames, cache, None)?;
        Ok(g.value(h).clone())
    }

    /// Hidden states `H` of a whole utterance under chunk size `chunk`.
    pub fn encode(&self, x: &Tensor, chunk: ChunkSize) -> Result<Tensor, ModelError> {
        let mut cache = self.encoder_cache(chunk);
        self.encode_chunk(&mut cache, x)
    }

    /// Like [`Model::encode`], also returning every raw attention weight
    /// matrix (layer-major, then head).
    pub fn encode_with_attention(&self, x: &Tensor, chunk: ChunkSize) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        let mut g = Graph::inference();
        let mut cache = self.encoder_cache(chunk);
        let mut weights = Vec::new();
        let h = self.encoder.forward(&mut g, &self.params, x, &mut cache, Some(&mut weights))?;
        Ok((g.value(h).clone(), weights))
    }

    fn probe_vars(&self, g: &mut Graph, h: Var) -> Result<(Var, Var), ModelError> {
        let a = self.asr_probe.forward(g, &self.params, h)?;
        let y = self.nar_probe.forward(g, &self.params, h)?;
        Ok((g.log_softmax(a), g.log_softmax(y)))
    }

    /// Source (ASR) and target (NAR-S2TT) CTC log-probabilities for each row of `h`.
    pub fn probe(&self, h: &Tensor) -> Result<Probes, ModelError> {
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let (a, y) = self.probe_vars(&mut g, hv)?;
        Ok(Probes {
            asr: g.value(a).clone(),
            nar_s2tt: g.value(y).clone(),
        })
    }

    // ----- text decoder -------------------------------------------------------

    pub fn decoder_state(&self) -> DecoderState {
        DecoderState::new(self.decoder.num_layers())
    }

    /// Next-token log-probabilities given the first `prefix` rows of `memory`.
    /// The chosen token must be committed with [`DecoderState::push`].
    pub fn decode_step(&self, state: &mut DecoderState, memory: &Tensor, prefix: usize) -> Result<Vec<f64>, ModelError> {
        self.decoder.step(&self.params, state, memory, prefix)
    }

    /// Greedy step: picks and commits the most likely token.
    pub fn decode_greedy(&self, state: &mut DecoderState, memory: &Tensor, prefix: usize) -> Result<usize, ModelError> {
        let logp = self.decode_step(state, memory, prefix)?;
        let token = argmax(&logp);
        state.push(token)?;
        Ok(token)
    }

    /// Teacher-forced decoding of `inputs` where row `i` sees `prefix[i]`
    /// encoder states. Returns `(D^text, log-probabilities)`.
    pub fn decode_teacher_forced(
        &self,
        memory: &Tensor,
        inputs: &[usize],
        prefix: &[usize],
    ) -> Result<(Tensor, Tensor), ModelError> {
        let mut g = Graph::inference();
        let mem = g.constant(memory.clone());
        let mut caches = vec![KvCache::default(); self.decoder.num_layers()];
        let (text, logits) = self.decoder.forward(&mut g, &self.params, mem, inputs, prefix, &mut caches)?;
        let logp = g.log_softmax(logits);
        Ok((g.value(text).clone(), g.value(logp).clone()))
    }

    // ----- text to unit -------------------------------------------------------

    pub fn t2u_state(&self) -> T2uState {
        T2uState::new(self.t2u.encoder_layers(), self.t2u.decoder_layers())
    }

    /// Unit log-probabilities for the slots of newly added `D^text` rows.
    pub fn t2u_extend(&self, state: &mut T2uState, text: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::inference();
        let t = g.constant(text.clone());
        let lp = self.t2u.forward(&mut g, &self.params, t, state)?;
        Ok(g.value(lp).clone())
    }

    /// Greedy units for newly added `D^text` rows.
    ///
    /// The raw argmax label of the last slot is carried across calls, so the
    /// concatenation of all chunks equals greedy CTC decoding of the full
    /// slot sequence.
    pub fn t2u_generate(&self, state: &mut T2uState, text: Option<&Tensor>) -> Result<UnitChunk, ModelError> {
        let Some(text) = text else {
            return Ok(UnitChunk {
                units: Vec::new(),
                log_probs: Tensor::zeros(&[1, self.config.unit_vocab_size]),
            });
        };
        let log_probs = self.t2u_extend(state, text)?;
        let mut units = Vec::new();
        let mut prev = state.last_label();
        for label in log_probs.argmax_rows() {
            if label != BLANK && Some(label) != prev {
                units.push(label);
            }
            prev = Some(label);
        }
        if let Some(l) = prev {
            state.set_last_label(l);
        }
        Ok(UnitChunk { units, log_probs })
    }

    // ----- training objective -------------------------------------------------

    /// Records all four objectives for `sample` under chunk size `chunk`.
    ///
    /// The decoder's per-token speech prefix comes from the expected CTC
    /// counts of the probes on this same forward pass, without gradient.
    pub fn loss_graph(&self, g: &mut Graph, sample: &Sample, chunk: ChunkSize) -> Result<LossVars, ModelError> {
        let ps = &self.params;
        let mut cache = self.encoder_cache(chunk);
        let h = self.encoder.forward(g, ps, &sample.x, &mut cache, None)?;
        let (asr_lp, nar_lp) = self.probe_vars(g, h)?;

        let y_content = sample.y_content();
        let asr = g.ctc_loss(asr_lp, &sample.a, BLANK)?;
        let asr = g.scale(asr, 1.0 / sample.a.len().max(1) as f64);
        let nar = g.ctc_loss(nar_lp, y_content, BLANK)?;
        let nar = g.scale(nar, 1.0 / y_content.len().max(1) as f64);

        let asr_dist = CtcDistribution::from_log_probs(g.value(asr_lp), BLANK)?;
        let nar_dist = CtcDistribution::from_log_probs(g.value(nar_lp), BLANK)?;
        let prefix = training_prefix_lengths(&asr_dist, &nar_dist, sample.y.len(), chunk);

        let mut inputs = Vec::with_capacity(sample.y.len());
        inputs.push(crate::vocab::EOS);
        inputs.extend_from_slice(&sample.y[..sample.y.len() - 1]);
        let mut caches = vec![KvCache::default(); self.decoder.num_layers()];
        let (text, logits) = self.decoder.forward(g, ps, h, &inputs, &prefix, &mut caches)?;
        let ar = g.cross_entropy(logits, &sample.y)?;

        let mut t2u_state = self.t2u_state();
        let unit_lp = self.t2u.forward(g, ps, text, &mut t2u_state)?;
        let s2ut = g.ctc_loss(unit_lp, &sample.u, BLANK)?;
        let s2ut = g.scale(s2ut, 1.0 / sample.u.len().max(1) as f64);

        let w = self.config.loss_weights;
        let mut terms = Vec::new();
        for (weight, v) in [(w.s2ut, s2ut), (w.ar_s2tt, ar), (w.asr, asr), (w.nar_s2tt, nar)] {
            if weight != 0.0 {
                terms.push(g.scale(v, weight));
            }
        }
        let total = match terms.split_first() {
            None => g.constant(Tensor::scalar(0.0)),
            Some((first, rest)) => {
                let mut acc = *first;
                for t in rest {
                    acc = g.add(acc, *t)?;
                }
                acc
            }
        };
        Ok(LossVars {
            s2ut,
            ar_s2tt: ar,
            asr,
            nar_s2tt: nar,
            total,
        })
    }

    /// Values of the four objectives and their weighted total.
    pub fn compute_multitask_loss(&self, sample: &Sample, chunk: ChunkSize) -> Result<LossBundle, ModelError> {
        let mut g = Graph::inference();
        let v = self.loss_graph(&mut g, sample, chunk)?;
        let parts = [
            g.value(v.s2ut).item(),
            g.value(v.ar_s2tt).item(),
            g.value(v.asr).item(),
            g.value(v.nar_s2tt).item(),
        ];
        Ok(LossBundle {
            s2ut: parts[0],
            ar_s2tt: parts[1],
            asr: parts[2],
            nar_s2tt: parts[3],
            total: LossBundle::weighted_total(&self.config.loss_weights, parts),
        })
    }

    // ----- persistence --------------------------------------------------------

    /// Named parameter tensors in store order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.value())).collect()
    }

    /// Writes a weights-only checkpoint with the config in its metadata.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let meta = serde_json::json!({ CONFIG_META_KEY: self.config });
        save_checkpoint(dir, &self.named_tensors(), meta)?;
        Ok(())
    }

    /// Loads the weights of any checkpoint written by this crate; extra
    /// tensors (such as optimizer moments) are ignored.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let (tensors, meta) = load_checkpoint(dir)?;
        let config: ModelConfig = serde_json::from_value(meta.get(CONFIG_META_KEY).cloned().ok_or_else(|| {
            ModelError::Checkpoint(format!("{}: metadata lacks {CONFIG_META_KEY}", dir.display()))
        })?)
        .map_err(|e| ModelError::Checkpoint(format!("{}: bad model config: {e}", dir.display())))?;
        let mut model = Self::new(config, 0)?;
        model.assign(&tensors, dir)?;
        Ok((model, meta))
    }

    pub(crate) fn assign(&mut self, tensors: &[(String, Tensor)], dir: &Path) -> Result<(), ModelError> {
        let ids: Vec<_> = self.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::Checkpoint(format!("{}: missing tensor {name}", dir.display())))?;
            self.params.set_value(id, t.1.clone()).map_err(|e| {
                ModelError::Checkpoint(format!("{}: tensor {name}: {e}", dir.display()))
            })?;
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
