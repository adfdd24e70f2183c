//! Synthetic parallel corpora standing in for (speech, transcript, translation, units).
//!
//! A [`ToyLanguageSpec`] fixes a source vocabulary with one canonical frame
//! vector per token, a codebook from source to target tokens, a class of
//! "modifier" tokens that swap behind the following head token (bounded
//! reordering), and a fixed unit expansion for every target token.
//! [`synthesize_corpus`] draws samples from it deterministically.

mod io;

pub use io::{read_corpus, write_corpus, CORPUS_FORMAT};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rng;
use crate::vocab::{EOS, FIRST_CONTENT};

#[derive(Debug, Error)]
pub enum ToySpeechError {
    #[error("invalid language spec: {0}")]
    InvalidSpec(String),
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("duration {duration} outside range {min}..={max}")]
    Duration { duration: usize, min: usize, max: usize },
    #[error("{path}: line {line} (byte offset {offset}): {message}")]
    Parse {
        path: String,
        line: usize,
        offset: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// User-facing knobs from which a [`ToyLanguageSpec`] is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLanguageParams {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub unit_vocab_size: usize,
    /// Frames per source token, inclusive.
    pub token_duration_range: (usize, usize),
    /// Source tokens per sample, inclusive.
    pub length_range: (usize, usize),
    /// Units per target token, inclusive.
    pub expansion_range: (usize, usize),
    pub frame_dim: usize,
    pub noise_std: f64,
    pub reorder_window: usize,
    /// Fraction of source content tokens that are modifiers.
    pub modifier_fraction: f64,
    pub seed: u64,
}

impl Default for ToyLanguageParams {
    fn default() -> Self {
        Self {
            source_vocab_size: 24,
            target_vocab_size: 24,
            unit_vocab_size: 32,
            token_duration_range: (2, 5),
            length_range: (3, 7),
            expansion_range: (2, 6),
            frame_dim: 16,
            noise_std: 0.3,
            reorder_window: 1,
            modifier_fraction: 0.25,
            seed: 1,
        }
    }
}

/// A fully specified toy language: everything needed to generate and check samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub unit_vocab_size: usize,
    pub token_duration_range: (usize, usize),
    pub length_range: (usize, usize),
    pub frame_dim: usize,
    pub noise_std: f64,
    pub reorder_window: usize,
    pub seed: u64,
    /// `codebook[s - FIRST_CONTENT]` is the target token for source token `s`.
    pub codebook: Vec<usize>,
    /// Source tokens that move behind the next non-modifier token.
    pub modifiers: Vec<usize>,
    /// `unit_expansion[y - FIRST_CONTENT]` is the unit sequence for target token `y`.
    pub unit_expansion: Vec<Vec<usize>>,
}

impl ToyLanguageSpec {
    pub fn generate(p: &ToyLanguageParams) -> Result<Self, ToySpeechError> {
        let invalid = |m: &str| Err(ToySpeechError::InvalidSpec(m.to_string()));
        if p.source_vocab_size < 4 || p.target_vocab_size < 4 || p.unit_vocab_size < 4 {
            return invalid("vocabulary sizes must be at least 4");
        }
        if p.token_duration_range.0 < 1 || p.token_duration_range.0 > p.token_duration_range.1 {
            return invalid("token_duration_range must satisfy 1 <= min <= max");
        }
        if p.length_range.0 < 1 || p.length_range.0 > p.length_range.1 {
            return invalid("length_range must satisfy 1 <= min <= max");
        }
        if p.expansion_range.0 < 1 || p.expansion_range.0 > p.expansion_range.1 {
            return invalid("expansion_range must satisfy 1 <= min <= max");
        }
        if p.frame_dim == 0 {
            return invalid("frame_dim must be positive");
        }
        if !p.noise_std.is_finite() || p.noise_std < 0.0 {
            return invalid("noise_std must be a non-negative real");
        }
        let n_src = p.source_vocab_size - FIRST_CONTENT;
        let n_tgt = p.target_vocab_size - FIRST_CONTENT;
        let n_unit = p.unit_vocab_size - FIRST_CONTENT;

        let mut r = rng::substream(p.seed, "language");
        let mut targets: Vec<usize> = (0..n_tgt).map(|i| i + FIRST_CONTENT).collect();
        targets.shuffle(&mut r);
        let codebook = (0..n_src).map(|i| targets[i % n_tgt]).collect();

        let mut src_ids: Vec<usize> = (0..n_src).map(|i| i + FIRST_CONTENT).collect();
        src_ids.shuffle(&mut r);
        let n_mod = ((n_src as f64 * p.modifier_fraction).round() as usize).min(n_src.saturating_sub(1));
        let mut modifiers: Vec<usize> = src_ids[..n_mod].to_vec();
        modifiers.sort_unstable();

        let unit_expansion = (0..n_tgt)
            .map(|_| {
                let len = r.random_range(p.expansion_range.0..=p.expansion_range.1);
                (0..len).map(|_| FIRST_CONTENT + r.random_range(0..n_unit)).collect()
            })
            .collect();

        Ok(Self {
            source_vocab_size: p.source_vocab_size,
            target_vocab_size: p.target_vocab_size,
            unit_vocab_size: p.unit_vocab_size,
            token_duration_range: p.token_duration_range,
            length_range: p.length_range,
            frame_dim: p.frame_dim,
            noise_std: p.noise_std,
            reorder_window: p.reorder_window,
            seed: p.seed,
            codebook,
            modifiers,
            unit_expansion,
        })
    }

    pub fn validate(&self) -> Result<(), ToySpeechError> {
        let invalid = |m: String| Err(ToySpeechError::InvalidSpec(m));
        if self.source_vocab_size < 4 || self.target_vocab_size < 4 || self.unit_vocab_size < 4 {
            return invalid("vocabulary sizes must be at least 4".into());
        }
        if self.token_duration_range.0 < 1 || self.token_duration_range.0 > self.token_duration_range.1 {
            return invalid("token_duration_range must satisfy 1 <= min <= max".into());
        }
        if self.codebook.len() != self.source_vocab_size - FIRST_CONTENT {
            return invalid("codebook must cover every source content token".into());
        }
        if self.unit_expansion.len() != self.target_vocab_size - FIRST_CONTENT {
            return invalid("unit_expansion must cover every target content token".into());
        }
        for (i, e) in self.unit_expansion.iter().enumerate() {
            if e.is_empty() || e.iter().any(|&u| u < FIRST_CONTENT || u >= self.unit_vocab_size) {
                return invalid(format!("unit expansion of target token {} is invalid", i + FIRST_CONTENT));
            }
        }
        Ok(())
    }

    pub fn is_modifier(&self, token: usize) -> bool {
        self.modifiers.binary_search(&token).is_ok()
    }

    /// Canonical frame vector for a source token.
    pub fn canonical_frame(&self, token: usize) -> Vec<f64> {
        let mut r = rng::indexed_stream(self.seed, "canonical-frame", token as u64);
        (0..self.frame_dim).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    /// Source-order to target-order permutation: each run of at most
    /// `reorder_window` modifiers moves behind the head token that follows it.
    pub fn reorder<T: Copy>(&self, tokens: &[usize], payload: &[T]) -> Vec<T> {
        let w = self.reorder_window;
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            if w > 0 && self.is_modifier(tokens[i]) {
                let mut j = i;
                while j < tokens.len() && j - i < w && self.is_modifier(tokens[j]) {
                    j += 1;
                }
                if j < tokens.len() && !self.is_modifier(tokens[j]) {
                    out.push(payload[j]);
                    out.extend_from_slice(&payload[i..j]);
                    i = j + 1;
                } else {
                    out.extend_from_slice(&payload[i..j]);
                    i = j;
                }
            } else {
                out.push(payload[i]);
                i += 1;
            }
        }
        out
    }

    /// Target tokens (without `<eos>`) for a source token sequence.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        self.reorder(source, source)
            .into_iter()
            .map(|s| self.codebook[s - FIRST_CONTENT])
            .collect()
    }

    /// Concatenated unit expansion of target tokens; `<eos>` contributes nothing.
    pub fn expand_units(&self, target: &[usize]) -> Vec<usize> {
        target
            .iter()
            .filter(|&&y| y != EOS)
            .flat_map(|&y| self.unit_expansion[y - FIRST_CONTENT].iter().copied())
            .collect()
    }

    /// Mean `|U| / |Y|` over target content tokens, as used by the upsampling rule.
    pub fn mean_expansion(&self) -> f64 {
        let total: usize = self.unit_expansion.iter().map(Vec::len).sum();
        total as f64 / self.unit_expansion.len() as f64
    }
}

/// One parallel example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Source frames `[|X|, frame_dim]`.
    pub x: Tensor,
    /// Source tokens.
    pub a: Vec<usize>,
    /// Half-open frame span `[start, end)` of each source token.
    pub a_spans: Vec<(usize, usize)>,
    /// Target tokens ending in `<eos>`.
    pub y: Vec<usize>,
    /// Target units.
    pub u: Vec<usize>,
}

impl Sample {
    pub fn num_frames(&self) -> usize {
        self.x.rows()
    }

    /// Target tokens without the trailing `<eos>`.
    pub fn y_content(&self) -> &[usize] {
        match self.y.last() {
            Some(&EOS) => &self.y[..self.y.len() - 1],
            _ => &self.y,
        }
    }

    /// Number of source tokens whose span ends within the first `j` frames.
    pub fn tokens_completed_by(&self, j: usize) -> usize {
        self.a_spans.iter().take_while(|(_, end)| *end <= j).count()
    }

    /// Checks the structural invariants against `spec`.
    pub fn check(&self, spec: &ToyLanguageSpec) -> Result<(), String> {
        if self.a.is_empty() || self.y.is_empty() || self.u.is_empty() {
            return Err("empty sequence".into());
        }
        if self.a.len() != self.a_spans.len() {
            return Err("a and a_spans differ in length".into());
        }
        let mut pos = 0;
        for &(s, e) in &self.a_spans {
            if s != pos || e <= s {
                return Err(format!("span [{s}, {e}) does not continue at frame {pos}"));
            }
            pos = e;
        }
        if pos != self.num_frames() {
            return Err(format!("spans cover {pos} frames but x has {}", self.num_frames()));
        }
        if self.x.cols() != spec.frame_dim {
            return Err(format!("frame dim {} != spec {}", self.x.cols(), spec.frame_dim));
        }
        if self.y.last() != Some(&EOS) {
            return Err("y must end with <eos>".into());
        }
        if self.a.iter().any(|&t| t < FIRST_CONTENT || t >= spec.source_vocab_size) {
            return Err("source token out of vocabulary".into());
        }
        if self.y_content().iter().any(|&t| t < FIRST_CONTENT || t >= spec.target_vocab_size) {
            return Err("target token out of vocabulary".into());
        }
        if self.u != spec.expand_units(&self.y) {
            return Err("u is not the unit expansion of y".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: ToyLanguageSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Mean `|U| / |Y|` over samples (`|Y|` without `<eos>`).
    pub fn mean_unit_ratio(&self) -> f64 {
        let n = self.samples.len().max(1) as f64;
        self.samples
            .iter()
            .map(|s| s.u.len() as f64 / s.y_content().len().max(1) as f64)
            .sum::<f64>()
            / n
    }

    pub fn max_frames(&self) -> usize {
        self.samples.iter().map(Sample::num_frames).max().unwrap_or(0)
    }
}

/// Frames for a token sequence with given per-token durations.
pub fn featurize_sample(
    tokens: &[usize],
    durations: &[usize],
    spec: &ToyLanguageSpec,
    rng: &mut impl Rng,
) -> Result<Tensor, ToySpeechError> {
    let (min, max) = spec.token_duration_range;
    let total: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(total * spec.frame_dim);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| ToySpeechError::InvalidSpec(e.to_string()))?;
    for (&tok, &d) in tokens.iter().zip(durations) {
        if d < min || d > max {
            return Err(ToySpeechError::Duration { duration: d, min, max });
        }
        let canon = spec.canonical_frame(tok);
        for _ in 0..d {
            for &c in &canon {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(c + n);
            }
        }
    }
    Tensor::new(vec![total, spec.frame_dim], data).map_err(|e| ToySpeechError::InvalidSpec(e.to_string()))
}

/// Draws sample `index` of `split` (counter-based, so any subset is reproducible).
pub fn synthesize_sample(spec: &ToyLanguageSpec, split: Split, index: u64) -> Result<Sample, ToySpeechError> {
    let mut r = rng::indexed_stream(spec.seed, &format!("sample:{}", split.name()), index);
    let n_src = spec.source_vocab_size - FIRST_CONTENT;
    let len = r.random_range(spec.length_range.0..=spec.length_range.1);
    let mut a: Vec<usize> = Vec::with_capacity(len);
    while a.len() < len {
        let t = FIRST_CONTENT + r.random_range(0..n_src);
        // Adjacent repeats would be indistinguishable in the frame stream.
        if n_src > 1 && a.last() == Some(&t) {
            continue;
        }
        a.push(t);
    }
    let (min, max) = spec.token_duration_range;
    let durations: Vec<usize> = (0..len).map(|_| r.random_range(min..=max)).collect();
    let x = featurize_sample(&a, &durations, spec, &mut r)?;
    let mut a_spans = Vec::with_capacity(len);
    let mut pos = 0;
    for d in &durations {
        a_spans.push((pos, pos + d));
        pos += d;
    }
    let mut y = spec.translate(&a);
    y.push(EOS);
    let u = spec.expand_units(&y);
    Ok(Sample { x, a, a_spans, y, u })
}

pub fn synthesize_corpus(spec: &ToyLanguageSpec, split: Split, n: usize) -> Result<Corpus, ToySpeechError> {
    spec.validate()?;
    if n == 0 {
        return Err(ToySpeechError::EmptyCorpus);
    }
    let samples = (0..n as u64)
        .map(|i| synthesize_sample(spec, split, i))
        .collect::<Result<_, _>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        split,
        samples,
    })
}
