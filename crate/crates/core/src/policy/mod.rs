//! READ/WRITE policies that drive a [`Model`] over a chunked input stream.
//!
//! - [`run_simul_inference`]: the CTC-alignment policy. After each chunk the
//!   source and target probes are collapsed greedily; the model writes when a
//!   new source token has appeared and the target probe aligns more tokens
//!   than have been emitted.
//! - [`run_waitk_inference`]: wait `k` chunks of 320 ms, then one token per chunk.
//! - [`run_offline_inference`]: read everything, then decode.
//!
//! Every run records an [`EmissionTrace`] for the latency metrics.

mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trace::{ChunkRead, DecisionRecord, EmissionTrace, Segment, TokenEmission, TraceTotals, TRACE_FORMAT};

use crate::model::{ChunkSize, DecoderState, Model, ModelError, T2uState};
use crate::numerics::Tensor;
use crate::vocab::EOS;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("wait-k needs k >= 1")]
    InvalidK,
    #[error("input stream has no frames")]
    EmptyInput,
    #[error("invalid inference options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Read,
    Write,
}

/// The alignment policy's decision rule: write iff a new source token has
/// been recognised since the last write and the target probe aligns more
/// tokens than have been emitted.
pub fn decide_action(asr_at_last_write: usize, asr_now: usize, nar_now: usize, emitted: usize) -> Action {
    if asr_now > asr_at_last_write && nar_now > emitted {
        Action::Write
    } else {
        Action::Read
    }
}

/// Deterministic per-operation costs used by [`ClockMode::Counted`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub encode_frame_ms: f64,
    pub probe_frame_ms: f64,
    pub decode_step_ms: f64,
    pub t2u_position_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            encode_frame_ms: 0.5,
            probe_frame_ms: 0.05,
            decode_step_ms: 2.0,
            t2u_position_ms: 1.0,
        }
    }
}

/// Source of the compute-time channel of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClockMode {
    /// Measured wall-clock time of the model calls.
    Wall,
    /// Fixed costs per unit of work; reproducible across runs and machines.
    Counted(CostModel),
}

impl Default for ClockMode {
    fn default() -> Self {
        Self::Counted(CostModel::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    /// Duration of one input frame.
    pub frame_ms: f64,
    /// Nominal duration of one output unit.
    pub unit_ms: f64,
    pub clock: ClockMode,
    /// Hard cap on emitted tokens; `None` means `2·|X| + 8`.
    pub max_tokens: Option<usize>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            frame_ms: 40.0,
            unit_ms: 20.0,
            clock: ClockMode::default(),
            max_tokens: None,
        }
    }
}

impl InferenceOptions {
    fn validate(&self) -> Result<(), PolicyError> {
        if !(self.frame_ms > 0.0 && self.unit_ms > 0.0) {
            return Err(PolicyError::Options("frame_ms and unit_ms must be positive".into()));
        }
        Ok(())
    }
}

/// Frames per wait-k chunk (320 ms at 40 ms per frame).
pub const WAITK_CHUNK_FRAMES: usize = 8;

#[derive(Debug, Clone, Copy)]
enum Work {
    Encode(usize),
    Probe(usize),
    Decode,
    T2u(usize),
}

#[derive(Debug)]
struct Clock {
    mode: ClockMode,
    elapsed_ms: f64,
}

impl Clock {
    fn new(mode: ClockMode) -> Self {
        Self { mode, elapsed_ms: 0.0 }
    }

    fn measure<T>(&mut self, work: Work, f: impl FnOnce() -> T) -> T {
        match self.mode {
            ClockMode::Wall => {
                let start = Instant::now();
                let out = f();
                self.elapsed_ms += start.elapsed().as_secs_f64() * 1000.0;
                out
            }
            ClockMode::Counted(c) => {
                self.elapsed_ms += match work {
                    Work::Encode(n) => c.encode_frame_ms * n as f64,
                    Work::Probe(n) => c.probe_frame_ms * n as f64,
                    Work::Decode => c.decode_step_ms,
                    Work::T2u(n) => c.t2u_position_ms * n as f64,
                };
                f()
            }
        }
    }
}

/// Counters of the alignment policy for one stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    /// Source tokens recognised at the last WRITE, `|A|`.
    pub source_count: usize,
    /// Target tokens emitted so far, `|Y|`.
    pub emitted: usize,
    /// Input frames received so far.
    pub received: usize,
}

/// Result of one inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    /// Emitted target tokens, normally ending in `<eos>`.
    pub text: Vec<usize>,
    pub units: Vec<usize>,
    pub trace: EmissionTrace,
}

/// Shared streaming machinery: encoder, decoder and T2U state plus the trace.
struct Session<'m> {
    model: &'m Model,
    x: &'m Tensor,
    opts: InferenceOptions,
    clock: Clock,
    encoder: crate::model::EncoderCache,
    decoder: DecoderState,
    t2u: T2uState,
    units: Vec<usize>,
    trace: EmissionTrace,
    max_tokens: usize,
    reads: usize,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, x: &'m Tensor, chunk: ChunkSize, opts: InferenceOptions) -> Result<Self, PolicyError> {
        opts.validate()?;
        if x.rows() == 0 {
            return Err(PolicyError::EmptyInput);
        }
        let total = x.rows();
        Ok(Self {
            model,
            x,
            opts,
            clock: Clock::new(opts.clock),
            encoder: model.encoder_cache(chunk),
            decoder: model.decoder_state(),
            t2u: model.t2u_state(),
            units: Vec::new(),
            trace: EmissionTrace::new(total as f64 * opts.frame_ms, opts.frame_ms, opts.unit_ms),
            max_tokens: opts.max_tokens.unwrap_or(2 * total + 8),
            reads: 0,
        })
    }

    fn total(&self) -> usize {
        self.x.rows()
    }

    fn received(&self) -> usize {
        self.encoder.len()
    }

    fn now_ms(&self) -> f64 {
        self.received() as f64 * self.opts.frame_ms
    }

    /// Reads and encodes the next `n` frames.
    fn read(&mut self, n: usize) -> Result<(), PolicyError> {
        let start = self.received();
        let frames = self.x.slice_rows(start, n);
        let model = self.model;
        let enc = &mut self.encoder;
        self.clock
            .measure(Work::Encode(n), || model.encode_chunk(enc, &frames))?;
        self.reads += 1;
        self.trace.chunk_reads.push(ChunkRead {
            frames: self.received(),
            ms: self.now_ms(),
        });
        Ok(())
    }

    fn states(&self) -> &Tensor {
        self.encoder.states().expect("at least one chunk has been read")
    }

    fn finished(&self) -> bool {
        self.decoder.last() == Some(EOS) || self.decoder.tokens().len() >= self.max_tokens
    }

    /// Greedily emits one token conditioned on everything received.
    fn emit_token(&mut self) -> Result<usize, PolicyError> {
        let prefix = self.received();
        let model = self.model;
        let memory = self.encoder.states().expect("at least one chunk has been read");
        let dec = &mut self.decoder;
        let token = self
            .clock
            .measure(Work::Decode, || model.decode_greedy(dec, memory, prefix))?;
        self.trace.tokens.push(TokenEmission {
            token,
            prefix_frames: prefix,
            ms: self.now_ms(),
        });
        Ok(token)
    }

    /// Generates units for every text position not yet passed to T2U and
    /// stamps them with the current time.
    fn emit_units(&mut self) -> Result<(), PolicyError> {
        let done = self.t2u.positions();
        let Some(states) = self.decoder.text_states() else { return Ok(()) };
        let n = states.rows() - done;
        if n == 0 {
            return Ok(());
        }
        let fresh = states.slice_rows(done, n);
        let model = self.model;
        let t2u = &mut self.t2u;
        let chunk = self
            .clock
            .measure(Work::T2u(n), || model.t2u_generate(t2u, Some(&fresh)))?;
        let t = self.now_ms();
        let t_ca = t + self.clock.elapsed_ms;
        self.trace.push_outputs(chunk.units.len(), t, t_ca, self.reads);
        self.units.extend(chunk.units);
        Ok(())
    }

    /// Decodes until `<eos>` (or the length cap) on the full input.
    fn flush(&mut self) -> Result<(), PolicyError> {
        while !self.finished() {
            self.emit_token()?;
        }
        if self.decoder.last() != Some(EOS) {
            self.trace.flags.push(format!("length_cap:{}", self.max_tokens));
        }
        self.emit_units()
    }

    fn finish(mut self) -> InferenceOutput {
        self.trace.totals.s_ms = self.units.len() as f64 * self.opts.unit_ms;
        InferenceOutput {
            text: self.decoder.tokens().to_vec(),
            units: self.units,
            trace: self.trace,
        }
    }
}

/// Runs the alignment policy over `x`, reading `chunk` frames at a time.
pub fn run_simul_inference(
    model: &Model,
    x: &Tensor,
    chunk: ChunkSize,
    opts: &InferenceOptions,
) -> Result<InferenceOutput, PolicyError> {
    let mut s = Session::new(model, x, chunk, *opts)?;
    let step = chunk.frames(s.total());
    let mut state = PolicyState::default();
    while s.received() < s.total() {
        let n = step.min(s.total() - s.received());
        s.read(n)?;
        state.received = s.received();
        let states = s.states().clone();
        let probes = s.clock.measure(Work::Probe(states.rows()), || model.probe(&states))?;
        let asr_now = probes.asr_distribution()?.discrete_prefix_counts().last() as usize;
        let nar_now = probes.nar_distribution()?.discrete_prefix_counts().last() as usize;
        let action = decide_action(state.source_count, asr_now, nar_now, state.emitted);
        s.trace.decisions.push(DecisionRecord {
            frames: s.received(),
            asr_count: asr_now,
            nar_count: nar_now,
            emitted: state.emitted,
            action,
        });
        if s.received() == s.total() {
            // The stream has ended: any write merges into the terminal flush.
            break;
        }
        if action == Action::Write {
            state.source_count = asr_now;
            while state.emitted < nar_now && !s.finished() {
                s.emit_token()?;
                state.emitted += 1;
            }
            s.emit_units()?;
        }
    }
    s.flush()?;
    // Tokens beyond what the target probe ever aligned had no g(i) of their
    // own and were produced by the terminal flush.
    let aligned = s.trace.decisions.last().map_or(0, |d| d.nar_count);
    let content = s.decoder.tokens().iter().filter(|&&t| t != EOS).count();
    if content > aligned {
        s.trace.flags.push(format!("unaligned_tail:{}", content - aligned));
    }
    Ok(s.finish())
}

/// Wait-k: read `k` chunks of [`WAITK_CHUNK_FRAMES`] frames, then emit one
/// token after every further chunk, and flush at the end of the stream.
pub fn run_waitk_inference(model: &Model, x: &Tensor, k: usize, opts: &InferenceOptions) -> Result<InferenceOutput, PolicyError> {
    if k == 0 {
        return Err(PolicyError::InvalidK);
    }
    let mut s = Session::new(model, x, ChunkSize::Finite(WAITK_CHUNK_FRAMES), *opts)?;
    let mut chunks = 0;
    while s.received() < s.total() {
        let n = WAITK_CHUNK_FRAMES.min(s.total() - s.received());
        s.read(n)?;
        chunks += 1;
        if s.received() == s.total() {
            break;
        }
        let action = if chunks >= k && !s.finished() { Action::Write } else { Action::Read };
        s.trace.decisions.push(DecisionRecord {
            frames: s.received(),
            asr_count: 0,
            nar_count: 0,
            emitted: s.decoder.tokens().len(),
            action,
        });
        if action == Action::Write {
            s.emit_token()?;
            s.emit_units()?;
        }
    }
    s.flush()?;
    Ok(s.finish())
}

/// Reads the whole input, decodes greedily to `<eos>`, then generates units.
pub fn run_offline_inference(model: &Model, x: &Tensor, opts: &InferenceOptions) -> Result<InferenceOutput, PolicyError> {
    let mut s = Session::new(model, x, ChunkSize::Infinite, *opts)?;
    s.read(s.total())?;
    s.flush()?;
    Ok(s.finish())
}
