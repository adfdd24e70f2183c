//! Autoregressive text decoder with prefix-limited cross-attention.

use rand::Rng;

use super::layers::{mask_from, positions, Activation, Attention, FeedForward, KvCache, KvSource, LayerNorm, Linear};
use super::{ModelConfig, ModelError};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vocab::EOS;

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    embedding: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    output: Linear,
    width: usize,
}

/// Incremental decoding state.
///
/// Holds the emitted prefix `Y`, the per-layer self-attention caches, the
/// speech prefix length each position was computed with, and the decoder
/// output states `D^text` of every processed position.
#[derive(Debug, Clone)]
pub struct DecoderState {
    tokens: Vec<usize>,
    caches: Vec<KvCache>,
    prefix_lengths: Vec<usize>,
    text_states: Option<Tensor>,
    pending: bool,
}

impl DecoderState {
    pub fn new(layers: usize) -> Self {
        Self {
            tokens: Vec::new(),
            caches: vec![KvCache::default(); layers],
            prefix_lengths: Vec::new(),
            text_states: None,
            pending: false,
        }
    }

    /// Tokens emitted so far.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn last(&self) -> Option<usize> {
        self.tokens.last().copied()
    }

    /// Speech prefix length `g(i)` used for each emitted position.
    pub fn prefix_lengths(&self) -> &[usize] {
        &self.prefix_lengths
    }

    /// `D^text` rows, one per emitted token.
    pub fn text_states(&self) -> Option<&Tensor> {
        self.text_states.as_ref()
    }

    /// Commits the token chosen after the last [`super::Model::decode_step`].
    pub fn push(&mut self, token: usize) -> Result<(), ModelError> {
        if !self.pending {
            return Err(ModelError::Cache("push without a preceding decode step".into()));
        }
        self.pending = false;
        self.tokens.push(token);
        Ok(())
    }
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let d = cfg.width;
        let embedding = ps.add_xavier("dec.embedding", cfg.target_vocab_size, d, rng)?;
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let n = format!("dec.{l}");
            layers.push(DecoderLayer {
                self_norm: LayerNorm::new(ps, &format!("{n}.self_norm"), d)?,
                self_attn: Attention::new(ps, &format!("{n}.self_attn"), d, cfg.heads, rng)?,
                cross_norm: LayerNorm::new(ps, &format!("{n}.cross_norm"), d)?,
                cross_attn: Attention::new(ps, &format!("{n}.cross_attn"), d, cfg.heads, rng)?,
                ffn_norm: LayerNorm::new(ps, &format!("{n}.ffn_norm"), d)?,
                ffn: FeedForward::new(ps, &format!("{n}.ffn"), d, cfg.ffn_width(), Activation::Relu, rng)?,
            });
        }
        Ok(Self {
            embedding,
            layers,
            final_norm: LayerNorm::new(ps, "dec.final_norm", d)?,
            output: Linear::new(ps, "dec.output", d, cfg.target_vocab_size, rng)?,
            width: d,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs the decoder over `inputs` (continuing `state`'s caches), where
    /// input row `q` may attend to the first `prefix[q]` rows of `memory`.
    ///
    /// Returns `(D^text, logits)` for the new rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        memory: Var,
        inputs: &[usize],
        prefix: &[usize],
        caches: &mut [KvCache],
    ) -> Result<(Var, Var), ModelError> {
        let mem_len = g.value(memory).rows();
        if inputs.len() != prefix.len() {
            return Err(ModelError::Mask(format!(
                "{} decoder inputs but {} prefix lengths",
                inputs.len(),
                prefix.len()
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&p| p == 0 || p > mem_len) {
            return Err(ModelError::Mask(format!(
                "cross-attention prefix {bad} outside 1..={mem_len} encoder states"
            )));
        }
        let start = caches.first().map_or(0, KvCache::len);
        let n = inputs.len();
        let table = g.param(ps, self.embedding);
        let e = g.embedding(table, inputs)?;
        let e = g.scale(e, (self.width as f64).sqrt());
        let pe = g.constant(positions(start, n, self.width));
        let mut h = g.add(e, pe)?;

        let causal = mask_from(n, start + n, |q, k| k <= start + q);
        let cross = mask_from(n, mem_len, |q, k| k < prefix[q]);
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            let t = layer.self_norm.forward(g, ps, h)?;
            let t = layer
                .self_attn
                .forward(g, ps, t, KvSource::Cached(cache), causal.as_ref(), None)?;
            h = g.add(h, t)?;
            let t = layer.cross_norm.forward(g, ps, h)?;
            let t = layer
                .cross_attn
                .forward(g, ps, t, KvSource::Memory(memory), cross.as_ref(), None)?;
            h = g.add(h, t)?;
            let t = layer.ffn_norm.forward(g, ps, h)?;
            let t = layer.ffn.forward(g, ps, t)?;
            h = g.add(h, t)?;
        }
        let text = self.final_norm.forward(g, ps, h)?;
        let logits = self.output.forward(g, ps, text)?;
        Ok((text, logits))
    }

    /// One incremental step: feeds the last emitted token (or the start
    /// symbol) and returns the next-token log-probabilities.
    pub fn step(
        &self,
        ps: &ParamStore,
        state: &mut DecoderState,
        memory: &Tensor,
        prefix: usize,
    ) -> Result<Vec<f64>, ModelError> {
        if state.pending {
            return Err(ModelError::Cache("decode step without committing the previous token".into()));
        }
        let input = state.last().unwrap_or(EOS);
        let mut g = Graph::inference();
        let mem = g.constant(memory.clone());
        let (text, logits) = self.forward(&mut g, ps, mem, &[input], &[prefix], &mut state.caches)?;
        let logp = g.log_softmax(logits);
        match &mut state.text_states {
            Some(t) => t.append_rows(g.value(text))?,
            None => state.text_states = Some(g.value(text).clone()),
        }
        state.prefix_lengths.push(prefix);
        state.pending = true;
        Ok(g.value(logp).row(0).to_vec())
    }
}
