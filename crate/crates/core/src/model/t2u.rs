//! Non-autoregressive text-to-unit generator.
//!
//! A causal encoder runs over the decoder states `D^text`. Each text position
//! is then copied into `r` unit slots, and a unit decoder whose self-attention
//! is causal at the granularity of whole text positions produces a CTC
//! distribution per slot. Slot `s` therefore only depends on text positions
//! up to `⌊s / r⌋`, which is what lets units stream as text is emitted.

use rand::Rng;

use super::layers::{mask_from, positions, Activation, Attention, FeedForward, KvCache, KvSource, LayerNorm, Linear};
use super::{ModelConfig, ModelError};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
struct Block {
    attn_norm: LayerNorm,
    attn: Attention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let d = cfg.width;
        Ok(Self {
            attn_norm: LayerNorm::new(ps, &format!("{name}.attn_norm"), d)?,
            attn: Attention::new(ps, &format!("{name}.attn"), d, cfg.heads, rng)?,
            ffn_norm: LayerNorm::new(ps, &format!("{name}.ffn_norm"), d)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, cfg.ffn_width(), Activation::Relu, rng)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        h: Var,
        cache: &mut KvCache,
        blocked: Option<&crate::numerics::Tensor>,
    ) -> Result<Var, ModelError> {
        let t = self.attn_norm.forward(g, ps, h)?;
        let t = self.attn.forward(g, ps, t, KvSource::Cached(cache), blocked, None)?;
        let h = g.add(h, t)?;
        let t = self.ffn_norm.forward(g, ps, h)?;
        let t = self.ffn.forward(g, ps, t)?;
        Ok(g.add(h, t)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TextToUnit {
    input: Linear,
    encoder: Vec<Block>,
    encoder_norm: LayerNorm,
    slot_embedding: ParamId,
    decoder: Vec<Block>,
    decoder_norm: LayerNorm,
    output: Linear,
    width: usize,
    rate: usize,
}

/// Streaming state of the generator.
#[derive(Debug, Clone)]
pub struct T2uState {
    positions: usize,
    encoder: Vec<KvCache>,
    decoder: Vec<KvCache>,
    /// Raw argmax label of the most recent slot, blank included.
    last_label: Option<usize>,
}

impl T2uState {
    pub fn new(encoder_layers: usize, decoder_layers: usize) -> Self {
        Self {
            positions: 0,
            encoder: vec![KvCache::default(); encoder_layers],
            decoder: vec![KvCache::default(); decoder_layers],
            last_label: None,
        }
    }

    /// Number of text positions consumed.
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub(crate) fn last_label(&self) -> Option<usize> {
        self.last_label
    }

    pub(crate) fn set_last_label(&mut self, label: usize) {
        self.last_label = Some(label);
    }
}

impl TextToUnit {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let d = cfg.width;
        let encoder = (0..cfg.t2u_encoder_layers)
            .map(|l| Block::new(ps, &format!("t2u.enc.{l}"), cfg, rng))
            .collect::<Result<_, _>>()?;
        let decoder = (0..cfg.unit_decoder_layers)
            .map(|l| Block::new(ps, &format!("t2u.dec.{l}"), cfg, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            input: Linear::new(ps, "t2u.input", d, d, rng)?,
            encoder,
            encoder_norm: LayerNorm::new(ps, "t2u.enc_norm", d)?,
            slot_embedding: ps.add_xavier("t2u.slot_embedding", cfg.upsample_rate, d, rng)?,
            decoder,
            decoder_norm: LayerNorm::new(ps, "t2u.dec_norm", d)?,
            output: Linear::new(ps, "t2u.output", d, cfg.unit_vocab_size, rng)?,
            width: d,
            rate: cfg.upsample_rate,
        })
    }

    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder.len()
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder.len()
    }

    /// Consumes new `D^text` rows and returns unit log-probabilities for the
    /// `rows · r` new slots.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, text: Var, state: &mut T2uState) -> Result<Var, ModelError> {
        let n = g.value(text).rows();
        let p0 = state.positions;
        let r = self.rate;

        let h = self.input.forward(g, ps, text)?;
        let pe = g.constant(positions(p0, n, self.width));
        let mut h = g.add(h, pe)?;
        let causal = mask_from(n, p0 + n, |q, k| k <= p0 + q);
        for (block, cache) in self.encoder.iter().zip(state.encoder.iter_mut()) {
            h = block.forward(g, ps, h, cache, causal.as_ref())?;
        }
        let enc = self.encoder_norm.forward(g, ps, h)?;

        let slots = n * r;
        let s0 = p0 * r;
        let copy: Vec<usize> = (0..slots).map(|s| s / r).collect();
        let offsets: Vec<usize> = (0..slots).map(|s| s % r).collect();
        let up = g.gather_rows(enc, &copy)?;
        let table = g.param(ps, self.slot_embedding);
        let offset_emb = g.embedding(table, &offsets)?;
        let pe = g.constant(positions(s0, slots, self.width));
        let u = g.add(up, offset_emb)?;
        let mut u = g.add(u, pe)?;
        let block_causal = mask_from(slots, s0 + slots, |q, k| k / r <= (s0 + q) / r);
        for (block, cache) in self.decoder.iter().zip(state.decoder.iter_mut()) {
            u = block.forward(g, ps, u, cache, block_causal.as_ref())?;
        }
        let u = self.decoder_norm.forward(g, ps, u)?;
        let logits = self.output.forward(g, ps, u)?;
        state.positions += n;
        Ok(g.log_softmax(logits))
    }
}
