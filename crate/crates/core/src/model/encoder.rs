//! Chunk-based streaming Conformer encoder.
//!
//! Frame `i` (0-based) may see every frame up to the last frame of its own
//! chunk, `chunk_end(i) = ⌊i / C⌋·C + C − 1`. Attention blocks everything past
//! that bound and the depthwise convolution window is clipped at it. The same
//! code handles whole-utterance and incremental encoding: a whole utterance is
//! a single call on an empty cache.

use rand::Rng;

use super::layers::{mask_from, positions, Activation, Attention, FeedForward, KvCache, KvSource, LayerNorm, Linear};
use super::{ChunkSize, ModelConfig, ModelError};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
struct ConformerLayer {
    ffn1_norm: LayerNorm,
    ffn1: FeedForward,
    attn_norm: LayerNorm,
    attn: Attention,
    conv_norm: LayerNorm,
    pointwise_in: Linear,
    depthwise_kernel: ParamId,
    depthwise_bias: ParamId,
    conv_out_norm: LayerNorm,
    pointwise_out: Linear,
    ffn2_norm: LayerNorm,
    ffn2: FeedForward,
    final_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    input: Linear,
    layers: Vec<ConformerLayer>,
    width: usize,
    kernel: usize,
}

/// Per-layer state carried between incremental calls.
#[derive(Debug, Clone, Default)]
struct LayerCache {
    kv: KvCache,
    /// Convolution inputs of the most recent `(kernel − 1) / 2` positions.
    conv_context: Option<Tensor>,
}

/// Incremental encoding state: the chunk size, the positions encoded so far
/// and everything later chunks need from them.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    chunk: ChunkSize,
    len: usize,
    closed: bool,
    layers: Vec<LayerCache>,
    states: Option<Tensor>,
}

impl EncoderCache {
    pub fn new(chunk: ChunkSize, layers: usize) -> Self {
        Self {
            chunk,
            len: 0,
            closed: false,
            layers: vec![LayerCache::default(); layers],
            states: None,
        }
    }

    pub fn chunk(&self) -> ChunkSize {
        self.chunk
    }

    /// Number of positions encoded so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// True once a short final chunk (or an unbounded one) has been encoded.
    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Every hidden state produced so far, `[len, width]`.
    pub fn states(&self) -> Option<&Tensor> {
        self.states.as_ref()
    }
}

/// Last frame visible to frame `i`.
pub(crate) fn chunk_end(i: usize, chunk: ChunkSize) -> usize {
    match chunk {
        ChunkSize::Finite(c) => (i / c) * c + c - 1,
        ChunkSize::Infinite => usize::MAX,
    }
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let d = cfg.width;
        let input = Linear::new(ps, "enc.input", cfg.frame_dim, d, rng)?;
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let n = format!("enc.{l}");
            let bound = (1.0 / cfg.conv_kernel as f64).sqrt();
            let kernel_init = (0..cfg.conv_kernel * d).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(ConformerLayer {
                ffn1_norm: LayerNorm::new(ps, &format!("{n}.ffn1_norm"), d)?,
                ffn1: FeedForward::new(ps, &format!("{n}.ffn1"), d, cfg.ffn_width(), Activation::Swish, rng)?,
                attn_norm: LayerNorm::new(ps, &format!("{n}.attn_norm"), d)?,
                attn: Attention::new(ps, &format!("{n}.attn"), d, cfg.heads, rng)?,
                conv_norm: LayerNorm::new(ps, &format!("{n}.conv_norm"), d)?,
                pointwise_in: Linear::new(ps, &format!("{n}.conv_in"), d, 2 * d, rng)?,
                depthwise_kernel: ps.add(format!("{n}.depthwise.w"), Tensor::new(vec![cfg.conv_kernel, d], kernel_init)?)?,
                depthwise_bias: ps.add_const(format!("{n}.depthwise.b"), &[d], 0.0)?,
                conv_out_norm: LayerNorm::new(ps, &format!("{n}.conv_out_norm"), d)?,
                pointwise_out: Linear::new(ps, &format!("{n}.conv_out"), d, d, rng)?,
                ffn2_norm: LayerNorm::new(ps, &format!("{n}.ffn2_norm"), d)?,
                ffn2: FeedForward::new(ps, &format!("{n}.ffn2"), d, cfg.ffn_width(), Activation::Swish, rng)?,
                final_norm: LayerNorm::new(ps, &format!("{n}.final_norm"), d)?,
            });
        }
        Ok(Self {
            input,
            layers,
            width: d,
            kernel: cfg.conv_kernel,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Encodes `frames` as the continuation of `cache` and returns the new
    /// hidden states `[frames.rows(), width]`.
    ///
    /// Each call must consist of whole chunks, except that the final call of
    /// a stream may end with one short chunk. `attention` receives the raw
    /// per-layer, per-head attention weights when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        frames: &Tensor,
        cache: &mut EncoderCache,
        mut attention: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, ModelError> {
        let n = frames.rows();
        if cache.layers.len() != self.layers.len() {
            return Err(ModelError::Cache(format!(
                "cache has {} layers, encoder has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        if cache.closed {
            return Err(ModelError::Cache(format!(
                "stream already ended after {} frames; no further chunks accepted",
                cache.len
            )));
        }
        match cache.chunk {
            ChunkSize::Finite(c) if !n.is_multiple_of(c) => cache.closed = true,
            ChunkSize::Infinite => cache.closed = true,
            _ => {}
        }
        let start = cache.len;
        let total = start + n;
        let chunk = cache.chunk;

        let x = g.constant(frames.clone());
        let x = self.input.forward(g, ps, x)?;
        let pe = g.constant(positions(start, n, self.width));
        let mut h = g.add(x, pe)?;

        let blocked = mask_from(n, total, |q, k| k <= chunk_end(start + q, chunk));
        let half = self.kernel / 2;
        for (layer, lc) in self.layers.iter().zip(cache.layers.iter_mut()) {
            // Macaron feed-forward, first half.
            let t = layer.ffn1_norm.forward(g, ps, h)?;
            let t = layer.ffn1.forward(g, ps, t)?;
            let t = g.scale(t, 0.5);
            h = g.add(h, t)?;

            let t = layer.attn_norm.forward(g, ps, h)?;
            let t = layer
                .attn
                .forward(g, ps, t, KvSource::Cached(&mut lc.kv), blocked.as_ref(), attention.as_deref_mut())?;
            h = g.add(h, t)?;

            // Convolution module with the window clipped at the chunk end.
            let t = layer.conv_norm.forward(g, ps, h)?;
            let t = layer.pointwise_in.forward(g, ps, t)?;
            let a = g.slice_cols(t, 0, self.width)?;
            let b = g.slice_cols(t, self.width, self.width)?;
            let b = g.sigmoid(b);
            let glu = g.mul(a, b)?;
            let (conv_in, offset) = match &lc.conv_context {
                Some(ctx) => {
                    let c = g.constant(ctx.clone());
                    (g.concat_rows(&[c, glu])?, ctx.rows())
                }
                None => (glu, 0),
            };
            let base = start - offset;
            let limits = (0..n).map(|q| chunk_end(start + q, chunk).min(total - 1) - base).collect();
            let kernel = g.param(ps, layer.depthwise_kernel);
            let bias = g.param(ps, layer.depthwise_bias);
            let t = g.depthwise_conv(conv_in, kernel, bias, offset, limits)?;
            let rows = g.value(conv_in).rows();
            let keep = half.min(rows);
            lc.conv_context = (keep > 0).then(|| g.value(conv_in).slice_rows(rows - keep, keep));
            let t = layer.conv_out_norm.forward(g, ps, t)?;
            let t = g.silu(t);
            let t = layer.pointwise_out.forward(g, ps, t)?;
            h = g.add(h, t)?;

            let t = layer.ffn2_norm.forward(g, ps, h)?;
            let t = layer.ffn2.forward(g, ps, t)?;
            let t = g.scale(t, 0.5);
            h = g.add(h, t)?;
            h = layer.final_norm.forward(g, ps, h)?;
        }

        cache.len = total;
        match &mut cache.states {
            Some(s) => s.append_rows(g.value(h))?,
            None => cache.states = Some(g.value(h).clone()),
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_end_matches_ceiling_rule() {
        // 1-based i = 3 with C = 2 sees up to frame 4, i.e. 0-based 3.
        assert_eq!(chunk_end(2, ChunkSize::Finite(2)), 3);
        assert_eq!(chunk_end(0, ChunkSize::Finite(1)), 0);
        assert_eq!(chunk_end(7, ChunkSize::Finite(4)), 7);
        assert_eq!(chunk_end(8, ChunkSize::Finite(4)), 11);
        assert_eq!(chunk_end(5, ChunkSize::Infinite), usize::MAX);
    }
}
