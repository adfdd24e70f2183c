//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        Ok(Self {
            w: ps.add_xavier(format!("{name}.w"), fan_in, fan_out, rng)?,
            b: ps.add_const(format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gamma: ps.add_const(format!("{name}.gamma"), &[width], 1.0)?,
            beta: ps.add_const(format!("{name}.beta"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Activation {
    Relu,
    Swish,
}

/// Position-wise two-layer feed-forward block.
#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
    act: Activation,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), width, hidden, rng)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, width, rng)?,
            act,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let h = self.up.forward(g, ps, x)?;
        let h = match self.act {
            Activation::Relu => g.relu(h),
            Activation::Swish => g.silu(h),
        };
        self.down.forward(g, ps, h)
    }
}

/// Projected keys and values of positions already processed.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) -> Result<(), NumericsError> {
        match (&mut self.k, &mut self.v) {
            (Some(ck), Some(cv)) => {
                ck.append_rows(k)?;
                cv.append_rows(v)
            }
            _ => {
                self.k = Some(k.clone());
                self.v = Some(v.clone());
                Ok(())
            }
        }
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    width: usize,
}

/// Where an attention block reads its keys and values from.
pub(crate) enum KvSource<'a> {
    /// Self-attention: new rows are projected, appended to the cache and
    /// attended together with everything cached before them.
    Cached(&'a mut KvCache),
    /// Attention over a fixed memory projected in full on every call.
    Memory(Var),
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), width, width, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), width, width, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), width, width, rng)?,
            heads,
            width,
        })
    }

    /// Attends the rows of `x` to the keys described by `source`.
    ///
    /// `blocked` is a `[queries, keys]` {0,1} tensor with 1 marking keys a
    /// query may not see, or `None` when every key is visible. When `probe`
    /// is given, the per-head attention weights are pushed onto it.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        source: KvSource<'_>,
        blocked: Option<&Tensor>,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, NumericsError> {
        let q = self.q.forward(g, ps, x)?;
        let (k, v) = match source {
            KvSource::Cached(cache) => {
                let k_new = self.k.forward(g, ps, x)?;
                let v_new = self.v.forward(g, ps, x)?;
                let joined = match (&cache.k, &cache.v) {
                    (Some(ck), Some(cv)) => {
                        let ck = g.constant(ck.clone());
                        let cv = g.constant(cv.clone());
                        (g.concat_rows(&[ck, k_new])?, g.concat_rows(&[cv, v_new])?)
                    }
                    _ => (k_new, v_new),
                };
                cache.append(g.value(k_new), g.value(v_new))?;
                joined
            }
            KvSource::Memory(m) => (self.k.forward(g, ps, m)?, self.v.forward(g, ps, m)?),
        };
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let scores = match blocked {
                Some(mask) => g.masked_fill(scores, mask, f64::NEG_INFINITY)?,
                None => scores,
            };
            let weights = g.softmax(scores);
            if let Some(p) = probe.as_deref_mut() {
                p.push(g.value(weights).clone());
            }
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, ps, joined)
    }
}

/// Builds a blocking mask from a predicate `allowed(query, key)`; returns
/// `None` when nothing is blocked.
pub(crate) fn mask_from(queries: usize, keys: usize, allowed: impl Fn(usize, usize) -> bool) -> Option<Tensor> {
    let mut any = false;
    let mut data = vec![0.0; queries * keys];
    for q in 0..queries {
        for k in 0..keys {
            if !allowed(q, k) {
                data[q * keys + k] = 1.0;
                any = true;
            }
        }
    }
    any.then(|| Tensor::new(vec![queries, keys], data).expect("mask shape is consistent"))
}

/// Sinusoidal position encodings for absolute positions `start..start + len`.
pub(crate) fn positions(start: usize, len: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * width);
    for p in start..start + len {
        for i in 0..width {
            let pair = (i / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(pair / width as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, width], data).expect("position table shape is consistent")
}
