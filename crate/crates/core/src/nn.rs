//! Layers shared by the encoders, the captioner and the GAN.
//!
//! Every layer owns only [`ParamId`]s; values live in a [`ParamStore`] and
//! forward passes record onto a [`Graph`]. Sequences are token-major: a
//! batch of `B` sequences of length `N` is a `[B*N, D]` matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// `y = x W + b` with `W: [d_in, d_out]`, initialised `N(0, 1/d_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = store.register(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng))?;
        let b = if bias {
            Some(store.register(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Sinusoidal position table, `[n, d]`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("shape matches")
}

/// The same `[n, d]` table stacked `batch` times.
pub fn tiled_positional_encoding(batch: usize, n: usize, d: usize) -> Tensor {
    let one = positional_encoding(n, d);
    let mut data = Vec::with_capacity(batch * n * d);
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    Tensor::new(vec![batch * n, d], data).expect("shape matches")
}

/// Keep-mask for one item's `nq x nk` attention logits.
pub type AttnMask = Vec<bool>;

/// Key-padding mask: query rows all see the same set of real keys.
pub fn key_padding_mask(nq: usize, keys: &[bool]) -> AttnMask {
    let mut m = Vec::with_capacity(nq * keys.len());
    for _ in 0..nq {
        m.extend_from_slice(keys);
    }
    m
}

/// Lower-triangular mask, combined with key padding.
pub fn causal_mask(n: usize, keys: &[bool]) -> AttnMask {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = keys[j];
        }
    }
    m
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `nq x nk` probability matrix per (item, head), item-major.
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Maps the concatenated `heads * d_k` head outputs back to `d`.
    pub o: Linear,
    pub heads: usize,
    pub d_k: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let d_k = d / heads;
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, heads * d_k, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, heads * d_k, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, heads * d_k, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), heads * d_k, d, true, rng)?,
            heads,
            d_k,
        })
    }

    /// Scaled dot-product attention over a batch of `batch` items.
    ///
    /// `q_in` is `[batch*nq, d]`; `k_in` and `v_in` are `[batch*nk, d]`.
    /// `masks`, when given, holds one `nq*nk` keep-mask per item. A query
    /// with no visible key attends to nothing and yields a zero context.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        batch: usize,
        nq: usize,
        nk: usize,
        masks: Option<&[AttnMask]>,
    ) -> Result<AttentionOutput> {
        if g.shape(q_in)[0] != batch * nq || g.shape(k_in)[0] != batch * nk || g.shape(v_in)[0] != batch * nk {
            return Err(Error::shape(
                "attention",
                format!(
                    "inputs {:?}/{:?}/{:?} for {batch} items of {nq} queries and {nk} keys",
                    g.shape(q_in),
                    g.shape(k_in),
                    g.shape(v_in)
                ),
            ));
        }
        if let Some(m) = masks {
            if m.len() != batch || m.iter().any(|x| x.len() != nq * nk) {
                return Err(Error::shape("attention", "mask count or size does not match the batch"));
            }
        }
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, k_in)?;
        let v = self.v.forward(g, v_in)?;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut items = Vec::with_capacity(batch);
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let qb = g.slice_rows(q, b * nq, nq)?;
            let kb = g.slice_rows(k, b * nk, nk)?;
            let vb = g.slice_rows(v, b * nk, nk)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * self.d_k, (h + 1) * self.d_k);
                let (qh, kh, vh) = if self.heads == 1 {
                    (qb, kb, vb)
                } else {
                    (g.slice_cols(qb, lo, hi)?, g.slice_cols(kb, lo, hi)?, g.slice_cols(vb, lo, hi)?)
                };
                let logits = g.matmul_nt(qh, kh)?;
                let logits = g.scale(logits, scale);
                let p = g.softmax(logits, 1, masks.map(|m| m[b].as_slice()))?;
                heads.push(g.matmul(p, vh)?);
                probs.push(p);
            }
            items.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let joined = if items.len() == 1 { items[0] } else { g.concat_rows(&items)? };
        let out = self.o.forward(g, joined)?;
        Ok(AttentionOutput { out, probs })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, width, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), width, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Post-norm self-attention block: `LN(x + MHA(x)) -> LN(. + FFN(.))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    /// `attn_in` is what queries and keys see (e.g. `x + PE`); values and the
    /// residual use `x`. Pass `attn_in = x` for a plain block.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        attn_in: Var,
        batch: usize,
        n: usize,
        masks: Option<&[AttnMask]>,
    ) -> Result<AttentionOutput> {
        let a = self.attn.forward(g, attn_in, attn_in, x, batch, n, n, masks)?;
        let h = g.add(x, a.out)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let y = g.add(h, f)?;
        let out = self.norm2.forward(g, y)?;
        Ok(AttentionOutput { out, probs: a.probs })
    }
}

/// Causal self-attention, cross-attention to encoder memory, then FFN; each
/// followed by residual and layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

pub struct DecoderInputs<'a> {
    pub batch: usize,
    pub n: usize,
    pub self_masks: &'a [AttnMask],
    /// Keys for cross-attention (memory plus positions), `[batch*m, d]`.
    pub mem_keys: Var,
    /// Values for cross-attention, `[batch*m, d]`.
    pub mem_values: Var,
    pub m: usize,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, inp: &DecoderInputs) -> Result<Var> {
        let a = self
            .self_attn
            .forward(g, x, x, x, inp.batch, inp.n, inp.n, Some(inp.self_masks))?;
        let h = g.add(x, a.out)?;
        let h = self.norm1.forward(g, h)?;
        let c = self
            .cross
            .forward(g, h, inp.mem_keys, inp.mem_values, inp.batch, inp.n, inp.m, None)?;
        let h2 = g.add(h, c.out)?;
        let h2 = self.norm2.forward(g, h2)?;
        let f = self.ffn.forward(g, h2)?;
        let y = g.add(h2, f)?;
        self.norm3.forward(g, y)
    }
}

/// 3x3 (or `k x k`) convolution with bias, weights `[out, in*k*k]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Conv {
            w: store.register(format!("{name}.w"), Tensor::randn(&[c_out, fan_in], std, rng))?,
            b: store.register(format!("{name}.b"), Tensor::zeros(&[c_out]))?,
            c_in,
            c_out,
            k,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.k, self.stride, self.pad)
    }
}
