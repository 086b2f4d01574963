//! Image-to-text branch: a transformer encoder over region features and a
//! causal decoder that captions them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    causal_mask, tiled_positional_encoding, AttnMask, DecoderInputs, DecoderLayer, EncoderLayer, Linear,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::{END, PAD, START};

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn: usize,
    /// Maximum caption length in words, excluding START and END.
    pub n_max: usize,
    pub vocab: usize,
}

impl CaptionerConfig {
    pub fn desk(vocab: usize) -> Self {
        CaptionerConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 8,
            d: 64,
            ffn: 128,
            n_max: 15,
            vocab,
        }
    }

    pub fn paper(vocab: usize) -> Self {
        CaptionerConfig {
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            d: 256,
            ffn: 512,
            n_max: 15,
            vocab,
        }
    }

    /// Decoder sequence length: START plus `n_max` words, or `n_max` words plus END.
    pub fn seq_len(&self) -> usize {
        self.n_max + 1
    }
}

/// Teacher-forcing inputs and targets for a batch of captions.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBatch {
    /// `[START, t_1, .., t_n, PAD..]`, `batch * len` ids.
    pub inputs: Vec<usize>,
    /// `[t_1, .., t_n, END, PAD..]`
    pub targets: Vec<usize>,
    /// Real (loss-bearing) positions; also the decoder key mask.
    pub masks: Vec<Vec<bool>>,
    pub len: usize,
}

impl TeacherBatch {
    /// Captions are word ids without START or END; longer ones are truncated.
    pub fn new(captions: &[Vec<usize>], n_max: usize) -> Self {
        let len = n_max + 1;
        let mut inputs = Vec::with_capacity(captions.len() * len);
        let mut targets = Vec::with_capacity(captions.len() * len);
        let mut masks = Vec::with_capacity(captions.len());
        for c in captions {
            let n = c.len().min(n_max);
            inputs.push(START);
            inputs.extend_from_slice(&c[..n]);
            inputs.extend(std::iter::repeat_n(PAD, len - n - 1));
            targets.extend_from_slice(&c[..n]);
            targets.push(END);
            targets.extend(std::iter::repeat_n(PAD, len - n - 1));
            masks.push((0..len).map(|p| p <= n).collect());
        }
        TeacherBatch {
            inputs,
            targets,
            masks,
            len,
        }
    }

    pub fn batch(&self) -> usize {
        self.masks.len()
    }
}

/// Encoded regions ready for cross-attention.
pub struct Memory {
    /// `[batch*m, d]`
    pub values: Var,
    /// `values + PE`
    pub keys: Var,
    pub batch: usize,
    pub m: usize,
    /// Self-attention probabilities, per layer then per (item, head).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub encoder: Vec<EncoderLayer>,
    pub embedding: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub hidden: Linear,
    pub out: Linear,
}

impl Captioner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: CaptionerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, h, f) = (config.d, config.heads, config.ffn);
        let encoder = (0..config.enc_layers)
            .map(|l| EncoderLayer::new(store, &format!("{prefix}.enc{l}"), d, h, f, rng))
            .collect::<Result<_>>()?;
        let embedding = store.register(format!("{prefix}.embed"), Tensor::randn(&[config.vocab, d], 1.0, rng))?;
        let decoder = (0..config.dec_layers)
            .map(|l| DecoderLayer::new(store, &format!("{prefix}.dec{l}"), d, h, f, rng))
            .collect::<Result<_>>()?;
        let hidden = Linear::new(store, &format!("{prefix}.hidden"), d, d, true, rng)?;
        let out = Linear::new(store, &format!("{prefix}.out"), d, config.vocab, true, rng)?;
        Ok(Captioner {
            config,
            encoder,
            embedding,
            decoder,
            hidden,
            out,
        })
    }

    /// Self-attention over each item's regions, with positions added to the
    /// query/key input of every layer.
    pub fn encode_regions(&self, g: &mut Graph, r: Var, batch: usize, m: usize) -> Result<Memory> {
        if g.shape(r) != [batch * m, self.config.d] {
            return Err(Error::shape(
                "region encoder",
                format!("expected [{}, {}], got {:?}", batch * m, self.config.d, g.shape(r)),
            ));
        }
        let pe = g.constant(tiled_positional_encoding(batch, m, self.config.d));
        let mut x = r;
        let mut attention = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let attn_in = g.add(x, pe)?;
            let out = layer.forward(g, x, attn_in, batch, m, None)?;
            x = out.out;
            attention.push(out.probs);
        }
        let keys = g.add(x, pe)?;
        Ok(Memory {
            values: x,
            keys,
            batch,
            m,
            attention,
        })
    }

    /// Next-token logits at every position, `[batch*len, V]`.
    ///
    /// `ids` holds `batch` prefixes of length `len`, each starting with START;
    /// `keys` marks real prefix positions.
    pub fn logits(&self, g: &mut Graph, mem: &Memory, ids: &[usize], keys: &[Vec<bool>], len: usize) -> Result<Var> {
        let b = mem.batch;
        if ids.len() != b * len || keys.len() != b || len == 0 {
            return Err(Error::shape(
                "decoder",
                format!("{} ids and {} masks for {b} prefixes of length {len}", ids.len(), keys.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab) {
            return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        let table = g.param(self.embedding);
        let e = g.gather_rows(table, ids)?;
        let pe = g.constant(tiled_positional_encoding(b, len, self.config.d));
        let mut x = g.add(e, pe)?;
        let self_masks: Vec<AttnMask> = keys.iter().map(|k| causal_mask(len, k)).collect();
        let inputs = DecoderInputs {
            batch: b,
            n: len,
            self_masks: &self_masks,
            mem_keys: mem.keys,
            mem_values: mem.values,
            m: mem.m,
        };
        for layer in &self.decoder {
            x = layer.forward(g, x, &inputs)?;
        }
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    /// Summed negative log-likelihood over real positions, averaged over the batch.
    pub fn captioning_loss(&self, g: &mut Graph, mem: &Memory, tb: &TeacherBatch) -> Result<Var> {
        if tb.batch() != mem.batch {
            return Err(Error::shape(
                "captioning loss",
                format!("{} captions for {} images", tb.batch(), mem.batch),
            ));
        }
        let logits = self.logits(g, mem, &tb.inputs, &tb.masks, tb.len)?;
        let lp = g.log_softmax(logits, 1)?;
        let v = self.config.vocab;
        let mut idx = Vec::new();
        for (i, m) in tb.masks.iter().enumerate() {
            for (p, _) in m.iter().enumerate().filter(|(_, &k)| k) {
                let row = i * tb.len + p;
                idx.push(row * v + tb.targets[row]);
            }
        }
        let picked = g.pick(lp, &idx)?;
        let total = g.sum(picked);
        Ok(g.scale(total, -1.0 / mem.batch as f64))
    }

    /// Distribution over the next token for one item given a prefix that
    /// starts with START.
    pub fn decode_step(&self, g: &mut Graph, mem: &Memory, item: usize, prefix: &[usize]) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoding needs a non-empty prefix".into()));
        }
        if prefix[0] != START {
            return Err(Error::Contract("a decoding prefix must begin with START".into()));
        }
        if item >= mem.batch {
            return Err(Error::shape("decode step", format!("item {item} of {}", mem.batch)));
        }
        let rows: Vec<usize> = (item * mem.m..(item + 1) * mem.m).collect();
        let single = Memory {
            values: g.gather_rows(mem.values, &rows)?,
            keys: g.gather_rows(mem.keys, &rows)?,
            batch: 1,
            m: mem.m,
            attention: Vec::new(),
        };
        let logits = self.logits(g, &single, prefix, &[vec![true; prefix.len()]], prefix.len())?;
        let last = g.slice_rows(logits, prefix.len() - 1, 1)?;
        let p = g.softmax(last, 1, None)?;
        Ok(g.value(p).clone().reshape(&[self.config.vocab])?)
    }

    /// Greedy captions for each item: START is implied and not returned,
    /// decoding stops at END (excluded) or after `n_max` words.
    pub fn generate(&self, g: &mut Graph, mem: &Memory) -> Result<Vec<Vec<usize>>> {
        let b = mem.batch;
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 0..self.config.n_max {
            let len = step + 1;
            let mut ids = Vec::with_capacity(b * len);
            for s in &seqs {
                ids.push(START);
                ids.extend_from_slice(s);
                ids.extend(std::iter::repeat_n(PAD, len - 1 - s.len()));
            }
            let keys: Vec<Vec<bool>> = seqs.iter().map(|s| (0..len).map(|p| p <= s.len()).collect()).collect();
            let logits = self.logits(g, mem, &ids, &keys, len)?;
            let vals = g.value(logits);
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let tok = argmax(vals.row(i * len + len - 1));
                if tok == END {
                    done[i] = true;
                } else {
                    seqs[i].push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
