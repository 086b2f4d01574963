//! Word-level vocabulary and the transformer text encoder.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{key_padding_mask, tiled_positional_encoding, AttnMask, EncoderLayer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;
const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Sorted word list; the id of a word is its position plus [`RESERVED`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = words.into_iter().map(Into::into).collect();
        list.sort();
        list.dedup();
        let index = list
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + RESERVED))
            .collect();
        Vocabulary { words: list, index }
    }

    /// Vocabulary of every token appearing in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_words(texts.into_iter().flat_map(tokenize))
    }

    pub fn len(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        match id {
            i if i < RESERVED => Ok(RESERVED_NAMES[i]),
            i if i < self.len() => Ok(&self.words[i - RESERVED]),
            i => Err(Error::Vocabulary(format!("id {i} outside vocabulary of {}", self.len()))),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Words for ids, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED && i < self.len())
            .map(|&i| self.words[i - RESERVED].clone())
            .collect()
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if words.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format {
                path: path.into(),
                detail: "vocabulary lines must be sorted and unique".into(),
            });
        }
        Ok(Self::from_words(words))
    }
}

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `batch * n` ids, item-major.
    pub ids: Vec<usize>,
    /// One length-`n` mask per item; `true` marks a real token.
    pub masks: Vec<Vec<bool>>,
    pub n: usize,
}

impl TokenBatch {
    /// Pads (or truncates) each sequence to `n`.
    pub fn from_sequences(seqs: &[Vec<usize>], n: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * n);
        let mut masks = Vec::with_capacity(seqs.len());
        for s in seqs {
            let len = s.len().min(n);
            ids.extend_from_slice(&s[..len]);
            ids.extend(std::iter::repeat_n(PAD, n - len));
            masks.push((0..n).map(|i| i < len).collect());
        }
        TokenBatch { ids, masks, n }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn item(&self, i: usize) -> TokenBatch {
        TokenBatch {
            ids: self.ids[i * self.n..(i + 1) * self.n].to_vec(),
            masks: vec![self.masks[i].clone()],
            n: self.n,
        }
    }

    pub fn select(&self, items: &[usize]) -> TokenBatch {
        let mut ids = Vec::with_capacity(items.len() * self.n);
        for &i in items {
            ids.extend_from_slice(&self.ids[i * self.n..(i + 1) * self.n]);
        }
        TokenBatch {
            ids,
            masks: items.iter().map(|&i| self.masks[i].clone()).collect(),
            n: self.n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub n_max: usize,
}

impl TextConfig {
    pub fn desk() -> Self {
        TextConfig {
            d: 64,
            heads: 8,
            layers: 1,
            ffn: 128,
            n_max: 15,
        }
    }

    pub fn paper() -> Self {
        TextConfig {
            d: 256,
            heads: 8,
            layers: 1,
            ffn: 512,
            n_max: 15,
        }
    }
}

/// Encoder output for a batch, token-major.
pub struct EncodedText {
    /// `[batch*n, d]`
    pub w: Var,
    /// `[batch, d]`, the mean of each item's real rows of `w`.
    pub s: Var,
    pub masks: Vec<Vec<bool>>,
    pub n: usize,
    /// Self-attention probabilities, per layer then per (item, head).
    pub attention: Vec<Vec<Var>>,
}

impl EncodedText {
    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    pub fn n_real(&self, item: usize) -> usize {
        self.masks[item].iter().filter(|&&m| m).count()
    }

    /// Row indices of `w` holding item `i`'s real words.
    pub fn real_rows(&self, item: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.masks[item][j]).map(|j| item * self.n + j).collect()
    }

    /// `[n_real, d]` word features of one item.
    pub fn words(&self, g: &mut Graph, item: usize) -> Result<Var> {
        g.gather_rows(self.w, &self.real_rows(item))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: TextConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = store.register(
            format!("{prefix}.embed"),
            Tensor::randn(&[vocab_size, config.d], 1.0, rng),
        )?;
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(store, &format!("{prefix}.layer{l}"), config.d, config.heads, config.ffn, rng))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            config,
            vocab_size,
            embedding,
            layers,
        })
    }

    fn validate(&self, batch: &TokenBatch) -> Result<()> {
        if batch.n > self.config.n_max {
            return Err(Error::shape(
                "text encoder",
                format!("sequence length {} exceeds maximum {}", batch.n, self.config.n_max),
            ));
        }
        if batch.ids.len() != batch.len() * batch.n || batch.masks.iter().any(|m| m.len() != batch.n) {
            return Err(Error::shape("text encoder", "ids and masks disagree with the padded length"));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if let Some(i) = batch.masks.iter().position(|m| !m.iter().any(|&x| x)) {
            return Err(Error::DegenerateInput(format!("text {i} has no real tokens")));
        }
        if batch.is_empty() {
            return Err(Error::DegenerateInput("empty text batch".into()));
        }
        Ok(())
    }

    /// Token embedding plus sinusoidal position, `[batch*n, d]`.
    pub fn embed(&self, g: &mut Graph, batch: &TokenBatch) -> Result<Var> {
        self.validate(batch)?;
        let table = g.param(self.embedding);
        let e = g.gather_rows(table, &batch.ids)?;
        let pe = g.constant(tiled_positional_encoding(batch.len(), batch.n, self.config.d));
        g.add(e, pe)
    }

    pub fn encode(&self, g: &mut Graph, batch: &TokenBatch) -> Result<EncodedText> {
        let mut x = self.embed(g, batch)?;
        let (b, n) = (batch.len(), batch.n);
        let masks: Vec<AttnMask> = batch.masks.iter().map(|m| key_padding_mask(n, m)).collect();
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, x, x, b, n, Some(&masks))?;
            x = out.out;
            attention.push(out.probs);
        }
        // Averaging matrix: row i holds 1/n_i at item i's real positions.
        let mut avg = Tensor::zeros(&[b, b * n]);
        for (i, m) in batch.masks.iter().enumerate() {
            let count = m.iter().filter(|&&v| v).count() as f64;
            for (j, _) in m.iter().enumerate().filter(|(_, &v)| v) {
                avg.data_mut()[i * b * n + i * n + j] = 1.0 / count;
            }
        }
        let avg = g.constant(avg);
        let s = g.matmul(avg, x)?;
        Ok(EncodedText {
            w: x,
            s,
            masks: batch.masks.clone(),
            n,
            attention,
        })
    }
}
