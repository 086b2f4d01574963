//! Model-level evaluation: retrieval, attribute scores, class similarity
//! maps, captioning quality and embedding export.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{
    aimcos, corpus_bleu, derangement, retrieval_from_scores, similarity_map, AimcosReport,
    EmbeddingRow, RetrievalReport, RetrievalSpec,
};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::text::{tokenize, TokenBatch};
use crate::vta::{sentence_score_matrix, word_score_matrix, Gammas};

const IMAGE_CHUNK: usize = 64;
const TEXT_CHUNK: usize = 16;

/// Encoded images: regions `[n*M, d]` and globals `[n, d]`.
pub struct ImageEmbeddings {
    pub r: Tensor,
    pub v: Tensor,
    pub regions: usize,
}

fn frozen_graph(model: &Model) -> Graph<'_> {
    let mut g = Graph::with_params(&model.store);
    g.freeze_prefix("");
    g
}

fn concat_rows(parts: Vec<Tensor>, d: usize) -> Result<Tensor> {
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len() / d, d], data)
}

pub fn image_embeddings(model: &Model, data: &Dataset, items: &[usize]) -> Result<ImageEmbeddings> {
    let d = model.image.config.d;
    let (mut rs, mut vs) = (Vec::new(), Vec::new());
    for c in items.chunks(IMAGE_CHUNK) {
        let mut g = frozen_graph(model);
        let px = g.constant(data.pixel_batch(c));
        let e = model.image.encode(&mut g, px)?;
        rs.push(g.value(e.r).clone());
        vs.push(g.value(e.v).clone());
    }
    Ok(ImageEmbeddings {
        r: concat_rows(rs, d)?,
        v: concat_rows(vs, d)?,
        regions: model.image.config.regions(),
    })
}

/// Sentence features `[n, d]` of token sequences.
pub fn sentence_embeddings(model: &Model, seqs: &[Vec<usize>]) -> Result<Tensor> {
    let n_max = model.text.config.n_max;
    let mut parts = Vec::new();
    for c in seqs.chunks(IMAGE_CHUNK) {
        let mut g = frozen_graph(model);
        let et = model.text.encode(&mut g, &TokenBatch::from_sequences(c, n_max))?;
        parts.push(g.value(et.s).clone());
    }
    concat_rows(parts, model.text.config.d)
}

/// `[n_images, n_texts]` retrieval scores: sentence cosine plus word-level
/// score, equally weighted.
pub fn score_matrix(model: &Model, images: &ImageEmbeddings, seqs: &[Vec<usize>], gammas: Gammas) -> Result<Tensor> {
    let n_img = images.v.rows();
    let n_max = model.text.config.n_max;
    let mut out = Tensor::zeros(&[n_img, seqs.len()]);
    let mut col = 0;
    for c in seqs.chunks(TEXT_CHUNK) {
        let mut g = frozen_graph(model);
        let et = model.text.encode(&mut g, &TokenBatch::from_sequences(c, n_max))?;
        let r = g.constant(images.r.clone());
        let v = g.constant(images.v.clone());
        let ws = word_score_matrix(&mut g, r, images.regions, &et, gammas)?;
        let ss = sentence_score_matrix(&mut g, v, et.s)?;
        let (w, s) = (g.value(ws), g.value(ss));
        for i in 0..n_img {
            for j in 0..c.len() {
                out.data_mut()[i * seqs.len() + col + j] = w.at(i, j) + s.at(i, j);
            }
        }
        col += c.len();
    }
    Ok(out)
}

/// Retrieval over `items`, once per caption index with that caption as each
/// image's text, averaged.
pub fn retrieval(model: &Model, data: &Dataset, items: &[usize], spec: RetrievalSpec, gammas: Gammas) -> Result<RetrievalReport> {
    let images = image_embeddings(model, data, items)?;
    let captions = items
        .iter()
        .map(|&i| data.records[i].captions.len())
        .min()
        .ok_or_else(|| Error::DegenerateInput("no items to evaluate".into()))?;
    let n_max = model.text.config.n_max;
    let mut acc = RetrievalReport {
        text_to_image: 0.0,
        image_to_text: 0.0,
    };
    for c in 0..captions {
        let seqs: Vec<Vec<usize>> = items.iter().map(|&i| data.caption_ids(i, c, n_max)).collect();
        let scores = score_matrix(model, &images, &seqs, gammas)?;
        let r = retrieval_from_scores(
            &scores,
            RetrievalSpec {
                seed: spec.seed.wrapping_add(c as u64),
                ..spec
            },
        )?;
        acc.text_to_image += r.text_to_image / captions as f64;
        acc.image_to_text += r.image_to_text / captions as f64;
    }
    Ok(acc)
}

/// AIMCoS with each image's own attributes, and with attribute sets
/// reassigned by a seeded derangement.
pub fn aimcos_pair(model: &Model, data: &Dataset, items: &[usize], seed: u64) -> Result<(AimcosReport, AimcosReport)> {
    let images = image_embeddings(model, data, items)?;
    let n_max = model.text.config.n_max;
    let mut sets = Vec::with_capacity(items.len());
    for &i in items {
        let seqs: Vec<Vec<usize>> = data.records[i]
            .attributes
            .iter()
            .map(|a| {
                let mut ids = data.vocab.encode(a);
                ids.truncate(n_max);
                ids
            })
            .collect();
        sets.push(sentence_embeddings(model, &seqs)?);
    }
    let truth = aimcos(&images.v, &sets)?;
    let perm = derangement(items.len(), &mut ChaCha8Rng::seed_from_u64(seed));
    let shuffled: Vec<Tensor> = perm.iter().map(|&p| sets[p].clone()).collect();
    let permuted = aimcos(&images.v, &shuffled)?;
    Ok((truth, permuted))
}

/// Class-by-class map between class-name sentence features and the global
/// features of the first `per_class` listed images of each primary class.
pub fn class_similarity_map(model: &Model, data: &Dataset, items: &[usize], per_class: usize) -> Result<Tensor> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); data.classes.len()];
    for &i in items {
        let c = data.class_index(i);
        if groups[c].len() < per_class {
            groups[c].push(i);
        }
    }
    if let Some(c) = groups.iter().position(|g| g.len() < per_class) {
        return Err(Error::DegenerateInput(format!(
            "class {} has {} of the {per_class} images needed",
            data.classes[c],
            groups[c].len()
        )));
    }
    let tokens = sentence_embeddings(model, &data.classes.iter().map(|c| data.vocab.encode(c)).collect::<Vec<_>>())?;
    let embedded = groups
        .iter()
        .map(|g| image_embeddings(model, data, g).map(|e| e.v))
        .collect::<Result<Vec<_>>>()?;
    similarity_map(&tokens, &embedded)
}

/// Greedy captions for `items`.
pub fn generate_captions(model: &Model, data: &Dataset, items: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(items.len());
    for c in items.chunks(IMAGE_CHUNK) {
        let e = image_embeddings(model, data, c)?;
        let mut g = frozen_graph(model);
        let r = g.constant(e.r);
        let mem = model.cap.encode_regions(&mut g, r, c.len(), e.regions)?;
        out.extend(model.cap.generate(&mut g, &mem)?);
    }
    Ok(out)
}

/// Corpus BLEU-1..4 of greedy captions against each image's captions.
pub fn caption_bleu(model: &Model, data: &Dataset, items: &[usize]) -> Result<[f64; 4]> {
    let generated = generate_captions(model, data, items)?;
    let candidates: Vec<Vec<String>> = generated.iter().map(|c| data.vocab.decode(c)).collect();
    let references: Vec<Vec<Vec<String>>> = items
        .iter()
        .map(|&i| data.records[i].captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let mut out = [0.0; 4];
    for (n, o) in out.iter_mut().enumerate() {
        *o = corpus_bleu(&candidates, &references, n + 1)?;
    }
    Ok(out)
}

/// Rows for the image globals of `items` and the class-label sentences.
pub fn embedding_rows(model: &Model, data: &Dataset, items: &[usize]) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    if !items.is_empty() {
        let e = image_embeddings(model, data, items)?;
        for (k, &i) in items.iter().enumerate() {
            rows.push(EmbeddingRow {
                id: data.records[i].image.clone(),
                modality: "image".into(),
                values: e.v.row(k).to_vec(),
            });
        }
        let s = sentence_embeddings(model, &data.classes.iter().map(|c| data.vocab.encode(c)).collect::<Vec<_>>())?;
        for (k, c) in data.classes.iter().enumerate() {
            rows.push(EmbeddingRow {
                id: c.clone(),
                modality: "text".into(),
                values: s.row(k).to_vec(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub retrieval: RetrievalReport,
    pub aimcos: AimcosReport,
    pub aimcos_permuted: AimcosReport,
    pub bleu: Option<[f64; 4]>,
    pub spec: RetrievalSpec,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pool = {}", self.spec.pool);
        let _ = writeln!(s, "top_k = {}", self.spec.top_k);
        let _ = writeln!(s, "r_precision.text_to_image = {}", self.retrieval.text_to_image);
        let _ = writeln!(s, "r_precision.image_to_text = {}", self.retrieval.image_to_text);
        let _ = writeln!(s, "r_precision.mean = {}", self.retrieval.mean());
        let _ = writeln!(s, "aimcos = {}", self.aimcos.score);
        let _ = writeln!(s, "aimcos.permuted = {}", self.aimcos_permuted.score);
        let _ = writeln!(s, "aimcos.skipped = {}", self.aimcos.skipped);
        if let Some(b) = self.bleu {
            for (n, v) in b.iter().enumerate() {
                let _ = writeln!(s, "bleu{} = {}", n + 1, v);
            }
        }
        s
    }
}

pub fn evaluate(
    model: &Model,
    data: &Dataset,
    items: &[usize],
    spec: RetrievalSpec,
    gammas: Gammas,
    with_bleu: bool,
) -> Result<EvalReport> {
    let retrieval = retrieval(model, data, items, spec, gammas)?;
    let (aimcos, aimcos_permuted) = aimcos_pair(model, data, items, spec.seed)?;
    let bleu = if with_bleu {
        Some(caption_bleu(model, data, items)?)
    } else {
        None
    };
    Ok(EvalReport {
        retrieval,
        aimcos,
        aimcos_permuted,
        bleu,
        spec,
    })
}
