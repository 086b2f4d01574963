//! Retrieval, attribute and captioning metrics on plain tensors.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;

/// Retrieval protocol: one positive plus `pool - 1` sampled negatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalSpec {
    pub pool: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        RetrievalSpec {
            pool: 100,
            top_k: 3,
            seed: 0,
        }
    }
}

/// Fraction of queries whose positive ranks within `top_k` of its pool.
///
/// Query `q`'s positive candidate is `positive(q)`. Negatives are drawn
/// without replacement from the other candidates and the positive is placed
/// at a random slot; equal scores rank by slot.
pub fn r_precision<P, S>(queries: usize, candidates: usize, positive: P, mut score: S, spec: RetrievalSpec) -> Result<f64>
where
    P: Fn(usize) -> usize,
    S: FnMut(usize, usize) -> f64,
{
    if spec.pool > candidates {
        return Err(Error::Sampling(format!(
            "pool of {} exceeds the {candidates} available candidates",
            spec.pool
        )));
    }
    if spec.top_k == 0 || spec.pool <= spec.top_k {
        return Err(Error::Sampling(format!(
            "pool {} must exceed top-k {} > 0",
            spec.pool, spec.top_k
        )));
    }
    if queries == 0 {
        return Err(Error::DegenerateInput("no retrieval queries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut hits = 0usize;
    for q in 0..queries {
        let pos = positive(q);
        if pos >= candidates {
            return Err(Error::Sampling(format!("positive {pos} of query {q} is not a candidate")));
        }
        // Sample from the candidates with the positive removed.
        let negs = sample(&mut rng, candidates - 1, spec.pool - 1);
        let slot = rng.random_range(0..spec.pool);
        let mut pool: Vec<usize> = negs.iter().map(|i| if i >= pos { i + 1 } else { i }).collect();
        pool.insert(slot, pos);
        let scores: Vec<f64> = pool.iter().map(|&c| score(q, c)).collect();
        let s = scores[slot];
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(i, &x)| x > s || (x == s && i < slot))
            .count();
        if rank < spec.top_k {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries as f64)
}

/// R-precision in both directions over a square image-by-text score matrix
/// whose diagonal holds the matching pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub text_to_image: f64,
    pub image_to_text: f64,
}

impl RetrievalReport {
    pub fn mean(&self) -> f64 {
        0.5 * (self.text_to_image + self.image_to_text)
    }
}

pub fn retrieval_from_scores(scores: &Tensor, spec: RetrievalSpec) -> Result<RetrievalReport> {
    if scores.ndim() != 2 || scores.rows() != scores.cols() {
        return Err(Error::shape("retrieval", format!("score matrix {:?} is not square", scores.shape())));
    }
    let n = scores.rows();
    let text_to_image = r_precision(n, n, |q| q, |q, c| scores.at(c, q), spec)?;
    let other = RetrievalSpec {
        seed: spec.seed ^ 0x9e37_79b9_7f4a_7c15,
        ..spec
    };
    let image_to_text = r_precision(n, n, |q| q, |q, c| scores.at(q, c), other)?;
    Ok(RetrievalReport {
        text_to_image,
        image_to_text,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AimcosReport {
    pub score: f64,
    pub images: usize,
    /// Images skipped because they had no attributes.
    pub skipped: usize,
}

/// Mean over images of the mean cosine between the image's global feature
/// and each of its attribute sentence features.
///
/// `v` is `[U, d]`; `attributes[u]` is `[K_u, d]`.
pub fn aimcos(v: &Tensor, attributes: &[Tensor]) -> Result<AimcosReport> {
    if v.ndim() != 2 || v.rows() != attributes.len() {
        return Err(Error::shape(
            "aimcos",
            format!("{:?} image features for {} attribute sets", v.shape(), attributes.len()),
        ));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (u, a) in attributes.iter().enumerate() {
        if a.is_empty() {
            log::warn!("image {u} has no attributes; skipped");
            skipped += 1;
            continue;
        }
        if a.ndim() != 2 || a.cols() != v.cols() {
            return Err(Error::shape("aimcos", format!("attributes {:?} for width {}", a.shape(), v.cols())));
        }
        let k = a.rows();
        total += (0..k).map(|i| cosine(v.row(u), a.row(i))).sum::<f64>() / k as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateInput("no image has attributes".into()));
    }
    Ok(AimcosReport {
        score: total / used as f64,
        images: used,
        skipped,
    })
}

/// A seeded permutation with no fixed points (for `n >= 2`).
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    // Sattolo's algorithm yields a single n-cycle.
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// `C x C` matrix: cell `(i, j)` is the mean cosine between token `i` and
/// the images in group `j`.
pub fn similarity_map(tokens: &Tensor, groups: &[Tensor]) -> Result<Tensor> {
    let c = tokens.rows();
    if groups.len() != c {
        return Err(Error::shape("similarity map", format!("{c} tokens for {} groups", groups.len())));
    }
    let mut out = Tensor::zeros(&[c, c]);
    for (j, grp) in groups.iter().enumerate() {
        if grp.is_empty() {
            return Err(Error::DegenerateInput(format!("class group {j} is empty")));
        }
        if grp.cols() != tokens.cols() {
            return Err(Error::shape("similarity map", format!("group {:?} for width {}", grp.shape(), tokens.cols())));
        }
        for i in 0..c {
            let m = (0..grp.rows()).map(|r| cosine(tokens.row(i), grp.row(r))).sum::<f64>() / grp.rows() as f64;
            out.data_mut()[i * c + j] = m;
        }
    }
    Ok(out)
}

/// Rows whose diagonal cell is strictly larger than every other cell.
pub fn dominant_rows(map: &Tensor) -> usize {
    (0..map.rows())
        .filter(|&i| {
            let row = map.row(i);
            row.iter().enumerate().all(|(j, &x)| j == i || row[i] > x)
        })
        .count()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-n: clipped n-gram precisions pooled over the corpus,
/// geometric mean over orders `1..=n`, brevity penalty against the closest
/// reference length. No smoothing.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "bleu",
            format!("{} candidates for {} reference sets", candidates.len(), references.len()),
        ));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        if c.is_empty() {
            log::warn!("empty candidate caption scores zero");
        }
        if refs.is_empty() {
            return Err(Error::DegenerateInput("candidate without references".into()));
        }
        cand_len += c.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty");
        for k in 1..=n {
            let cg = ngrams(c, k);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in &cg {
                matched[k - 1] += (*cnt).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[k - 1] += c.len().saturating_sub(k - 1);
        }
    }
    if cand_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// One exported embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub modality: String,
    pub values: Vec<f64>,
}

const EMBEDDING_MAGIC: &str = "vistext-embeddings";
const EMBEDDING_VERSION: u32 = 1;

/// Header line `vistext-embeddings <version> <d> <count>`, then
/// `id,modality,x1,..,xd` per row. Floats print in shortest round-trip form.
pub fn write_embeddings(path: &Path, d: usize, rows: &[EmbeddingRow]) -> Result<()> {
    let mut s = format!("{EMBEDDING_MAGIC} {EMBEDDING_VERSION} {d} {}\n", rows.len());
    for r in rows {
        if r.values.len() != d {
            return Err(Error::shape("embedding export", format!("row {} has {} values, expected {d}", r.id, r.values.len())));
        }
        if r.id.contains(',') || r.modality.contains(',') {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("id {:?} or modality {:?} contains a comma", r.id, r.modality),
            });
        }
        s.push_str(&r.id);
        s.push(',');
        s.push_str(&r.modality);
        for v in &r.values {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<(usize, Vec<EmbeddingRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if header.len() != 4 || header[0] != EMBEDDING_MAGIC {
        return Err(bad("missing embedding header".into()));
    }
    if header[1] != EMBEDDING_VERSION.to_string() {
        return Err(bad(format!("unsupported version {}", header[1])));
    }
    let d: usize = header[2].parse().map_err(|_| bad("bad width".into()))?;
    let count: usize = header[3].parse().map_err(|_| bad("bad count".into()))?;
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or("").to_string();
        let modality = parts.next().ok_or_else(|| bad(format!("row {i} lacks a modality")))?.to_string();
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {i}: {e}")))?;
        if values.len() != d {
            return Err(bad(format!("row {i} has {} values, expected {d}", values.len())));
        }
        rows.push(EmbeddingRow { id, modality, values });
    }
    if rows.len() != count {
        return Err(bad(format!("header promises {count} rows, found {}", rows.len())));
    }
    Ok((d, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn oracle_and_adversarial_scorers() {
        let spec = RetrievalSpec { pool: 10, top_k: 3, seed: 1 };
        let good = r_precision(50, 50, |q| q, |q, c| if q == c { 1.0 } else { 0.0 }, spec).unwrap();
        assert_eq!(good, 1.0);
        let bad = r_precision(50, 50, |q| q, |q, c| if q == c { -1.0 } else { 0.0 }, spec).unwrap();
        assert_eq!(bad, 0.0);
    }

    #[test]
    fn pool_larger_than_corpus_is_a_sampling_error() {
        let spec = RetrievalSpec { pool: 100, top_k: 3, seed: 1 };
        assert!(matches!(r_precision(5, 50, |q| q, |_, _| 0.0, spec), Err(Error::Sampling(_))));
    }

    #[test]
    fn constant_scorer_ranks_by_slot() {
        // Ties rank by slot, so hits happen exactly when the slot is < top_k.
        let spec = RetrievalSpec { pool: 10, top_k: 3, seed: 5 };
        let r = r_precision(2000, 20, |q| q % 20, |_, _| 0.0, spec).unwrap();
        assert!((r - 0.3).abs() < 0.04, "{r}");
    }

    #[test]
    fn bleu_hand_counted() {
        let b = corpus_bleu(&[toks("a b c")], &[vec![toks("a b d")]], 1).unwrap();
        assert_eq!(b, 2.0 / 3.0);
        let b = corpus_bleu(&[toks("a b c")], &[vec![toks("a b c")]], 4).unwrap_or(0.0);
        assert_eq!(b, 0.0, "three tokens have no 4-gram");
        let b = corpus_bleu(&[toks("a b c d")], &[vec![toks("a b c d")]], 4).unwrap();
        assert_eq!(b, 1.0);
        let b = corpus_bleu(&[toks("x y")], &[vec![toks("a b")]], 1).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn bleu_clips_repeated_words_and_penalises_brevity() {
        let b = corpus_bleu(&[toks("a a a")], &[vec![toks("a b c")]], 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-15);
        let b = corpus_bleu(&[toks("a b")], &[vec![toks("a b c d")]], 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..20 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn aimcos_extremes() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let same = vec![
            Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 5.0]]).unwrap(),
        ];
        assert!((aimcos(&v, &same).unwrap().score - 1.0).abs() < 1e-15);
        let orth = vec![
            Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        ];
        assert_eq!(aimcos(&v, &orth).unwrap().score, 0.0);
        let with_empty = vec![same[0].clone(), Tensor::zeros(&[0, 2])];
        let r = aimcos(&v, &with_empty).unwrap();
        assert_eq!((r.images, r.skipped), (1, 1));
    }

    #[test]
    fn similarity_map_of_aligned_encoder_is_diagonal() {
        let tokens = Tensor::identity(3);
        let groups: Vec<Tensor> = (0..3)
            .map(|j| {
                let mut t = Tensor::zeros(&[2, 3]);
                t.data_mut()[j] = 1.0;
                t.data_mut()[3 + j] = 2.0;
                t
            })
            .collect();
        let m = similarity_map(&tokens, &groups).unwrap();
        assert_eq!(m.max_abs_diff(&Tensor::identity(3)), 0.0);
        assert_eq!(dominant_rows(&m), 3);
        assert!(similarity_map(&tokens, &[groups[0].clone(), groups[1].clone(), Tensor::zeros(&[0, 3])]).is_err());
    }

    #[test]
    fn embedding_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        let rows = vec![
            EmbeddingRow { id: "img0".into(), modality: "image".into(), values: vec![0.1, -1e-300, 1.0 / 3.0] },
            EmbeddingRow { id: "red circle".into(), modality: "text".into(), values: vec![f64::MAX, 0.0, -2.5] },
        ];
        write_embeddings(&p, 3, &rows).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), (3, rows));
        write_embeddings(&p, 3, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "vistext-embeddings 1 3 0\n");
    }
}
