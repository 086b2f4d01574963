//! Word-region attention matching: attention, word and sentence scores,
//! batch posterior losses and the total matching loss.
//!
//! Region features are `[M, d]` per image and word features `[N, d]` per
//! text, so `m = w r^T` is `[N, M]`. Batched paths score every image of a
//! batch against one text at a time in `[B, M, N]` layout.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::EncodedImage;
use crate::text::EncodedText;

pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gammas {
    /// Attention sharpening.
    pub g1: f64,
    /// Log-sum-exp magnification.
    pub g2: f64,
    /// Posterior sharpening.
    pub g3: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Gammas {
            g1: 4.0,
            g2: 5.0,
            g3: 10.0,
        }
    }
}

impl Gammas {
    pub fn validate(&self) -> Result<()> {
        if [self.g1, self.g2, self.g3].iter().all(|g| *g > 0.0 && g.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("gammas must be positive, got {self:?}")))
        }
    }
}

fn check_width(g: &Graph, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape(
            "word-region attention",
            format!("word features {:?} and region features {:?} differ in width", sa, sb),
        ));
    }
    Ok(())
}

/// Attention of each word over regions, `alpha: [N, M]`, and the attended
/// region context `c = alpha r: [N, d]`. Rows of masked words are zero.
pub fn word_region_attention(
    g: &mut Graph,
    w: Var,
    r: Var,
    mask: Option<&[bool]>,
    gamma1: f64,
) -> Result<(Var, Var)> {
    check_width(g, w, r)?;
    let (n, m) = (g.shape(w)[0], g.shape(r)[0]);
    if let Some(mk) = mask {
        if mk.len() != n {
            return Err(Error::shape("word-region attention", format!("mask of {} for {n} words", mk.len())));
        }
    }
    let keep: Option<Vec<bool>> = mask.map(|mk| (0..n * m).map(|i| mk[i / m]).collect());
    let logits = g.matmul_nt(w, r)?;
    let over_words = g.softmax(logits, 0, keep.as_deref())?;
    let sharpened = g.scale(over_words, gamma1);
    let alpha = g.softmax(sharpened, 1, keep.as_deref())?;
    let c = g.matmul(alpha, r)?;
    Ok((alpha, c))
}

/// Word-level match score `(1/g2) log sum_j exp(g2 cos(c_j, w_j))` over real words.
pub fn word_match_score(g: &mut Graph, w: Var, r: Var, mask: Option<&[bool]>, gammas: Gammas) -> Result<Var> {
    let n = g.shape(w)[0];
    let real: Vec<usize> = match mask {
        Some(mk) => (0..n).filter(|&j| mk.get(j).copied().unwrap_or(false)).collect(),
        None => (0..n).collect(),
    };
    if real.is_empty() {
        return Err(Error::DegenerateInput("word match score needs at least one real word".into()));
    }
    let (_, c) = word_region_attention(g, w, r, mask, gammas.g1)?;
    let (c, w) = if real.len() == n {
        (c, w)
    } else {
        (g.gather_rows(c, &real)?, g.gather_rows(w, &real)?)
    };
    let cos = g.cosine_rows(c, w, NORM_EPS)?;
    let scaled = g.scale(cos, gammas.g2);
    let lse = g.logsumexp(scaled)?;
    Ok(g.scale(lse, 1.0 / gammas.g2))
}

/// Cosine between two global vectors given as `[d]` or `[1, d]`.
pub fn sentence_match_score(g: &mut Graph, v: Var, s: Var) -> Result<Var> {
    let as_row = |g: &mut Graph, x: Var| -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        g.reshape(x, &[1, d])
    };
    let (v, s) = (as_row(g, v)?, as_row(g, s)?);
    let c = g.cosine_rows(v, s, NORM_EPS)?;
    g.reshape(c, &[])
}

/// `[B_img, B_txt]` word-level scores; entry `(i, j)` scores image `i`
/// against text `j`.
pub fn word_score_matrix(
    g: &mut Graph,
    r: Var,
    regions: usize,
    text: &EncodedText,
    gammas: Gammas,
) -> Result<Var> {
    let d = g.shape(r)[1];
    let b_img = g.shape(r)[0] / regions;
    if b_img * regions != g.shape(r)[0] || b_img == 0 {
        return Err(Error::shape(
            "word score matrix",
            format!("{:?} region rows are not a multiple of {regions}", g.shape(r)),
        ));
    }
    if g.shape(text.w)[1] != d {
        return Err(Error::shape(
            "word score matrix",
            format!("word width {} differs from region width {d}", g.shape(text.w)[1]),
        ));
    }
    let r3 = g.reshape(r, &[b_img, regions, d])?;
    let mut cols = Vec::with_capacity(text.batch());
    for j in 0..text.batch() {
        let n = text.n_real(j);
        if n == 0 {
            return Err(Error::DegenerateInput(format!("text {j} has no real words")));
        }
        let wj = text.words(g, j)?;
        let logits = g.matmul_nt(r, wj)?;
        let logits = g.reshape(logits, &[b_img, regions, n])?;
        let over_words = g.softmax(logits, 2, None)?;
        let sharpened = g.scale(over_words, gammas.g1);
        let alpha = g.softmax(sharpened, 1, None)?;
        let c = g.batch_matmul(alpha, true, r3, false)?;
        let c = g.reshape(c, &[b_img * n, d])?;
        let tiled: Vec<usize> = (0..b_img).flat_map(|_| 0..n).collect();
        let wt = g.gather_rows(wj, &tiled)?;
        let cos = g.cosine_rows(c, wt, NORM_EPS)?;
        let cos = g.reshape(cos, &[b_img, n])?;
        let scaled = g.scale(cos, gammas.g2);
        let lse = g.logsumexp_axis(scaled, 1)?;
        let score = g.scale(lse, 1.0 / gammas.g2);
        cols.push(g.reshape(score, &[b_img, 1])?);
    }
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        g.concat_cols(&cols)
    }
}

/// `[B_img, B_txt]` cosine between every global image and sentence vector.
pub fn sentence_score_matrix(g: &mut Graph, v: Var, s: Var) -> Result<Var> {
    let (bi, bt) = (g.shape(v)[0], g.shape(s)[0]);
    let vi: Vec<usize> = (0..bi).flat_map(|i| std::iter::repeat_n(i, bt)).collect();
    let si: Vec<usize> = (0..bi).flat_map(|_| 0..bt).collect();
    let vr = g.gather_rows(v, &vi)?;
    let sr = g.gather_rows(s, &si)?;
    let cos = g.cosine_rows(vr, sr, NORM_EPS)?;
    g.reshape(cos, &[bi, bt])
}

/// Posterior losses of a square score matrix: image-to-text over rows and
/// text-to-image over columns, each averaged over the batch.
pub fn batch_posterior_loss(g: &mut Graph, scores: Var, gamma3: f64) -> Result<(Var, Var)> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::shape("batch posterior loss", format!("score matrix {:?} is not square", shape)));
    }
    let b = shape[0];
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let sharp = g.scale(scores, gamma3);
    let mut side = |axis: usize| -> Result<Var> {
        let lp = g.log_softmax(sharp, axis)?;
        let d = g.pick(lp, &diag)?;
        let m = g.mean(d);
        Ok(g.scale(m, -1.0))
    };
    let it = side(1)?;
    let ti = side(0)?;
    Ok((it, ti))
}

/// The four directional terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct MatchingLoss {
    pub total: Var,
    pub sentence_ti: Var,
    pub sentence_it: Var,
    pub word_ti: Var,
    pub word_it: Var,
    pub word_scores: Var,
    pub sentence_scores: Var,
}

impl MatchingLoss {
    pub fn values(&self, g: &Graph) -> [f64; 5] {
        [
            g.scalar_value(self.total),
            g.scalar_value(self.sentence_ti),
            g.scalar_value(self.sentence_it),
            g.scalar_value(self.word_ti),
            g.scalar_value(self.word_it),
        ]
    }
}

/// Total matching loss over index-aligned image/text pairs.
pub fn matching_loss(g: &mut Graph, image: &EncodedImage, text: &EncodedText, gammas: Gammas) -> Result<MatchingLoss> {
    let b = g.shape(image.v)[0];
    if b != text.batch() || b == 0 {
        return Err(Error::shape(
            "matching loss",
            format!("{b} images against {} texts", text.batch()),
        ));
    }
    let word_scores = word_score_matrix(g, image.r, image.regions, text, gammas)?;
    let sentence_scores = sentence_score_matrix(g, image.v, text.s)?;
    let (word_it, word_ti) = batch_posterior_loss(g, word_scores, gammas.g3)?;
    let (sentence_it, sentence_ti) = batch_posterior_loss(g, sentence_scores, gammas.g3)?;
    let a = g.add(sentence_ti, sentence_it)?;
    let bb = g.add(word_ti, word_it)?;
    let total = g.add(a, bb)?;
    Ok(MatchingLoss {
        total,
        sentence_ti,
        sentence_it,
        word_ti,
        word_it,
        word_scores,
        sentence_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_region_gives_unit_attention() {
        let mut g = Graph::new();
        let w = g.constant(rows(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]));
        let r = g.constant(rows(&[&[0.3, 0.7]]));
        let (alpha, c) = word_region_attention(&mut g, w, r, None, 4.0).unwrap();
        assert!(g.value(alpha).data().iter().all(|&a| a == 1.0));
        for j in 0..3 {
            assert_eq!(g.value(c).row(j), &[0.3, 0.7]);
        }
    }

    #[test]
    fn equal_logits_give_region_mean() {
        let mut g = Graph::new();
        let w = g.constant(rows(&[&[0.0, 0.0]]));
        let r = g.constant(rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let (alpha, c) = word_region_attention(&mut g, w, r, None, 4.0).unwrap();
        assert_eq!(g.value(alpha).data(), &[0.5, 0.5]);
        assert_eq!(g.value(c).row(0), &[2.0, 3.0]);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(&[2, 3]));
        let r = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(word_region_attention(&mut g, w, r, None, 4.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn one_word_score_is_its_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let w = g.constant(Tensor::randn(&[1, 5], 1.0, &mut rng));
        let r = g.constant(Tensor::randn(&[4, 5], 1.0, &mut rng));
        let s = word_match_score(&mut g, w, r, None, Gammas::default()).unwrap();
        let (_, c) = word_region_attention(&mut g, w, r, None, 4.0).unwrap();
        let cos = g.cosine_rows(c, w, NORM_EPS).unwrap();
        assert!((g.scalar_value(s) - g.value(cos).item()).abs() < 1e-12);
    }

    #[test]
    fn all_masked_words_are_degenerate() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(&[2, 3]));
        let r = g.constant(Tensor::zeros(&[2, 3]));
        let err = word_match_score(&mut g, w, r, Some(&[false, false]), Gammas::default());
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn posterior_loss_closed_forms() {
        let mut g = Graph::new();
        let one = g.constant(rows(&[&[0.7]]));
        let (it, ti) = batch_posterior_loss(&mut g, one, 10.0).unwrap();
        assert_eq!((g.scalar_value(it), g.scalar_value(ti)), (0.0, 0.0));

        let uniform = g.constant(Tensor::full(&[3, 3], 0.2));
        let (it, ti) = batch_posterior_loss(&mut g, uniform, 10.0).unwrap();
        assert!((g.scalar_value(it) - 3f64.ln()).abs() < 1e-12);
        assert!((g.scalar_value(ti) - 3f64.ln()).abs() < 1e-12);

        let sharp = g.constant(rows(&[&[10.0, -10.0], &[-10.0, 10.0]]));
        let (it, ti) = batch_posterior_loss(&mut g, sharp, 10.0).unwrap();
        assert!(g.scalar_value(it) < 1e-8 && g.scalar_value(ti) < 1e-8);
    }
}
