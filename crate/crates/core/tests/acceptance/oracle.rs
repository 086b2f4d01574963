//! Criterion 2: the matching pipeline and the assisting losses against a
//! brute-force scalar reimplementation written from the equations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistext::image::EncodedImage;
use vistext::text::EncodedText;
use vistext::trainer::assist_losses;
use vistext::vta::{matching_loss, Gammas};
use vistext::{Graph, Tensor};

use crate::Verdict;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-10;

/// One side of a batch: per-item word vectors (real words only) or regions,
/// plus one global vector per item.
#[derive(Clone)]
struct Side {
    locals: Vec<Vec<Vec<f64>>>,
    globals: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()).max(1e-8)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Word-level score of one text (`words`) against one image (`regions`).
fn word_score(words: &[Vec<f64>], regions: &[Vec<f64>], gm: Gammas) -> f64 {
    let (n, m) = (words.len(), regions.len());
    // Match matrix normalised over words for each region.
    let mut norm = vec![vec![0.0; m]; n];
    for l in 0..m {
        let col: Vec<f64> = (0..n).map(|k| dot(&words[k], &regions[l])).collect();
        for (k, p) in softmax(&col).into_iter().enumerate() {
            norm[k][l] = p;
        }
    }
    let mut total = 0.0;
    for k in 0..n {
        let alpha = softmax(&norm[k].iter().map(|x| gm.g1 * x).collect::<Vec<_>>());
        let d = words[k].len();
        let c: Vec<f64> = (0..d).map(|t| (0..m).map(|l| alpha[l] * regions[l][t]).sum()).collect();
        total += (gm.g2 * cos(&c, &words[k])).exp();
    }
    total.ln() / gm.g2
}

/// `-(1/B) sum_i log softmax_j(g3 S[i][j])[i]` over rows, and over columns.
fn posterior(scores: &[Vec<f64>], g3: f64) -> (f64, f64) {
    let b = scores.len();
    let (mut rows, mut cols) = (0.0, 0.0);
    for i in 0..b {
        let row: Vec<f64> = scores[i].iter().map(|x| g3 * x).collect();
        rows -= softmax(&row)[i].ln();
        let col: Vec<f64> = (0..b).map(|k| g3 * scores[k][i]).collect();
        cols -= softmax(&col)[i].ln();
    }
    (rows / b as f64, cols / b as f64)
}

/// `[total, sentence text-to-image, sentence image-to-text, word
/// text-to-image, word image-to-text]`.
fn oracle_loss(image: &Side, text: &Side, gm: Gammas) -> [f64; 5] {
    let b = image.globals.len();
    let word: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| word_score(&text.locals[j], &image.locals[i], gm)).collect())
        .collect();
    let sent: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| cos(&image.globals[i], &text.globals[j])).collect())
        .collect();
    let (w_it, w_ti) = posterior(&word, gm.g3);
    let (s_it, s_ti) = posterior(&sent, gm.g3);
    [s_ti + s_it + w_ti + w_it, s_ti, s_it, w_ti, w_it]
}

struct Instance {
    image: Side,
    text: Side,
    /// Padded word count per text.
    n: usize,
    regions: usize,
    gammas: Gammas,
}

fn random_vecs(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

fn instance(rng: &mut ChaCha8Rng, b: usize, n: usize, m: usize, d: usize) -> (Side, Side) {
    let image = Side {
        locals: (0..b).map(|_| random_vecs(m, d, rng)).collect(),
        globals: random_vecs(b, d, rng),
    };
    let text = Side {
        locals: (0..b).map(|_| random_vecs(rng.random_range(1..=n), d, rng)).collect(),
        globals: random_vecs(b, d, rng),
    };
    (image, text)
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let m = rng.random_range(1..=6);
    let d = rng.random_range(1..=8);
    let gammas = Gammas {
        g1: rng.random_range(1.0..8.0),
        g2: rng.random_range(1.0..8.0),
        g3: rng.random_range(1.0..12.0),
    };
    let (image, text) = instance(rng, b, n, m, d);
    Instance {
        image,
        text,
        n,
        regions: m,
        gammas,
    }
}

fn flat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).expect("rectangular")
}

fn encode_image(g: &mut Graph, side: &Side, regions: usize) -> EncodedImage {
    let r: Vec<Vec<f64>> = side.locals.iter().flatten().cloned().collect();
    EncodedImage {
        r: g.constant(flat(&r)),
        v: g.constant(flat(&side.globals)),
        regions,
    }
}

/// Pads every text to `n` words with garbage rows that the mask must hide.
fn encode_text(g: &mut Graph, side: &Side, n: usize) -> EncodedText {
    let d = side.globals[0].len();
    let mut w = Vec::new();
    let mut masks = Vec::new();
    for words in &side.locals {
        w.extend(words.iter().cloned());
        w.extend(std::iter::repeat_n(vec![7.0; d], n - words.len()));
        masks.push((0..n).map(|j| j < words.len()).collect());
    }
    EncodedText {
        w: g.constant(flat(&w)),
        s: g.constant(flat(&side.globals)),
        masks,
        n,
        attention: Vec::new(),
    }
}

fn matching_gap(inst: &Instance) -> f64 {
    let want = oracle_loss(&inst.image, &inst.text, inst.gammas);
    let mut g = Graph::new();
    let image = encode_image(&mut g, &inst.image, inst.regions);
    let text = encode_text(&mut g, &inst.text, inst.n);
    let got = matching_loss(&mut g, &image, &text, inst.gammas).expect("valid instance").values(&g);
    want.iter().zip(got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn assist_gap(rng: &mut ChaCha8Rng) -> f64 {
    let inst = random_instance(rng);
    let b = inst.image.globals.len();
    let d = inst.image.globals[0].len();
    let (fake_image, fake_text) = instance(rng, b, inst.n, inst.regions, d);
    let want_i = oracle_loss(&fake_image, &inst.text, inst.gammas)[0];
    let want_t = oracle_loss(&inst.image, &fake_text, inst.gammas)[0];
    let mut g = Graph::new();
    let ri = encode_image(&mut g, &inst.image, inst.regions);
    let rt = encode_text(&mut g, &inst.text, inst.n);
    let fi = encode_image(&mut g, &fake_image, inst.regions);
    let ft = encode_text(&mut g, &fake_text, inst.n);
    let (li, lt) = assist_losses(&mut g, &ri, &rt, &fi, &ft, inst.gammas).expect("valid instance");
    (g.scalar_value(li) - want_i).abs().max((g.scalar_value(lt) - want_t).abs())
}

pub fn criterion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_m: f64 = 0.0;
    let mut worst_a: f64 = 0.0;
    for _ in 0..INSTANCES {
        worst_m = worst_m.max(matching_gap(&random_instance(&mut rng)));
        worst_a = worst_a.max(assist_gap(&mut rng));
    }
    let pass = worst_m <= TOL && worst_a <= TOL;
    Verdict::new(
        pass,
        format!("{INSTANCES} instances, max |diff| matching {worst_m:.2e}, assisting {worst_a:.2e}, tol {TOL:.0e}"),
    )
}
