//! Criterion 3: loss values with closed forms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistext::itm::{Captioner, CaptionerConfig, TeacherBatch};
use vistext::text::RESERVED;
use vistext::tim::{discriminator_loss, generator_loss};
use vistext::vta::{batch_posterior_loss, word_match_score, Gammas};
use vistext::{Graph, ParamStore, Tensor};

use crate::Verdict;

const TOL: f64 = 1e-10;

fn mean_row(t: &Tensor) -> Vec<f64> {
    (0..t.cols()).map(|c| (0..t.rows()).map(|r| t.at(r, c)).sum::<f64>() / t.rows() as f64).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Largest deviation of each fixture family from its closed form.
fn fixtures() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gm = Gammas::default();
    let mut out = Vec::new();

    // Uniform scores: each direction is ln B.
    let mut worst: f64 = 0.0;
    for b in 1..=8 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[b, b], 0.37));
        let (it, ti) = batch_posterior_loss(&mut g, s, gm.g3).unwrap();
        let ln_b = (b as f64).ln();
        worst = worst.max((g.scalar_value(it) - ln_b).abs()).max((g.scalar_value(ti) - ln_b).abs());
    }
    out.push(("uniform batch loss = ln B", worst));

    // One word attends uniformly (its normalised match row is all ones), so
    // the score is the cosine between the word and the region mean.
    let mut worst_one: f64 = 0.0;
    let mut worst_eq: f64 = 0.0;
    for trial in 0..20 {
        let (m, d) = (1 + trial % 6, 2 + trial % 5);
        let r = Tensor::randn(&[m, d], 1.0, &mut rng);
        let w = Tensor::randn(&[1, d], 1.0, &mut rng);
        let c0 = cos(&mean_row(&r), w.row(0));
        let mut g = Graph::new();
        let (rv, wv) = (g.constant(r.clone()), g.constant(w.clone()));
        let s1 = word_match_score(&mut g, wv, rv, None, gm).unwrap();
        worst_one = worst_one.max((g.scalar_value(s1) - c0).abs());

        // N copies of the word share the cosine c0: score = c0 + ln N / g2.
        for n in 2..=5 {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| w.row(0).to_vec()).collect();
            let wn = g.constant(Tensor::from_rows(&rows).unwrap());
            let sn = word_match_score(&mut g, wn, rv, None, gm).unwrap();
            worst_eq = worst_eq.max((g.scalar_value(sn) - (c0 + (n as f64).ln() / gm.g2)).abs());
        }
    }
    out.push(("single-word score = cosine", worst_one));
    out.push(("equal-cosine score = c0 + ln N / g2", worst_eq));

    // Discriminator outputs of one half.
    let mut g = Graph::new();
    let half = g.constant(Tensor::full(&[4], 0.5));
    let lg = generator_loss(&mut g, half, half).unwrap();
    let ld = discriminator_loss(&mut g, half, half, half, half).unwrap();
    let ln2 = 2f64.ln();
    out.push(("generator loss at D = 1/2 is ln 2", (g.scalar_value(lg) - ln2).abs()));
    out.push(("discriminator loss at D = 1/2 is 2 ln 2", (g.scalar_value(ld) - 2.0 * ln2).abs()));

    // Zeroed output layer: uniform next-word distribution over V words.
    let vocab = 11;
    let cfg = CaptionerConfig {
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d: 8,
        ffn: 16,
        n_max: 6,
        vocab,
    };
    let mut store = ParamStore::new();
    let cap = Captioner::new(&mut store, "cap", cfg, &mut rng).unwrap();
    let w = cap.out.w;
    store.get_mut(w).value = Tensor::zeros(store.get(w).value.shape());
    if let Some(b) = cap.out.b {
        store.get_mut(b).value = Tensor::zeros(store.get(b).value.shape());
    }
    let mut worst_cap: f64 = 0.0;
    for words in 1..=6 {
        let caption: Vec<usize> = (0..words).map(|i| RESERVED + i % (vocab - RESERVED)).collect();
        let tb = TeacherBatch::new(&[caption], 6);
        let mut g = Graph::with_params(&store);
        let r = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let mem = cap.encode_regions(&mut g, r, 1, 5).unwrap();
        let l = cap.captioning_loss(&mut g, &mem, &tb).unwrap();
        // N predicted tokens: the words plus END.
        let n = (words + 1) as f64;
        worst_cap = worst_cap.max((g.scalar_value(l) - n * (vocab as f64).ln()).abs());
    }
    out.push(("uniform captioner loss = N ln V", worst_cap));
    out
}

pub fn criterion() -> Verdict {
    let f = fixtures();
    let worst = f.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let bad: Vec<String> = f
        .iter()
        .filter(|(_, e)| !(*e <= TOL))
        .map(|(n, e)| format!("{n}: {e:.2e}"))
        .collect();
    let detail = format!("{} fixture families, max |diff| {worst:.2e}, tol {TOL:.0e}", f.len());
    if bad.is_empty() {
        Verdict::new(true, detail)
    } else {
        Verdict::new(false, format!("{detail}; failing: {}", bad.join(", ")))
    }
}
