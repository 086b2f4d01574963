//! Criterion 9: the retrieval harness under a scorer that knows nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistext::metrics::{r_precision, RetrievalSpec};

use crate::Verdict;

const QUERIES: usize = 10_000;
const CANDIDATES: usize = 1_000;
const EXPECTED: f64 = 0.03;
const TOL: f64 = 0.005;

pub fn criterion() -> Verdict {
    let mut scorer = ChaCha8Rng::seed_from_u64(9);
    let spec = RetrievalSpec {
        pool: 100,
        top_k: 3,
        seed: 11,
    };
    let r = r_precision(QUERIES, CANDIDATES, |q| q % CANDIDATES, |_, _| scorer.random::<f64>(), spec)
        .expect("valid retrieval setup");
    Verdict::new(
        (r - EXPECTED).abs() <= TOL,
        format!("uniform-random scorer over {QUERIES} pooled queries: {r:.4} (expected {EXPECTED} +/- {TOL})"),
    )
}
