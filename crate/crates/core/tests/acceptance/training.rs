//! Criteria 4 to 8: training on the synthetic corpus. Phase-1 runs are
//! shared between the learning, similarity-map and ablation criteria.

use std::collections::BTreeSet;
use std::time::Instant;

use vistext::checkpoint::Checkpoint;
use vistext::config::RunConfig;
use vistext::data::{generate_corpus, Dataset, Split};
use vistext::eval::{caption_bleu, class_similarity_map, evaluate, retrieval, EvalReport};
use vistext::metrics::{corpus_bleu, dominant_rows, RetrievalSpec};
use vistext::model::{CAP, DISC, GEN, IMAGE, TEXT};
use vistext::trainer::{Ablation, Trainer};

use crate::Verdict;

const LEARNING_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PHASE1_BUDGET_SECS: f64 = 600.0;
const MIN_R_PRECISION: f64 = 0.50;
const MIN_AIMCOS_GAP: f64 = 0.10;
const MIN_DOMINANT_ROWS: usize = 10;
const ABLATION_MARGIN: f64 = 0.02;
const MIN_BLEU1: f64 = 0.50;
const MAP_IMAGES_PER_CLASS: usize = 10;
const DETERMINISM_STEPS: usize = 10;

fn config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg
}

fn spec(cfg: &RunConfig) -> RetrievalSpec {
    RetrievalSpec {
        pool: cfg.eval_pool,
        top_k: cfg.eval_top_k,
        seed: cfg.eval_seed,
    }
}

struct Phase1 {
    seed: u64,
    ck: Checkpoint,
    secs: f64,
    report: Option<EvalReport>,
    dominant: Option<usize>,
}

fn phase1(seed: u64, data: &Dataset, evaluate_it: bool) -> Phase1 {
    let cfg = config(seed);
    let mut t = Trainer::new(cfg.clone(), data).expect("trainer");
    let t0 = Instant::now();
    t.run_phase1().expect("phase 1");
    let secs = t0.elapsed().as_secs_f64();
    eprintln!("  seed {seed}: phase 1 in {secs:.0}s");
    let (report, dominant) = if evaluate_it {
        let test = data.split(Split::Test);
        let report = evaluate(&t.model, data, &test, spec(&cfg), cfg.gammas, false).expect("evaluation");
        let map = class_similarity_map(&t.model, data, &test, MAP_IMAGES_PER_CLASS).expect("similarity map");
        (Some(report), Some(dominant_rows(&map)))
    } else {
        (None, None)
    };
    Phase1 {
        seed,
        ck: t.checkpoint(1),
        secs,
        report,
        dominant,
    }
}

fn learning_verdict(runs: &[&Phase1]) -> Verdict {
    let n = runs.len() as f64;
    let r: Vec<f64> = runs.iter().map(|p| p.report.as_ref().expect("evaluated").retrieval.mean()).collect();
    let gap: Vec<f64> = runs
        .iter()
        .map(|p| {
            let rep = p.report.as_ref().expect("evaluated");
            rep.aimcos.score - rep.aimcos_permuted.score
        })
        .collect();
    let mean_r = r.iter().sum::<f64>() / n;
    let mean_gap = gap.iter().sum::<f64>() / n;
    let slowest = runs.iter().map(|p| p.secs).fold(0.0, f64::max);
    let pass = mean_r >= MIN_R_PRECISION && mean_gap >= MIN_AIMCOS_GAP && slowest <= PHASE1_BUDGET_SECS;
    Verdict::new(
        pass,
        format!(
            "seeds {:?}: top-3 R-precision mean {mean_r:.3} (per seed {}), AIMCoS gap mean {mean_gap:.3} (per seed {}), slowest phase 1 {slowest:.0}s",
            runs.iter().map(|p| p.seed).collect::<Vec<_>>(),
            fmt(&r),
            fmt(&gap)
        ),
    )
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn map_verdict(runs: &[&Phase1]) -> Verdict {
    let rows: Vec<usize> = runs.iter().map(|p| p.dominant.expect("evaluated")).collect();
    Verdict::new(
        rows.iter().all(|&r| r >= MIN_DOMINANT_ROWS),
        format!("dominant diagonal rows of 12 per seed {rows:?}, need >= {MIN_DOMINANT_ROWS} for every seed"),
    )
}

/// Phase 3 from a shared phase-2 checkpoint; returns test R-precision and
/// any module that changed although the ablation leaves it untouched.
fn ablation_run(cfg: &RunConfig, data: &Dataset, ck2: &Checkpoint, ab: Ablation) -> (f64, Vec<String>) {
    let (mut t, _) = Trainer::restore(cfg.clone(), data, ck2).expect("restore phase 2");
    let mut untouched: Vec<String> = Vec::new();
    if !ab.uses_generator() {
        untouched.extend([format!("{GEN}."), format!("{DISC}.")]);
    }
    if !ab.uses_captioner() {
        untouched.push(format!("{CAP}."));
    }
    untouched.extend((1..=cfg.phase3_frozen_blocks).map(|b| format!("{IMAGE}.conv{b}.")));
    let before: Vec<u64> = untouched.iter().map(|p| t.model.store.fingerprint(p)).collect();
    let text_before = t.model.store.fingerprint(&format!("{TEXT}."));
    t.run_phase3(ab).expect("phase 3");
    let mut changed: Vec<String> = untouched
        .iter()
        .zip(&before)
        .filter(|(p, f)| t.model.store.fingerprint(p) != **f)
        .map(|(p, _)| format!("{}:{p}", ab.name()))
        .collect();
    if t.model.store.fingerprint(&format!("{TEXT}.")) == text_before {
        changed.push(format!("{}:text encoder did not train", ab.name()));
    }
    let test = data.split(Split::Test);
    let r = retrieval(&t.model, data, &test, spec(cfg), cfg.gammas).expect("retrieval").mean();
    (r, changed)
}

struct Joint {
    full: Vec<f64>,
    baseline: Vec<f64>,
    violations: Vec<String>,
    bleu1: Option<f64>,
}

fn joint(runs: &[Phase1], data: &Dataset, ablations: bool) -> Joint {
    let test = data.split(Split::Test);
    let mut out = Joint {
        full: Vec::new(),
        baseline: Vec::new(),
        violations: Vec::new(),
        bleu1: None,
    };
    for p in runs {
        let cfg = config(p.seed);
        let (mut t, _) = Trainer::restore(cfg.clone(), data, &p.ck).expect("restore phase 1");
        let t0 = Instant::now();
        t.run_phase2().expect("phase 2");
        eprintln!("  seed {}: phase 2 in {:.0}s", p.seed, t0.elapsed().as_secs_f64());
        if out.bleu1.is_none() {
            out.bleu1 = Some(caption_bleu(&t.model, data, &test).expect("bleu")[0]);
        }
        if !ablations {
            break;
        }
        let ck2 = t.checkpoint(2);
        for ab in [Ablation::VtaTrainable, Ablation::Full, Ablation::Img2TxtOnly, Ablation::Txt2ImgOnly] {
            let (r, changed) = ablation_run(&cfg, data, &ck2, ab);
            out.violations.extend(changed.into_iter().map(|c| format!("seed {}: {c}", p.seed)));
            match ab {
                Ablation::VtaTrainable => out.baseline.push(r),
                Ablation::Full => out.full.push(r),
                _ => {}
            }
        }
        eprintln!(
            "  seed {}: vta-trainable {:.3}, full {:.3}",
            p.seed,
            out.baseline.last().copied().unwrap_or(f64::NAN),
            out.full.last().copied().unwrap_or(f64::NAN)
        );
    }
    out
}

fn ablation_verdict(j: &Joint) -> Verdict {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (full, base) = (mean(&j.full), mean(&j.baseline));
    let pass = full >= base - ABLATION_MARGIN && j.violations.is_empty();
    let mut detail = format!(
        "{} seeds: full {full:.3} (per seed {}), vta-trainable {base:.3} (per seed {}), allowed drop {ABLATION_MARGIN}; untouched modules bitwise unchanged: {}",
        j.full.len(),
        fmt(&j.full),
        fmt(&j.baseline),
        if j.violations.is_empty() { "yes" } else { "no" }
    );
    if !j.violations.is_empty() {
        detail.push_str(&format!(" ({})", j.violations.join(", ")));
    }
    Verdict::new(pass, detail)
}

fn bleu_verdict(bleu1: f64) -> Verdict {
    let cand = vec![vec!["a", "b", "c"]];
    let refs = vec![vec![vec!["a", "b", "d"]]];
    let fixture = corpus_bleu(&cand, &refs, 1).expect("fixture");
    let exact = fixture == 2.0 / 3.0;
    Verdict::new(
        bleu1 >= MIN_BLEU1 && exact,
        format!("test BLEU-1 {bleu1:.3} (need >= {MIN_BLEU1}); fixture BLEU-1 {fixture} exact 2/3: {exact}"),
    )
}

pub fn learning(want: &BTreeSet<u8>) -> Vec<(u8, Verdict)> {
    let base = RunConfig::desk();
    let corpus = generate_corpus(&base.corpus_spec()).expect("corpus");
    let data = Dataset::from_corpus(&corpus);
    let needs_eval = want.contains(&4) || want.contains(&6);
    let seeds: Vec<u64> = if want.contains(&5) {
        ABLATION_SEEDS.to_vec()
    } else if needs_eval {
        LEARNING_SEEDS.to_vec()
    } else {
        vec![LEARNING_SEEDS[0]]
    };
    let runs: Vec<Phase1> = seeds
        .iter()
        .map(|&s| phase1(s, &data, needs_eval && LEARNING_SEEDS.contains(&s)))
        .collect();
    let evaluated: Vec<&Phase1> = runs.iter().filter(|p| p.report.is_some()).collect();
    let mut out = Vec::new();
    if want.contains(&4) {
        out.push((4, learning_verdict(&evaluated)));
    }
    if want.contains(&5) || want.contains(&7) {
        let j = joint(&runs, &data, want.contains(&5));
        if want.contains(&5) {
            out.push((5, ablation_verdict(&j)));
        }
        if want.contains(&7) {
            out.push((7, bleu_verdict(j.bleu1.expect("captioner trained"))));
        }
    }
    if want.contains(&6) {
        out.push((6, map_verdict(&evaluated)));
    }
    out
}

/// Bit patterns of every logged loss value.
fn trace(t: &Trainer) -> Vec<(String, Vec<u64>)> {
    t.log
        .rows
        .iter()
        .map(|r| {
            let mut bits = vec![r.total.to_bits(), r.discriminator.to_bits()];
            bits.extend(r.parts.iter().map(|x| x.to_bits()));
            (format!("{}:{}:{}", r.phase, r.stage, r.step), bits)
        })
        .collect()
}

/// One short pass through every phase: traces, final report, checkpoint bytes.
fn short_pipeline(data: &Dataset) -> (Vec<(String, Vec<u64>)>, String, Vec<u8>) {
    let mut cfg = config(5);
    cfg.max_steps = DETERMINISM_STEPS;
    let mut t = Trainer::new(cfg.clone(), data).expect("trainer");
    t.run_phase1().expect("phase 1");
    t.run_phase2().expect("phase 2");
    t.run_phase3(Ablation::Full).expect("phase 3");
    let test = data.split(Split::Test);
    let report = evaluate(&t.model, data, &test, spec(&cfg), cfg.gammas, true).expect("evaluation");
    (trace(&t), report.to_text(), t.checkpoint(3).to_bytes().expect("serialise"))
}

pub fn determinism() -> Verdict {
    let mut cfg = RunConfig::desk();
    cfg.data_train = 64;
    let corpus = generate_corpus(&cfg.corpus_spec()).expect("corpus");
    let data = Dataset::from_corpus(&corpus);
    let (ta, ra, ca) = short_pipeline(&data);
    let (tb, rb, cb) = short_pipeline(&data);
    let stages: BTreeSet<&str> = ta.iter().map(|(k, _)| k.rsplit_once(':').map_or("", |x| x.0)).collect();
    let pass = ta == tb && ra == rb && ca == cb && !ta.is_empty();
    Verdict::new(
        pass,
        format!(
            "two runs of {} logged steps over {:?} (<= {DETERMINISM_STEPS} per stage): traces bitwise equal {}, reports equal {}, checkpoints equal {}",
            ta.len(),
            stages,
            ta == tb,
            ra == rb,
            ca == cb
        ),
    )
}
