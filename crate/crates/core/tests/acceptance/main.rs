//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,2,9` restricts the run to the listed criteria.

mod closed_forms;
mod gradients;
mod oracle;
mod stats;
mod training;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn selected() -> BTreeSet<u8> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

/// Runs `f`, turning a panic into a failing verdict.
fn guarded(f: impl FnOnce() -> Vec<(u8, Verdict)>, ids: &[u8]) -> Vec<(u8, Verdict)> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            ids.iter().map(|&i| (i, Verdict::new(false, format!("panicked: {msg}")))).collect()
        }
    }
}

fn main() {
    let want = selected();
    let mut results: Vec<(u8, Verdict)> = Vec::new();
    let mut run = |ids: &[u8], f: &dyn Fn(&BTreeSet<u8>) -> Vec<(u8, Verdict)>| {
        if ids.iter().any(|i| want.contains(i)) {
            let t0 = Instant::now();
            let out = guarded(|| f(&want), ids);
            for (i, v) in &out {
                println!(
                    "criterion {i}: {} ({}) [{:.1}s]",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail,
                    t0.elapsed().as_secs_f64()
                );
            }
            results.extend(out);
        }
    };
    run(&[1], &|_| vec![(1, gradients::criterion())]);
    run(&[2], &|_| vec![(2, oracle::criterion())]);
    run(&[3], &|_| vec![(3, closed_forms::criterion())]);
    run(&[9], &|_| vec![(9, stats::criterion())]);
    run(&[8], &|_| vec![(8, training::determinism())]);
    run(&[4, 5, 6, 7], &training::learning);

    results.sort_by_key(|(i, _)| *i);
    println!("\nacceptance summary");
    for (i, v) in &results {
        println!("criterion {i}: {}", if v.pass { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|(_, v)| !v.pass) {
        std::process::exit(1);
    }
}
