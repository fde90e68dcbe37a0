//! Average precision by explicit threshold enumeration, and a sweep that
//! compares it with the library on small instances.

use asd_core::eval::{average_precision, ScoredLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// For every distinct score taken as a threshold, highest first, classify
/// `score >= threshold` as positive and add `ΔR · P`.
pub fn ap_by_thresholds(items: &[ScoredLabel]) -> f64 {
    let positives = items.iter().filter(|i| i.label).count() as f64;
    let mut thresholds: Vec<f64> = items.iter().map(|i| i.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let predicted: Vec<&ScoredLabel> = items.iter().filter(|i| i.score >= t).collect();
        let tp = predicted.iter().filter(|i| i.label).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / predicted.len() as f64);
        prev_recall = recall;
    }
    ap
}

#[derive(Debug)]
pub struct SweepReport {
    pub instances: usize,
    pub max_abs_error: f64,
}

fn labelled(scores: &[f64], pattern: u32) -> Vec<ScoredLabel> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredLabel::new(s, pattern >> i & 1 == 1))
        .collect()
}

/// Every score-level assignment and label pattern for up to four items
/// (which covers every way of tying them), then random scores drawn from a
/// few levels or a continuum for five to ten items under every label pattern.
pub fn sweep(seed: u64) -> SweepReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SweepReport {
        instances: 0,
        max_abs_error: 0.0,
    };
    let check = |items: &[ScoredLabel], report: &mut SweepReport| {
        let got = average_precision(items).expect("instance has a positive");
        report.max_abs_error = report.max_abs_error.max((got - ap_by_thresholds(items)).abs());
        report.instances += 1;
    };
    for n in 1..=4u32 {
        for code in 0..n.pow(n) {
            let scores: Vec<f64> = (0..n).map(|i| f64::from(code / n.pow(i) % n) / 4.0).collect();
            for pattern in 1..1u32 << n {
                check(&labelled(&scores, pattern), &mut report);
            }
        }
    }
    for n in 5..=10u32 {
        for pattern in 1..1u32 << n {
            let scores: Vec<f64> = if pattern % 2 == 0 {
                (0..n).map(|_| f64::from(rng.random_range(0..4u8)) / 4.0).collect()
            } else {
                (0..n).map(|_| rng.random::<f64>()).collect()
            };
            check(&labelled(&scores, pattern), &mut report);
        }
    }
    report
}
