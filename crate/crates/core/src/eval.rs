//! Average precision over the speaking class and precision-recall export.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::data::{AnnotationRecord, LabelMapping, PredictionRow};
use crate::error::{Error, Result};

const MAX_LISTED_KEYS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub score: f64,
    pub label: bool,
}

impl ScoredLabel {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredLabel { score, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative (true positives, predicted positives) at the end of each
/// group of equal scores, highest score first.
fn tie_groups(items: &[ScoredLabel]) -> Result<(usize, Vec<(f64, usize, usize)>)> {
    if let Some(bad) = items.iter().find(|i| !i.score.is_finite()) {
        return Err(Error::Input(format!("score {} is not finite", bad.score)));
    }
    let positives = items.iter().filter(|i| i.label).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "average precision needs a positive label among {} items",
            items.len()
        )));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    for (i, item) in sorted.iter().enumerate() {
        seen += 1;
        tp += usize::from(item.label);
        if sorted.get(i + 1).is_none_or(|next| next.score != item.score) {
            groups.push((item.score, tp, seen));
        }
    }
    Ok((positives, groups))
}

/// Non-interpolated step-wise AP; items sharing a score count as one step.
pub fn average_precision(items: &[ScoredLabel]) -> Result<f64> {
    let (positives, groups) = tie_groups(items)?;
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, seen) in groups {
        ap += (tp - prev_tp) as f64 / positives as f64 * (tp as f64 / seen as f64);
        prev_tp = tp;
    }
    Ok(ap)
}

/// One point per distinct score, preceded by the recall-0 point at an
/// infinite threshold with precision 1.
pub fn pr_curve(items: &[ScoredLabel]) -> Result<Vec<PrPoint>> {
    let (positives, groups) = tie_groups(items)?;
    let mut curve = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    curve.extend(groups.into_iter().map(|(score, tp, seen)| PrPoint {
        threshold: score,
        precision: tp as f64 / seen as f64,
        recall: tp as f64 / positives as f64,
    }));
    Ok(curve)
}

/// Step-wise area under a curve from [`pr_curve`].
pub fn curve_area(curve: &[PrPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * w[1].precision)
        .sum()
}

pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in curve {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall).expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub num_items: usize,
    pub num_positive: usize,
    pub num_negative: usize,
    pub items: Vec<ScoredLabel>,
}

impl std::fmt::Display for MapReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "mAP       {:.4}", self.map)?;
        writeln!(f, "items     {}", self.num_items)?;
        writeln!(f, "positive  {}", self.num_positive)?;
        write!(f, "negative  {}", self.num_negative)
    }
}

fn show_key((video, ms, entity): &(String, i64, String)) -> String {
    format!("({video}, {:.3}, {entity})", *ms as f64 / 1000.0)
}

/// Joins predictions to ground truth on (video, timestamp, entity) and pools
/// every row into one AP.
pub fn evaluate_predictions(
    gt: &[AnnotationRecord],
    preds: &[PredictionRow],
    mapping: LabelMapping,
) -> Result<MapReport> {
    let mut scores = HashMap::with_capacity(preds.len());
    for p in preds {
        let key = p.record.key();
        if scores.insert(key.clone(), p.score).is_some() {
            return Err(Error::Input(format!("duplicate prediction for {}", show_key(&key))));
        }
    }
    let mut seen = HashMap::with_capacity(gt.len());
    let mut missing = Vec::new();
    let mut missing_count = 0;
    let mut items = Vec::with_capacity(gt.len());
    for r in gt {
        let key = r.key();
        if seen.insert(key.clone(), ()).is_some() {
            return Err(Error::Input(format!("duplicate ground-truth row {}", show_key(&key))));
        }
        match scores.get(&key) {
            Some(&score) => items.push(ScoredLabel::new(score, mapping.is_positive(r.label))),
            None => {
                missing_count += 1;
                if missing.len() < MAX_LISTED_KEYS {
                    missing.push(show_key(&key));
                }
            }
        }
    }
    if missing_count > 0 {
        return Err(Error::Coverage {
            missing: missing_count,
            examples: missing.join(", "),
        });
    }
    if let Some(extra) = preds.iter().find(|p| !seen.contains_key(&p.record.key())) {
        return Err(Error::Input(format!(
            "prediction {} has no ground-truth row",
            show_key(&extra.record.key())
        )));
    }
    let map = average_precision(&items)?;
    let num_positive = items.iter().filter(|i| i.label).count();
    Ok(MapReport {
        map,
        num_items: items.len(),
        num_positive,
        num_negative: items.len() - num_positive,
        items,
    })
}
