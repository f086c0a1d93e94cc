//! Brute-force AP for small instances, written without reuse of the main
//! metric path. Every prefix of the ranking is re-matched from scratch and
//! the interpolated precision at each recall point is taken directly as the
//! maximum precision over prefixes reaching that recall, in exact rationals.

use std::collections::BTreeSet;

use num_rational::Ratio;
use thiserror::Error;

use crate::geometry::BBox;
use crate::parser::Detection;

pub const ORACLE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("oracle handles at most {ORACLE_MAX} predictions and {ORACLE_MAX} ground truths (got {preds} and {gts})")]
    TooLarge { preds: usize, gts: usize },
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.coords();
    let [bx1, by1, bx2, by2] = b.coords();
    let w = ax2.min(bx2) - ax1.max(bx1);
    let h = ay2.min(by2) - ay1.max(by1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// True-positive count when the first `k` ranked predictions are matched
/// greedily (highest IoU, lowest ground-truth index on ties).
fn true_positives_in_prefix(ranked: &[&BBox], gts: &[&BBox], k: usize, thresh: f64) -> i64 {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for pred in &ranked[..k] {
        let mut choice: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || overlap(pred, gt) < thresh {
                continue;
            }
            choice = match choice {
                Some(c) if overlap(pred, gts[c]) >= overlap(pred, gt) => Some(c),
                _ => Some(g),
            };
        }
        if let Some(c) = choice {
            used[c] = true;
            tp += 1;
        }
    }
    tp
}

fn label_ap(ranked: &[&BBox], gts: &[&BBox], thresh: f64) -> Ratio<i64> {
    let npos = gts.len() as i64;
    let points: Vec<(Ratio<i64>, Ratio<i64>)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives_in_prefix(ranked, gts, k, thresh);
            (Ratio::new(tp, npos), Ratio::new(tp, k as i64))
        })
        .collect();
    let mut total = Ratio::from_integer(0);
    for r in 0..=100i64 {
        let level = Ratio::new(r, 100);
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, prec)| *prec)
            .max();
        if let Some(p) = best {
            total += p;
        }
    }
    total / 101
}

/// Mean AP over labels with ground truth, or `None` when there is none.
pub fn brute_force_ap_oracle(
    preds: &[Detection],
    gts: &[(String, BBox)],
    iou_thresh: f64,
) -> Result<Option<f64>, OracleError> {
    if preds.len() > ORACLE_MAX || gts.len() > ORACLE_MAX {
        return Err(OracleError::TooLarge {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let labels: BTreeSet<&str> = gts.iter().map(|(l, _)| l.as_str()).collect();
    if labels.is_empty() {
        return Ok(None);
    }
    let mut by_rank: Vec<(usize, &Detection)> = preds.iter().enumerate().collect();
    by_rank.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut sum = Ratio::from_integer(0i64);
    for label in &labels {
        let ranked: Vec<&BBox> = by_rank
            .iter()
            .filter(|(_, d)| d.label == *label)
            .map(|(_, d)| &d.bbox)
            .collect();
        let label_gts: Vec<&BBox> = gts.iter().filter(|(l, _)| l == label).map(|(_, b)| b).collect();
        sum += label_ap(&ranked, &label_gts, iou_thresh);
    }
    let mean = sum / labels.len() as i64;
    Ok(Some(*mean.numer() as f64 / *mean.denom() as f64))
}
