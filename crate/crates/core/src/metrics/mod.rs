//! Detection and grounding metrics.
//!
//! Matching is one-to-one, same-label, greedy in descending score order. AP
//! follows the COCO protocol: monotone precision envelope sampled at 101
//! recall points, averaged over IoU thresholds 0.50:0.05:0.95 and over
//! categories that have at least one ground-truth instance.

pub mod oracle;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Band, CategoryVocab, ImageAnnotation, RefExpression};
use crate::geometry::BBox;
use crate::parser::Detection;

pub use oracle::{brute_force_ap_oracle, OracleError};

/// 0.50, 0.55, …, 0.95, each the correctly rounded value of k/100.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub const RECALL_POINTS: usize = 101;

/// Detection matching threshold (inclusive).
pub const DETECTION_IOU: f64 = 0.5;

/// Referring-expression threshold (strict).
pub const REC_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Prediction indices by descending score, stable on ties.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Core greedy assignment. `ignore[g]` marks ground truths that may absorb a
/// prediction only when no regular ground truth qualifies.
fn assign(
    preds: &[Detection],
    order: &[usize],
    gts: &[(String, BBox)],
    ignore: &[bool],
    thresh: f64,
    ious: &dyn Fn(usize, usize) -> f64,
) -> Vec<Option<(usize, f64)>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for &p in order {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, (label, _)) in gts.iter().enumerate() {
                if taken[g] || ignore[g] != pass_ignored || *label != preds[p].label {
                    continue;
                }
                let v = ious(p, g);
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if best.is_some() {
                break;
            }
        }
        if let Some((g, v)) = best {
            taken[g] = true;
            out[p] = Some((g, v));
        }
    }
    out
}

pub fn match_greedy(preds: &[Detection], gts: &[(String, BBox)], iou_thresh: f64) -> Matching {
    let order = score_order(preds);
    let ignore = vec![false; gts.len()];
    let assigned = assign(preds, &order, gts, &ignore, iou_thresh, &|p, g| {
        preds[p].bbox.iou(&gts[g].1)
    });
    let mut m = Matching::default();
    let mut gt_used = vec![false; gts.len()];
    for &p in &order {
        match assigned[p] {
            Some((g, iou)) => {
                gt_used[g] = true;
                m.pairs.push(MatchPair { pred: p, gt: g, iou });
            }
            None => m.unmatched_preds.push(p),
        }
    }
    m.unmatched_gts = (0..gts.len()).filter(|&g| !gt_used[g]).collect();
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Zero predictions against a non-empty ground truth: precision is
    /// reported as 1.0 and this flag is set.
    pub degenerate_precision: bool,
}

impl PrecisionRecall {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let degenerate_precision = tp + fp == 0 && fn_ > 0;
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        PrecisionRecall {
            precision,
            recall,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            degenerate_precision,
        }
    }
}

pub fn precision_recall(preds: &[Detection], gts: &[(String, BBox)], iou_thresh: f64) -> PrecisionRecall {
    let m = match_greedy(preds, gts, iou_thresh);
    PrecisionRecall::from_counts(m.pairs.len(), m.unmatched_preds.len(), m.unmatched_gts.len())
}

/// 101-point interpolated AP from a ranked TP/FP sequence.
pub(crate) fn interpolated_ap(ranked_tp: &[bool], npos: usize) -> f64 {
    debug_assert!(npos > 0);
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP of one image's predictions: mean over labels with at least one ground
/// truth, labels visited in sorted order. `None` without ground truth.
pub fn average_precision(preds: &[Detection], gts: &[(String, BBox)], iou_thresh: f64) -> Option<f64> {
    let mut labels: Vec<&str> = gts.iter().map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return None;
    }
    let m = match_greedy(preds, gts, iou_thresh);
    let hit: HashMap<usize, ()> = m.pairs.iter().map(|p| (p.pred, ())).collect();
    let order = score_order(preds);
    let total: f64 = labels
        .iter()
        .map(|&label| {
            let npos = gts.iter().filter(|(l, _)| l == label).count();
            let ranked: Vec<bool> = order
                .iter()
                .filter(|&&p| preds[p].label == label)
                .map(|p| hit.contains_key(p))
                .collect();
            interpolated_ap(&ranked, npos)
        })
        .sum();
    Some(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Hit,
    Miss,
    Ignored,
}

/// Per-image, per-label matching outcomes for every threshold and area range.
struct LabelOutcomes {
    label: String,
    image_id: i64,
    /// (score, detection index within the image) for the label's predictions.
    dets: Vec<(f64, usize)>,
    /// `[range][threshold][det]`, range 0 = all, 1 = small.
    outcome: [Vec<Vec<Outcome>>; 2],
    npos: [usize; 2],
}

fn outcomes_for_image(ann: &ImageAnnotation, vocab: &CategoryVocab, dets: &[Detection]) -> Vec<LabelOutcomes> {
    let mut labels: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let gts: Vec<(String, BBox)> = ann
        .instances
        .iter()
        .filter_map(|i| vocab.name_of(i.category_id).map(|n| (n.to_string(), i.bbox)))
        .collect();
    for (g, (l, _)) in gts.iter().enumerate() {
        labels.entry(l.as_str()).or_default().1.push(g);
    }
    for (d, det) in dets.iter().enumerate() {
        if vocab.by_name(&det.label).is_some() {
            labels.entry(det.label.as_str()).or_default().0.push(d);
        }
    }

    labels
        .into_iter()
        .map(|(label, (det_idx, gt_idx))| {
            let local_preds: Vec<Detection> = det_idx.iter().map(|&d| dets[d].clone()).collect();
            let local_gts: Vec<(String, BBox)> = gt_idx.iter().map(|&g| gts[g].clone()).collect();
            let order = score_order(&local_preds);
            let iou_table: Vec<Vec<f64>> = local_preds
                .iter()
                .map(|p| local_gts.iter().map(|(_, g)| p.bbox.iou(g)).collect())
                .collect();
            let ious = |p: usize, g: usize| iou_table[p][g];

            let no_ignore = vec![false; local_gts.len()];
            let not_small: Vec<bool> = local_gts.iter().map(|(_, g)| !g.is_small()).collect();
            let mut outcome: [Vec<Vec<Outcome>>; 2] = [Vec::new(), Vec::new()];
            for (range, ignore) in [&no_ignore, &not_small].into_iter().enumerate() {
                for &t in &IOU_THRESHOLDS {
                    let assigned = assign(&local_preds, &order, &local_gts, ignore, t, &ious);
                    let row = assigned
                        .iter()
                        .enumerate()
                        .map(|(p, a)| match a {
                            Some((g, _)) if ignore[*g] => Outcome::Ignored,
                            Some(_) => Outcome::Hit,
                            None if range == 1 && !local_preds[p].bbox.is_small() => Outcome::Ignored,
                            None => Outcome::Miss,
                        })
                        .collect();
                    outcome[range].push(row);
                }
            }
            LabelOutcomes {
                label: label.to_string(),
                image_id: ann.image_id,
                dets: det_idx
                    .iter()
                    .enumerate()
                    .map(|(local, &d)| (local_preds[local].score, d))
                    .collect(),
                outcome,
                npos: [local_gts.len(), not_small.iter().filter(|&&x| !x).count()],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub id: i64,
    pub name: String,
    pub band: Band,
    pub gt_count: usize,
    /// Mean over 0.50:0.95; absent when the category has no ground truth.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoMap {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    /// Detections whose label is not in the vocabulary.
    pub vocab_mismatches: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// COCO-protocol mAP, AP50 and AP_small over a corpus. `detections[i]`
/// belongs to `anns[i]`.
pub fn coco_map(detections: &[Vec<Detection>], anns: &[ImageAnnotation], vocab: &CategoryVocab) -> CocoMap {
    assert_eq!(detections.len(), anns.len(), "one detection list per image");
    let per_image: Vec<Vec<LabelOutcomes>> = anns
        .par_iter()
        .zip(detections.par_iter())
        .map(|(ann, dets)| outcomes_for_image(ann, vocab, dets))
        .collect();
    let vocab_mismatches = detections
        .iter()
        .flatten()
        .filter(|d| vocab.by_name(&d.label).is_none())
        .count();

    let mut by_label: HashMap<String, Vec<LabelOutcomes>> = HashMap::new();
    for lo in per_image.into_iter().flatten() {
        by_label.entry(lo.label.clone()).or_default().push(lo);
    }

    let ap_for = |entries: &[LabelOutcomes], range: usize, t: usize| -> Option<f64> {
        let npos: usize = entries.iter().map(|e| e.npos[range]).sum();
        if npos == 0 {
            return None;
        }
        let mut ranked: Vec<(f64, i64, usize, bool)> = Vec::new();
        for e in entries {
            for (k, &(score, d)) in e.dets.iter().enumerate() {
                match e.outcome[range][t][k] {
                    Outcome::Ignored => {}
                    o => ranked.push((score, e.image_id, d, o == Outcome::Hit)),
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        Some(interpolated_ap(&flags, npos))
    };

    let per_category: Vec<CategoryAp> = vocab
        .iter()
        .map(|cat| {
            let entries = by_label.get(&cat.name).map(Vec::as_slice).unwrap_or(&[]);
            let gt_count = entries.iter().map(|e| e.npos[0]).sum();
            let over_thresholds = |range: usize| -> Option<f64> {
                let aps: Option<Vec<f64>> = (0..IOU_THRESHOLDS.len()).map(|t| ap_for(entries, range, t)).collect();
                aps.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            };
            CategoryAp {
                id: cat.id,
                name: cat.name.clone(),
                band: cat.band,
                gt_count,
                ap: over_thresholds(0),
                ap50: ap_for(entries, 0, 0),
                ap_small: over_thresholds(1),
            }
        })
        .collect();

    // Average in name order so relabeling category ids cannot change the sum.
    let mut by_name: Vec<&CategoryAp> = per_category.iter().collect();
    by_name.sort_by(|a, b| a.name.cmp(&b.name));
    CocoMap {
        map: mean(by_name.iter().filter_map(|c| c.ap)),
        ap50: mean(by_name.iter().filter_map(|c| c.ap50)),
        ap_small: mean(by_name.iter().filter_map(|c| c.ap_small)),
        per_category,
        vocab_mismatches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandAps {
    pub rare: Option<f64>,
    pub common: Option<f64>,
    pub frequent: Option<f64>,
}

/// Mean AP within each frequency band; bands with no scored category are absent.
pub fn lvis_breakdown(per_category: &[CategoryAp]) -> BandAps {
    let mut sorted: Vec<&CategoryAp> = per_category.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let band_mean = |band: Band| mean(sorted.iter().filter(|c| c.band == band).filter_map(|c| c.ap));
    BandAps {
        rare: band_mean(Band::Rare),
        common: band_mean(Band::Common),
        frequent: band_mean(Band::Frequent),
    }
}

/// Highest-scoring detection (first on ties).
pub fn top_detection(dets: &[Detection]) -> Option<&Detection> {
    dets.iter()
        .fold(None, |best: Option<&Detection>, d| match best {
            Some(b) if b.score >= d.score => Some(b),
            _ => Some(d),
        })
}

/// Fraction of expressions whose top prediction has IoU strictly above 0.5.
/// Missing predictions count as incorrect. `None` for an empty expression set.
pub fn rec_accuracy(predictions: &[Vec<Detection>], expressions: &[RefExpression]) -> Option<f64> {
    if expressions.is_empty() {
        return None;
    }
    let correct = expressions
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            predictions
                .get(*i)
                .and_then(|d| top_detection(d))
                .is_some_and(|d| d.bbox.iou(&e.target) > REC_IOU)
        })
        .count();
    Some(correct as f64 / expressions.len() as f64)
}

/// Corpus-level report for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub policy: String,
    pub images: usize,
    pub failed_images: usize,
    pub gt_instances: usize,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision_degenerate: bool,
    /// Images with no predictions but some ground truth.
    pub degenerate_images: usize,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_rare: Option<f64>,
    pub ap_common: Option<f64>,
    pub ap_frequent: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    pub vocab_mismatches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_accuracy: Option<f64>,
    #[serde(default)]
    pub rec_expressions: usize,
}

/// Per-image counts, combined with an associative and commutative fold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub degenerate_images: usize,
}

impl Counts {
    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            degenerate_images: self.degenerate_images + o.degenerate_images,
        }
    }
}

pub fn image_counts(ann: &ImageAnnotation, vocab: &CategoryVocab, dets: &[Detection]) -> Counts {
    let gts: Vec<(String, BBox)> = ann
        .instances
        .iter()
        .filter_map(|i| vocab.name_of(i.category_id).map(|n| (n.to_string(), i.bbox)))
        .collect();
    let pr = precision_recall(dets, &gts, DETECTION_IOU);
    Counts {
        tp: pr.true_positives,
        fp: pr.false_positives,
        fn_: pr.false_negatives,
        degenerate_images: pr.degenerate_precision as usize,
    }
}

/// Micro-averaged P/R at 0.5 plus COCO mAP, AP_small and band APs.
pub fn evaluate_detections(
    anns: &[ImageAnnotation],
    detections: &[Vec<Detection>],
    vocab: &CategoryVocab,
    setting: &str,
    policy: &str,
) -> EvalReport {
    let counts = anns
        .par_iter()
        .zip(detections.par_iter())
        .map(|(a, d)| image_counts(a, vocab, d))
        .reduce(Counts::default, Counts::merge);
    let pr = PrecisionRecall::from_counts(counts.tp, counts.fp, counts.fn_);
    let cm = coco_map(detections, anns, vocab);
    let bands = lvis_breakdown(&cm.per_category);
    EvalReport {
        setting: setting.to_string(),
        policy: policy.to_string(),
        images: anns.len(),
        failed_images: 0,
        gt_instances: anns.iter().map(|a| a.instances.len()).sum(),
        precision: pr.precision,
        recall: pr.recall,
        true_positives: counts.tp,
        false_positives: counts.fp,
        false_negatives: counts.fn_,
        precision_degenerate: pr.degenerate_precision,
        degenerate_images: counts.degenerate_images,
        map: cm.map,
        ap50: cm.ap50,
        ap_small: cm.ap_small,
        ap_rare: bands.rare,
        ap_common: bands.common,
        ap_frequent: bands.frequent,
        per_category: cm.per_category,
        vocab_mismatches: cm.vocab_mismatches,
        rec_accuracy: None,
        rec_expressions: 0,
    }
}

pub fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", x * 100.0)).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn has_bands(&self) -> bool {
        self.ap_rare.is_some() || self.ap_common.is_some() || self.ap_frequent.is_some()
    }

    /// Header and row for a detection table: P@0.5, R@0.5, mAP, then AP-R/C/F
    /// when bands exist. Values in percent with one decimal.
    pub fn table_columns(&self, bands: bool) -> (Vec<&'static str>, Vec<String>) {
        let mut head = vec!["P@0.5", "R@0.5", "mAP"];
        let mut row = vec![pct(Some(self.precision)), pct(Some(self.recall)), pct(self.map)];
        if bands {
            head.extend(["AP-R", "AP-C", "AP-F"]);
            row.extend([pct(self.ap_rare), pct(self.ap_common), pct(self.ap_frequent)]);
        }
        (head, row)
    }

    pub fn table(&self) -> String {
        render_table(std::slice::from_ref(self))
    }
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    // Expression-only reports carry no detection row.
    let det: Vec<&EvalReport> = reports.iter().filter(|r| r.images > 0 || r.rec_accuracy.is_none()).collect();
    let rec: Vec<&EvalReport> = reports.iter().filter(|r| r.rec_accuracy.is_some()).collect();
    let bands = det.iter().any(|r| r.has_bands());
    let mut blocks = Vec::new();
    if let Some(first) = det.first() {
        let mut head = vec!["Setting".to_string(), "Policy".to_string()];
        head.extend(first.table_columns(bands).0.iter().map(|s| s.to_string()));
        let mut rows = vec![head];
        for r in &det {
            let mut row = vec![r.setting.clone(), r.policy.clone()];
            row.extend(r.table_columns(bands).1);
            rows.push(row);
        }
        blocks.push(align_table(&rows));
    }
    if !rec.is_empty() {
        let mut rows = vec![vec!["Setting".into(), "Policy".into(), "Expressions".into(), "Acc@0.5".into()]];
        for r in &rec {
            rows.push(vec![
                r.setting.clone(),
                r.policy.clone(),
                r.rec_expressions.to_string(),
                pct(r.rec_accuracy),
            ]);
        }
        blocks.push(align_table(&rows));
    }
    blocks.join("\n")
}

/// Two left-aligned label columns, the rest right-aligned; two-space gutters.
pub fn align_table(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
