use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::{Granularity, Instance};

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn det(label: &str, b: BBox, score: f64) -> Detection {
    Detection {
        bbox: b,
        label: label.to_string(),
        score,
    }
}

fn gt(label: &str, b: BBox) -> (String, BBox) {
    (label.to_string(), b)
}

#[test]
fn match_identity() {
    let b = bb(0.0, 0.0, 10.0, 10.0);
    let m = match_greedy(&[det("a", b, 1.0)], &[gt("a", b)], 0.5);
    assert_eq!(m.pairs, vec![MatchPair { pred: 0, gt: 0, iou: 1.0 }]);
    assert!(m.unmatched_preds.is_empty() && m.unmatched_gts.is_empty());
}

#[test]
fn duplicate_prediction_is_false_positive() {
    let b = bb(0.0, 0.0, 10.0, 10.0);
    let m = match_greedy(&[det("a", b, 1.0), det("a", b, 0.5)], &[gt("a", b)], 0.5);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!(m.unmatched_preds, vec![1]);
}

#[test]
fn match_prefers_highest_iou() {
    // IoUs: p0-g0 0.9, p0-g1 1.0, p1-g0 1.0, p1-g1 0.9
    let preds = [
        det("a", bb(0.0, 0.0, 10.0, 10.0), 0.9),
        det("a", bb(0.0, 0.0, 9.0, 10.0), 0.8),
    ];
    let gts = [gt("a", bb(0.0, 0.0, 9.0, 10.0)), gt("a", bb(0.0, 0.0, 10.0, 10.0))];
    let m = match_greedy(&preds, &gts, 0.5);
    assert_eq!(
        m.pairs,
        vec![
            MatchPair { pred: 0, gt: 1, iou: 1.0 },
            MatchPair { pred: 1, gt: 0, iou: 1.0 }
        ]
    );
}

#[test]
fn match_sorts_by_score_and_respects_labels() {
    let b = bb(0.0, 0.0, 10.0, 10.0);
    let preds = [det("a", b, 0.2), det("a", b, 0.9), det("b", b, 0.5)];
    let m = match_greedy(&preds, &[gt("a", b)], 0.5);
    assert_eq!(m.pairs[0].pred, 1);
    assert_eq!(m.unmatched_preds, vec![2, 0]);
}

#[test]
fn equal_iou_ties_go_to_lower_index() {
    let p = bb(5.0, 0.0, 15.0, 10.0);
    let gts = [gt("a", bb(0.0, 0.0, 10.0, 10.0)), gt("a", bb(10.0, 0.0, 20.0, 10.0))];
    // both IoUs are 1/3
    let m = match_greedy(&[det("a", p, 1.0)], &gts, 0.3);
    assert_eq!(m.pairs[0].gt, 0);
}

#[test]
fn precision_recall_examples() {
    let a = bb(0.0, 0.0, 10.0, 10.0);
    let b = bb(20.0, 0.0, 30.0, 10.0);
    let c = bb(40.0, 0.0, 50.0, 10.0);
    let pr = precision_recall(
        &[det("x", a, 0.9), det("x", b, 0.8), det("x", c, 0.7)],
        &[gt("x", a), gt("x", b)],
        0.5,
    );
    assert_eq!((pr.true_positives, pr.false_positives, pr.false_negatives), (2, 1, 0));
    assert!((pr.precision - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(pr.recall, 1.0);

    let pr = precision_recall(&[], &[], 0.5);
    assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
    assert!(!pr.degenerate_precision);

    let preds: Vec<Detection> = (0..4).map(|i| det("ghost", bb(i as f64, 0.0, i as f64 + 5.0, 5.0), 0.9)).collect();
    let pr = precision_recall(&preds, &[], 0.5);
    assert_eq!((pr.precision, pr.recall), (0.0, 1.0));

    let pr = precision_recall(&[], &[gt("x", a)], 0.5);
    assert_eq!((pr.precision, pr.recall), (1.0, 0.0));
    assert!(pr.degenerate_precision);
}

#[test]
fn exact_half_iou_is_a_detection_match() {
    let g = bb(0.0, 0.0, 10.0, 10.0);
    let p = bb(0.0, 0.0, 10.0, 5.0);
    assert_eq!(p.iou(&g), 0.5);
    let pr = precision_recall(&[det("a", p, 1.0)], &[gt("a", g)], DETECTION_IOU);
    assert_eq!(pr.true_positives, 1);
}

#[test]
fn ap_examples() {
    let g = bb(0.0, 0.0, 10.0, 10.0);
    let miss = bb(50.0, 50.0, 60.0, 60.0);
    assert_eq!(average_precision(&[det("a", g, 1.0)], &[gt("a", g)], 0.5), Some(1.0));
    let hit_miss = [det("a", g, 0.9), det("a", miss, 0.8)];
    assert_eq!(average_precision(&hit_miss, &[gt("a", g)], 0.5), Some(1.0));
    let miss_hit = [det("a", miss, 0.9), det("a", g, 0.8)];
    // envelope 0.5 at every recall point
    assert!((average_precision(&miss_hit, &[gt("a", g)], 0.5).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(average_precision(&[det("a", g, 1.0)], &[], 0.5), None);
    // no predictions at all
    assert_eq!(average_precision(&[], &[gt("a", g)], 0.5), Some(0.0));
}

#[test]
fn ap_hand_computed_partial_recall() {
    // two gts, ranking [hit, miss, hit]: precision envelope 1.0 up to recall
    // 0.5 (51 points) and 2/3 from 0.51 to 1.0 (50 points)
    let g1 = bb(0.0, 0.0, 10.0, 10.0);
    let g2 = bb(20.0, 0.0, 30.0, 10.0);
    let preds = [
        det("a", g1, 0.9),
        det("a", bb(50.0, 50.0, 60.0, 60.0), 0.8),
        det("a", g2, 0.7),
    ];
    let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    let got = average_precision(&preds, &[gt("a", g1), gt("a", g2)], 0.5).unwrap();
    assert!((got - expected).abs() < 1e-12);
    let oracle = brute_force_ap_oracle(&preds, &[gt("a", g1), gt("a", g2)], 0.5).unwrap().unwrap();
    assert!((oracle - expected).abs() < 1e-12);
}

#[test]
fn oracle_matches_examples_and_caps_size() {
    let g = bb(0.0, 0.0, 10.0, 10.0);
    let miss = bb(50.0, 50.0, 60.0, 60.0);
    for preds in [
        vec![det("a", g, 1.0)],
        vec![det("a", g, 0.9), det("a", miss, 0.8)],
        vec![det("a", miss, 0.9), det("a", g, 0.8)],
    ] {
        assert_eq!(
            brute_force_ap_oracle(&preds, &[gt("a", g)], 0.5).unwrap(),
            average_precision(&preds, &[gt("a", g)], 0.5)
        );
    }
    assert_eq!(brute_force_ap_oracle(&[det("a", g, 1.0)], &[], 0.5), Ok(None));
    let nine: Vec<Detection> = (0..9).map(|i| det("a", g, 1.0 - i as f64 * 0.01)).collect();
    assert!(matches!(
        brute_force_ap_oracle(&nine, &[gt("a", g)], 0.5),
        Err(OracleError::TooLarge { preds: 9, .. })
    ));
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<(String, BBox)>) {
    let labels = ["a", "b", "c"];
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.gen_range(0..40) as f64;
        let y = rng.gen_range(0..40) as f64;
        bb(x, y, x + rng.gen_range(1..20) as f64, y + rng.gen_range(1..20) as f64)
    };
    let ng = rng.gen_range(0..=8);
    let gts: Vec<(String, BBox)> = (0..ng)
        .map(|_| (labels[rng.gen_range(0..3)].to_string(), rand_box(rng)))
        .collect();
    let np = rng.gen_range(0..=8);
    let mut scores: Vec<f64> = (0..np).map(|i| (i + 1) as f64 / 10.0).collect();
    use rand::seq::SliceRandom;
    scores.shuffle(rng);
    let preds = (0..np)
        .map(|i| {
            let b = if !gts.is_empty() && rng.gen_bool(0.5) {
                let (l, g) = &gts[rng.gen_range(0..gts.len())];
                let jitter = rng.gen_range(0..3) as f64;
                let label = if rng.gen_bool(0.85) { l.clone() } else { labels[rng.gen_range(0..3)].to_string() };
                return det(&label, g.translate(jitter, 0.0).unwrap(), scores[i]);
            } else {
                rand_box(rng)
            };
            det(labels[rng.gen_range(0..3)], b, scores[i])
        })
        .collect();
    (preds, gts)
}

#[test]
fn oracle_agreement_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..2000 {
        let (preds, gts) = random_instance(&mut rng);
        let t = IOU_THRESHOLDS[rng.gen_range(0..IOU_THRESHOLDS.len())];
        let fast = average_precision(&preds, &gts, t);
        let slow = brute_force_ap_oracle(&preds, &gts, t).unwrap();
        match (fast, slow) {
            (Some(f), Some(s)) => assert!((f - s).abs() < 1e-9, "{f} vs {s}: {preds:?} {gts:?}"),
            (f, s) => assert_eq!(f, s),
        }
    }
}

#[test]
fn monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..2000 {
        let (preds, gts) = random_instance(&mut rng);
        if gts.is_empty() {
            continue;
        }
        let base = average_precision(&preds, &gts, 0.5).unwrap();

        // An exact copy of an unmatched ground truth, ranked first.
        let m = match_greedy(&preds, &gts, 0.5);
        if let Some(&g) = m.unmatched_gts.first() {
            let mut more = preds.clone();
            more.push(det(&gts[g].0, gts[g].1, 10.0));
            let with_tp = average_precision(&more, &gts, 0.5).unwrap();
            assert!(with_tp >= base - 1e-12, "{with_tp} < {base}");
        }

        // A false positive appended last leaves every earlier precision alone.
        let mut with_fp = preds.clone();
        with_fp.push(det(&gts[0].0, bb(900.0, 900.0, 910.0, 910.0), -1.0));
        assert!(average_precision(&with_fp, &gts, 0.5).unwrap() <= base + 1e-12);
    }
}

fn image(id: i64, instances: &[(i64, BBox)]) -> ImageAnnotation {
    ImageAnnotation {
        image_id: id,
        width: 1000.0,
        height: 1000.0,
        file_name: None,
        instances: instances
            .iter()
            .map(|&(category_id, bbox)| Instance { category_id, bbox })
            .collect(),
        source: "test".into(),
    }
}

fn perfect(anns: &[ImageAnnotation], vocab: &CategoryVocab) -> Vec<Vec<Detection>> {
    anns.iter()
        .map(|a| {
            a.instances
                .iter()
                .enumerate()
                .map(|(i, inst)| det(vocab.name_of(inst.category_id).unwrap(), inst.bbox, 1.0 - i as f64 * 0.01))
                .collect()
        })
        .collect()
}

#[test]
fn perfect_predictions_score_one() {
    let vocab = CategoryVocab::new([(1, "cat"), (2, "dog")]).unwrap();
    let anns = vec![
        image(1, &[(1, bb(0.0, 0.0, 100.0, 100.0)), (2, bb(200.0, 200.0, 210.0, 210.0))]),
        image(2, &[(2, bb(10.0, 10.0, 50.0, 80.0))]),
    ];
    let dets = perfect(&anns, &vocab);
    let r = evaluate_detections(&anns, &dets, &vocab, "gt", "repair");
    assert_eq!((r.precision, r.recall, r.map), (1.0, 1.0, Some(1.0)));
    assert_eq!(r.ap_small, Some(1.0));
    assert_eq!(r.true_positives + r.false_negatives, r.gt_instances);
    assert_eq!(r.ap_rare, None);
}

/// Two images, two categories, six boxes with controlled perturbations.
fn desk_fixture() -> (CategoryVocab, Vec<ImageAnnotation>, Vec<Vec<Detection>>) {
    let vocab = CategoryVocab::new([(1, "cat"), (2, "dog")]).unwrap();
    let anns = vec![
        image(1, &[(1, bb(0.0, 0.0, 100.0, 100.0)), (1, bb(150.0, 0.0, 250.0, 100.0)), (2, bb(300.0, 300.0, 400.0, 380.0))]),
        image(2, &[(1, bb(10.0, 10.0, 60.0, 60.0)), (2, bb(100.0, 100.0, 180.0, 200.0)), (2, bb(400.0, 10.0, 440.0, 90.0))]),
    ];
    let dets = vec![
        vec![
            det("cat", bb(0.0, 0.0, 100.0, 90.0), 0.95),
            det("cat", bb(160.0, 0.0, 250.0, 100.0), 0.7),
            det("dog", bb(300.0, 310.0, 390.0, 380.0), 0.9),
            det("dog", bb(600.0, 600.0, 650.0, 650.0), 0.4),
        ],
        vec![
            det("cat", bb(12.0, 10.0, 60.0, 58.0), 0.8),
            det("cat", bb(12.0, 10.0, 60.0, 58.0), 0.6),
            det("dog", bb(100.0, 120.0, 180.0, 200.0), 0.85),
            det("dog", bb(395.0, 10.0, 440.0, 80.0), 0.5),
        ],
    ];
    (vocab, anns, dets)
}

/// Places image 2 far to the right of image 1 so one oracle call can rank
/// both images' predictions together without cross-image overlap.
fn merged_for_oracle(
    anns: &[ImageAnnotation],
    vocab: &CategoryVocab,
    dets: &[Vec<Detection>],
) -> (Vec<Detection>, Vec<(String, BBox)>) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (k, (a, d)) in anns.iter().zip(dets).enumerate() {
        let dx = 5000.0 * k as f64;
        for i in &a.instances {
            gts.push(gt(vocab.name_of(i.category_id).unwrap(), i.bbox.translate(dx, 0.0).unwrap()));
        }
        for p in d {
            preds.push(det(&p.label, p.bbox.translate(dx, 0.0).unwrap(), p.score));
        }
    }
    (preds, gts)
}

#[test]
fn desk_fixture_matches_oracle() {
    let (vocab, anns, dets) = desk_fixture();
    let cm = coco_map(&dets, &anns, &vocab);
    let (preds, gts) = merged_for_oracle(&anns, &vocab, &dets);
    let per_t: Vec<f64> = IOU_THRESHOLDS
        .iter()
        .map(|&t| brute_force_ap_oracle(&preds, &gts, t).unwrap().unwrap())
        .collect();
    let oracle_map = per_t.iter().sum::<f64>() / per_t.len() as f64;
    assert!((cm.map.unwrap() - oracle_map).abs() < 1e-9, "{:?} vs {oracle_map}", cm.map);
    assert!((cm.ap50.unwrap() - per_t[0]).abs() < 1e-9);
    assert!(cm.map.unwrap() < 1.0 && cm.map.unwrap() > 0.0);
}

#[test]
fn single_threshold_single_category_reduces_to_ap() {
    let (vocab, anns, dets) = desk_fixture();
    let cm = coco_map(&dets, &anns, &vocab);
    let (preds, gts) = merged_for_oracle(&anns, &vocab, &dets);
    let cat_preds: Vec<Detection> = preds.iter().filter(|d| d.label == "cat").cloned().collect();
    let cat_gts: Vec<(String, BBox)> = gts.iter().filter(|g| g.0 == "cat").cloned().collect();
    let ap = average_precision(&cat_preds, &cat_gts, 0.5).unwrap();
    let cat = cm.per_category.iter().find(|c| c.name == "cat").unwrap();
    assert!((cat.ap50.unwrap() - ap).abs() < 1e-12);
}

#[test]
fn all_small_fixture_ap_small_equals_map() {
    let vocab = CategoryVocab::new([(1, "cat"), (2, "dog")]).unwrap();
    // every gt is 30 x 30 = 900
    let anns = vec![
        image(1, &[(1, bb(0.0, 0.0, 30.0, 30.0)), (2, bb(100.0, 100.0, 130.0, 130.0))]),
        image(2, &[(1, bb(50.0, 50.0, 80.0, 80.0))]),
    ];
    let dets = vec![
        vec![det("cat", bb(1.0, 0.0, 30.0, 30.0), 0.9), det("dog", bb(105.0, 100.0, 130.0, 130.0), 0.8)],
        vec![det("cat", bb(52.0, 52.0, 80.0, 80.0), 0.7), det("cat", bb(300.0, 300.0, 330.0, 330.0), 0.6)],
    ];
    let cm = coco_map(&dets, &anns, &vocab);
    assert!((cm.ap_small.unwrap() - cm.map.unwrap()).abs() < 1e-15);
}

#[test]
fn ap_small_ignores_large_objects() {
    let vocab = CategoryVocab::new([(1, "cat")]).unwrap();
    let anns = vec![image(1, &[(1, bb(0.0, 0.0, 20.0, 20.0)), (1, bb(100.0, 100.0, 300.0, 300.0))])];
    // the large gt is found, the small one missed; a large false positive is ignored
    let dets = vec![vec![
        det("cat", bb(100.0, 100.0, 300.0, 300.0), 0.9),
        det("cat", bb(500.0, 500.0, 700.0, 700.0), 0.8),
    ]];
    let cm = coco_map(&dets, &anns, &vocab);
    assert_eq!(cm.ap_small, Some(0.0));
    let cat = &cm.per_category[0];
    assert_eq!(cat.gt_count, 2);
    // an unmatched small prediction is a false positive for AP_small
    let dets = vec![vec![det("cat", bb(400.0, 400.0, 410.0, 410.0), 0.95), det("cat", bb(0.0, 0.0, 20.0, 20.0), 0.9)]];
    let cm = coco_map(&dets, &anns, &vocab);
    assert!((cm.ap_small.unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn unknown_labels_are_counted() {
    let vocab = CategoryVocab::new([(1, "cat")]).unwrap();
    let anns = vec![image(1, &[(1, bb(0.0, 0.0, 20.0, 20.0))])];
    let dets = vec![vec![det("puppy", bb(0.0, 0.0, 20.0, 20.0), 0.9)]];
    let r = evaluate_detections(&anns, &dets, &vocab, "full", "lenient");
    assert_eq!(r.vocab_mismatches, 1);
    assert_eq!(r.false_positives, 1);
    assert_eq!(r.map, Some(0.0));
}

#[test]
fn symmetric_under_image_and_id_permutation() {
    let (vocab, anns, dets) = desk_fixture();
    let base = evaluate_detections(&anns, &dets, &vocab, "gt", "lenient");

    let rev_anns: Vec<ImageAnnotation> = anns.iter().rev().cloned().collect();
    let rev_dets: Vec<Vec<Detection>> = dets.iter().rev().cloned().collect();
    let rev = evaluate_detections(&rev_anns, &rev_dets, &vocab, "gt", "lenient");
    assert_eq!(base, rev);

    // swap category ids 1 <-> 2
    let swapped_vocab = CategoryVocab::new([(2, "cat"), (1, "dog")]).unwrap();
    let swapped: Vec<ImageAnnotation> = anns
        .iter()
        .map(|a| {
            let mut a = a.clone();
            for i in &mut a.instances {
                i.category_id = 3 - i.category_id;
            }
            a
        })
        .collect();
    let sw = evaluate_detections(&swapped, &dets, &swapped_vocab, "gt", "lenient");
    assert_eq!(base.map, sw.map);
    assert_eq!(base.ap_small, sw.ap_small);
    assert_eq!((base.precision, base.recall), (sw.precision, sw.recall));
    let mut a: Vec<_> = base.per_category.iter().map(|c| (c.name.clone(), c.ap)).collect();
    let mut b: Vec<_> = sw.per_category.iter().map(|c| (c.name.clone(), c.ap)).collect();
    a.sort_by(|x, y| x.0.cmp(&y.0));
    b.sort_by(|x, y| x.0.cmp(&y.0));
    assert_eq!(a, b);
}

#[test]
fn pr_identities_hold() {
    let (vocab, anns, dets) = desk_fixture();
    let r = evaluate_detections(&anns, &dets, &vocab, "gt", "lenient");
    assert_eq!(r.true_positives + r.false_negatives, r.gt_instances);
    assert_eq!(r.true_positives + r.false_positives, dets.iter().map(Vec::len).sum::<usize>());
}

fn cat(name: &str, band: Band, ap: Option<f64>) -> CategoryAp {
    CategoryAp {
        id: 0,
        name: name.into(),
        band,
        gt_count: 1,
        ap,
        ap50: ap,
        ap_small: None,
    }
}

#[test]
fn band_means() {
    let one = lvis_breakdown(&[cat("x", Band::Rare, Some(0.4))]);
    assert_eq!(one.rare, Some(0.4));
    let b = lvis_breakdown(&[
        cat("a", Band::Rare, Some(0.2)),
        cat("b", Band::Rare, Some(0.4)),
        cat("c", Band::Frequent, Some(0.9)),
    ]);
    assert!((b.rare.unwrap() - 0.3).abs() < 1e-15);
    assert_eq!(b.common, None);
    assert_eq!(b.frequent, Some(0.9));
    let none = lvis_breakdown(&[cat("a", Band::Unknown, Some(0.5))]);
    assert_eq!(none, BandAps::default());
    // categories without ground truth do not pull the mean down
    let skip = lvis_breakdown(&[cat("a", Band::Rare, None), cat("b", Band::Rare, Some(0.6))]);
    assert_eq!(skip.rare, Some(0.6));
}

fn expr(target: BBox) -> RefExpression {
    RefExpression {
        image_id: 1,
        expression: "x".into(),
        target,
        granularity: Granularity::Phrase,
        image_size: None,
    }
}

#[test]
fn rec_accuracy_examples() {
    let t = bb(0.0, 0.0, 10.0, 10.0);
    assert_eq!(rec_accuracy(&[vec![det("x", t, 1.0)]], &[expr(t)]), Some(1.0));
    let half = bb(0.0, 0.0, 10.0, 5.0);
    assert_eq!(rec_accuracy(&[vec![det("x", half, 1.0)]], &[expr(t)]), Some(0.0));

    let exprs: Vec<RefExpression> = (0..10).map(|_| expr(t)).collect();
    let mut preds: Vec<Vec<Detection>> = Vec::new();
    for _ in 0..7 {
        preds.push(vec![det("x", bb(0.0, 0.0, 10.0, 9.0), 1.0)]);
    }
    preds.push(vec![]);
    for _ in 0..2 {
        preds.push(vec![det("x", bb(0.0, 0.0, 10.0, 2.0), 1.0)]);
    }
    assert!((rec_accuracy(&preds, &exprs).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(rec_accuracy(&[], &[]), None);
}

#[test]
fn rec_keeps_highest_scored_box() {
    let t = bb(0.0, 0.0, 10.0, 10.0);
    let far = bb(50.0, 50.0, 60.0, 60.0);
    let preds = vec![vec![det("x", far, 0.9), det("x", t, 0.5)]];
    assert_eq!(rec_accuracy(&preds, &[expr(t)]), Some(0.0));
}

#[test]
fn table_layout() {
    let vocab = CategoryVocab::new([(1, "cat")]).unwrap();
    let anns = vec![image(1, &[(1, bb(0.0, 0.0, 20.0, 20.0))])];
    let dets = perfect(&anns, &vocab);
    let r = evaluate_detections(&anns, &dets, &vocab, "gt", "repair");
    let t = r.table();
    let lines: Vec<&str> = t.lines().collect();
    let head: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(head, vec!["Setting", "Policy", "P@0.5", "R@0.5", "mAP"]);
    let row: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(row, vec!["gt", "repair", "100.0", "100.0", "100.0"]);
}
