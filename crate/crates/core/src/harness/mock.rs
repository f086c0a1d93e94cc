//! Deterministic stand-in for a vision-language model. Starts from the
//! ground-truth answer and injects the typical failure modes: missed small
//! objects, coordinate noise, repeated boxes and boxes for absent classes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{CategoryVocab, ImageAnnotation};
use crate::geometry::BBox;
use crate::prompt::{
    canonical_boxes, image_rng, labeled_instances, quantize_box, render_grounding, render_with_counts, PromptSpec,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FaultError {
    #[error("{name} must lie in [0, 1], got {value}")]
    Rate { name: &'static str, value: f64 },
    #[error("jitter must be finite and non-negative, got {0}")]
    Jitter(f64),
    #[error("duplicate multiplicity must be at least 1")]
    Multiplicity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    /// Probability that a surviving box is re-emitted.
    pub dup_rate: f64,
    /// Extra copies per duplicated box are drawn from `1..=dup_max`.
    pub dup_max: u32,
    /// Per negative prompt category, probability of emitting a box for it.
    pub hallucination_rate: f64,
    /// Drop probability for small boxes; larger boxes use a quarter of it.
    pub small_miss: f64,
    /// Uniform coordinate noise in pixels.
    pub jitter: f64,
    pub seed: u64,
    /// Counts describe the emitted boxes, faults included.
    #[serde(default)]
    pub corrupt_counts: bool,
}

impl FaultProfile {
    pub fn clean(seed: u64) -> Self {
        FaultProfile {
            dup_rate: 0.0,
            dup_max: 1,
            hallucination_rate: 0.0,
            small_miss: 0.0,
            jitter: 0.0,
            seed,
            corrupt_counts: false,
        }
    }

    pub fn validate(&self) -> Result<(), FaultError> {
        for (name, value) in [
            ("duplication rate", self.dup_rate),
            ("hallucination rate", self.hallucination_rate),
            ("small-object miss rate", self.small_miss),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(FaultError::Rate { name, value });
            }
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(FaultError::Jitter(self.jitter));
        }
        if self.dup_max == 0 {
            return Err(FaultError::Multiplicity);
        }
        Ok(())
    }
}

/// Per-image bookkeeping; `emitted = gt_boxes - drops + duplicates + hallucinations`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FaultTally {
    pub gt_boxes: usize,
    pub drops: usize,
    pub duplicates: usize,
    pub hallucinations: usize,
    pub emitted: usize,
}

fn jittered(b: &BBox, j: f64, w: f64, h: f64, rng: &mut impl Rng) -> BBox {
    let [x1, y1, x2, y2] = b.coords().map(|v| v + rng.gen_range(-j..=j));
    let clamp = |v: f64, hi: f64| v.clamp(0.0, hi);
    BBox::new(clamp(x1, w), clamp(y1, h), clamp(x2, w), clamp(y2, h))
        .map(|nb| quantize_box(&nb))
        .unwrap_or(*b)
}

/// A copy displaced by at most 2% of each side, so it overlaps the
/// original at IoU above 0.92.
fn near_copy(b: &BBox, w: f64, h: f64, rng: &mut impl Rng) -> BBox {
    let dx = rng.gen_range(-0.02..=0.02) * b.width();
    let dy = rng.gen_range(-0.02..=0.02) * b.height();
    let shifted = b.translate(dx, dy).ok().filter(|s| s.within(w, h)).unwrap_or(*b);
    quantize_box(&shifted)
}

fn random_box(w: f64, h: f64, rng: &mut impl Rng) -> BBox {
    let bw = w * rng.gen_range(0.05..0.3);
    let bh = h * rng.gen_range(0.05..0.3);
    let x = rng.gen_range(0.0..(w - bw).max(f64::MIN_POSITIVE));
    let y = rng.gen_range(0.0..(h - bh).max(f64::MIN_POSITIVE));
    quantize_box(&BBox::new(x, y, x + bw, y + bh).expect("positive extent"))
}

/// Faulty answer for one image from its labeled ground truth.
pub fn mock_from_labeled(
    image_id: i64,
    labeled: &[(String, BBox)],
    width: f64,
    height: f64,
    spec: &PromptSpec,
    profile: &FaultProfile,
    cot: bool,
) -> (String, FaultTally) {
    let mut rng = image_rng(profile.seed, image_id);
    let base = canonical_boxes(labeled, spec);
    let mut tally = FaultTally {
        gt_boxes: base.len(),
        ..FaultTally::default()
    };

    let mut kept: Vec<(BBox, String)> = Vec::with_capacity(base.len());
    for (b, l) in base {
        let p = if b.is_small() { profile.small_miss } else { profile.small_miss / 4.0 };
        if rng.gen::<f64>() < p {
            tally.drops += 1;
        } else {
            kept.push((b, l));
        }
    }

    if profile.jitter > 0.0 {
        for (b, _) in &mut kept {
            *b = jittered(b, profile.jitter, width, height, &mut rng);
        }
    }

    let mut counts: Vec<(String, usize)> = Vec::new();
    for name in &spec.categories {
        let n = kept.iter().filter(|(_, l)| l == name).count();
        if n > 0 {
            counts.push((name.clone(), n));
        }
    }

    let mut emitted: Vec<(BBox, String)> = Vec::with_capacity(kept.len());
    for (b, l) in &kept {
        emitted.push((*b, l.clone()));
        if rng.gen::<f64>() < profile.dup_rate {
            let copies = rng.gen_range(1..=profile.dup_max);
            for _ in 0..copies {
                emitted.push((near_copy(b, width, height, &mut rng), l.clone()));
            }
            tally.duplicates += copies as usize;
        }
    }

    for neg in &spec.negatives {
        if rng.gen::<f64>() < profile.hallucination_rate {
            emitted.push((random_box(width, height, &mut rng), neg.clone()));
            tally.hallucinations += 1;
        }
    }
    tally.emitted = emitted.len();

    if profile.corrupt_counts {
        counts = spec
            .categories
            .iter()
            .map(|name| (name.clone(), emitted.iter().filter(|(_, l)| l == name).count()))
            .filter(|(_, n)| *n > 0)
            .collect();
    }

    let text = if cot {
        render_with_counts(&counts, &emitted)
    } else {
        render_grounding(&emitted)
    };
    (text, tally)
}

pub fn mock_generate_traced(
    ann: &ImageAnnotation,
    vocab: &CategoryVocab,
    spec: &PromptSpec,
    profile: &FaultProfile,
    cot: bool,
) -> (String, FaultTally) {
    mock_from_labeled(
        ann.image_id,
        &labeled_instances(ann, vocab),
        ann.width,
        ann.height,
        spec,
        profile,
        cot,
    )
}

pub fn mock_generate(
    ann: &ImageAnnotation,
    vocab: &CategoryVocab,
    spec: &PromptSpec,
    profile: &FaultProfile,
    cot: bool,
) -> String {
    mock_generate_traced(ann, vocab, spec, profile, cot).0
}
