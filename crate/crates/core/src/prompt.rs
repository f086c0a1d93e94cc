//! Question/answer construction in the three-stage classification → counting
//! → grounding format.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{normalize_name, CategoryVocab, Granularity, ImageAnnotation, RefExpression};
use crate::geometry::BBox;

pub const CLASSIFICATION_HEADER: &str = "Category Classification:";
pub const COUNTING_HEADER: &str = "Category Counting:";
pub const GROUNDING_HEADER: &str = "Grounding Boxes:";

pub const DEFAULT_NEG_RATIO: f64 = 1.0;
pub const DEFAULT_MAX_CATEGORIES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("image {0} has no instances and no negatives were requested")]
    EmptyImage(i64),
    #[error("prompt category list is empty")]
    EmptyCategoryList,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Only categories present in the image are prompted.
    #[serde(rename = "gt")]
    GroundTruthCategories,
    /// The entire vocabulary is prompted.
    #[serde(rename = "full")]
    FullCategory,
    /// Positives plus randomly sampled negatives (training data).
    #[serde(rename = "sampled")]
    Sampled,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::GroundTruthCategories => "gt",
            Setting::FullCategory => "full",
            Setting::Sampled => "sampled",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which categories a prompt mentions and which of them are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub image_id: i64,
    /// Names in prompt order.
    pub categories: Vec<String>,
    /// Present categories, in prompt order.
    pub positives: Vec<String>,
    /// Absent categories, in prompt order.
    pub negatives: Vec<String>,
    pub setting: Setting,
    pub granularity: Granularity,
}

impl PromptSpec {
    fn from_partition(
        image_id: i64,
        categories: Vec<String>,
        present: &[String],
        setting: Setting,
        granularity: Granularity,
    ) -> Self {
        let (positives, negatives) = categories
            .iter()
            .cloned()
            .partition(|c| present.contains(c));
        PromptSpec {
            image_id,
            categories,
            positives,
            negatives,
            setting,
            granularity,
        }
    }

    /// Position of `name` in the prompt list.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn is_positive(&self, name: &str) -> bool {
        self.positives.iter().any(|p| p == name)
    }
}

/// Mix a corpus seed with an image id so each image draws an independent stream.
pub(crate) fn image_rng(seed: u64, image_id: i64) -> ChaCha8Rng {
    let mut z = seed ^ (image_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn present_names(ann: &ImageAnnotation, vocab: &CategoryVocab) -> Vec<String> {
    ann.category_ids()
        .into_iter()
        .filter_map(|id| vocab.name_of(id).map(str::to_string))
        .collect()
}

/// Positives plus uniformly sampled negatives, shuffled. Deterministic in
/// `(seed, image id)`.
pub fn sample_categories(
    ann: &ImageAnnotation,
    vocab: &CategoryVocab,
    neg_ratio: f64,
    max_categories: usize,
    seed: u64,
) -> Result<PromptSpec, PromptError> {
    if !(neg_ratio.is_finite() && neg_ratio >= 0.0) {
        return Err(PromptError::InvalidArgument(format!("neg_ratio {neg_ratio}")));
    }
    if max_categories == 0 {
        return Err(PromptError::InvalidArgument("max_categories must be positive".into()));
    }
    let present = ann.category_ids();
    let positives: Vec<i64> = present.iter().copied().take(max_categories).collect();
    let absent: Vec<i64> = vocab
        .iter()
        .map(|c| c.id)
        .filter(|id| present.binary_search(id).is_err())
        .collect();

    let mut wanted = (neg_ratio * positives.len() as f64).round() as usize;
    if positives.is_empty() && neg_ratio > 0.0 {
        wanted = wanted.max(1);
    }
    let n_neg = wanted
        .min(max_categories - positives.len())
        .min(absent.len());
    if positives.is_empty() && n_neg == 0 {
        return Err(PromptError::EmptyImage(ann.image_id));
    }

    let mut rng = image_rng(seed, ann.image_id);
    let negatives: Vec<i64> = rand::seq::index::sample(&mut rng, absent.len(), n_neg)
        .into_iter()
        .map(|i| absent[i])
        .collect();
    let mut ids: Vec<i64> = positives.iter().chain(&negatives).copied().collect();
    ids.shuffle(&mut rng);

    let name = |id: &i64| vocab.name_of(*id).expect("vocab covers image").to_string();
    let categories: Vec<String> = ids.iter().map(name).collect();
    let pos_names: Vec<String> = positives.iter().map(name).collect();
    Ok(PromptSpec::from_partition(
        ann.image_id,
        categories,
        &pos_names,
        Setting::Sampled,
        Granularity::Word,
    ))
}

/// Evaluation prompt with only the image's own categories, in id order.
pub fn ground_truth_spec(ann: &ImageAnnotation, vocab: &CategoryVocab) -> PromptSpec {
    let present = present_names(ann, vocab);
    PromptSpec::from_partition(
        ann.image_id,
        present.clone(),
        &present,
        Setting::GroundTruthCategories,
        Granularity::Word,
    )
}

/// Evaluation prompt with the whole vocabulary, in id order.
pub fn full_category_spec(ann: &ImageAnnotation, vocab: &CategoryVocab) -> PromptSpec {
    let present = present_names(ann, vocab);
    PromptSpec::from_partition(
        ann.image_id,
        vocab.names(),
        &present,
        Setting::FullCategory,
        Granularity::Word,
    )
}

pub fn eval_spec(ann: &ImageAnnotation, vocab: &CategoryVocab, setting: Setting) -> PromptSpec {
    match setting {
        Setting::FullCategory => full_category_spec(ann, vocab),
        _ => ground_truth_spec(ann, vocab),
    }
}

/// Expression text as it appears in a category slot. Stage separators are
/// blanked so the expression survives the comma/semicolon/colon grammar.
pub fn slot_text(expression: &str) -> String {
    let blanked: String = expression
        .chars()
        .map(|c| if matches!(c, ',' | ';' | ':') { ' ' } else { c })
        .collect();
    normalize_name(&blanked)
}

/// A one-category spec plus its single labeled target for a referring expression.
pub fn refexp_spec(expr: &RefExpression) -> (PromptSpec, Vec<(String, BBox)>) {
    let slot = slot_text(&expr.expression);
    let spec = PromptSpec {
        image_id: expr.image_id,
        categories: vec![slot.clone()],
        positives: vec![slot.clone()],
        negatives: Vec::new(),
        setting: Setting::GroundTruthCategories,
        granularity: expr.granularity,
    };
    (spec, vec![(slot, expr.target)])
}

pub fn render_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    if spec.categories.is_empty() {
        return Err(PromptError::EmptyCategoryList);
    }
    Ok(format!(
        "<image>\n Locate every {} in the image.",
        spec.categories.join(", ")
    ))
}

/// Round to two decimals, the resolution of serialized coordinates.
pub fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn quantize_box(b: &BBox) -> BBox {
    let [x1, y1, x2, y2] = b.coords().map(quantize);
    let x2 = if x2 > x1 { x2 } else { x1 + 0.01 };
    let y2 = if y2 > y1 { y2 } else { y1 + 0.01 };
    BBox::new(x1, y1, x2, y2).expect("quantized box stays valid")
}

/// Integer when integral, otherwise at most two decimals without trailing zeros.
pub fn format_coord(v: f64) -> String {
    let q = quantize(v);
    if q.fract() == 0.0 {
        format!("{q:.0}")
    } else {
        let s = format!("{q:.2}");
        s.trim_end_matches('0').to_string()
    }
}

pub fn render_record(bbox: &BBox, label: &str) -> String {
    let [x1, y1, x2, y2] = bbox.coords().map(format_coord);
    let label = serde_json::to_string(label).expect("string serializes");
    format!("{{\"bbox_2d\": [{x1}, {y1}, {x2}, {y2}], \"label\": {label}}}")
}

/// The bracketed grounding list, one record per line.
pub fn render_grounding(boxes: &[(BBox, String)]) -> String {
    if boxes.is_empty() {
        return "[]".to_string();
    }
    let body: Vec<String> = boxes
        .iter()
        .map(|(b, l)| format!("  {}", render_record(b, l)))
        .collect();
    format!("[\n{}\n]", body.join(",\n"))
}

/// Restrict labeled boxes to the spec's positives and sort them by
/// (prompt index, left-to-right spatial key), after quantization.
pub fn canonical_boxes(labeled: &[(String, BBox)], spec: &PromptSpec) -> Vec<(BBox, String)> {
    let mut out: Vec<(usize, BBox, String)> = labeled
        .iter()
        .filter(|(name, _)| spec.is_positive(name))
        .filter_map(|(name, b)| spec.index_of(name).map(|i| (i, quantize_box(b), name.clone())))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.spatial_cmp(&b.1)));
    out.into_iter().map(|(_, b, n)| (b, n)).collect()
}

/// Render the three stages from an already ordered box list. Classification
/// and counts follow prompt order over the labels that occur.
pub fn render_stages(spec: &PromptSpec, boxes: &[(BBox, String)]) -> String {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for name in &spec.categories {
        let n = boxes.iter().filter(|(_, l)| l == name).count();
        if n > 0 {
            counts.push((name.clone(), n));
        }
    }
    render_with_counts(&counts, boxes)
}

pub(crate) fn render_with_counts(counts: &[(String, usize)], boxes: &[(BBox, String)]) -> String {
    let classification = counts
        .iter()
        .map(|(n, _)| n.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let counting = counts
        .iter()
        .map(|(n, c)| format!("{n}: {c}"))
        .collect::<Vec<_>>()
        .join("; ");
    format!(
        "{CLASSIFICATION_HEADER}\n{classification}\n\n{COUNTING_HEADER}\n{counting}\n\n{GROUNDING_HEADER}\n{}",
        render_grounding(boxes)
    )
}

/// Labeled instances of an image, names resolved through `vocab`.
pub fn labeled_instances(ann: &ImageAnnotation, vocab: &CategoryVocab) -> Vec<(String, BBox)> {
    ann.instances
        .iter()
        .filter_map(|i| vocab.name_of(i.category_id).map(|n| (n.to_string(), i.bbox)))
        .collect()
}

/// Target answer for an image under `spec`.
pub fn render_cot_answer(ann: &ImageAnnotation, vocab: &CategoryVocab, spec: &PromptSpec) -> String {
    render_answer(&labeled_instances(ann, vocab), spec)
}

pub fn render_answer(labeled: &[(String, BBox)], spec: &PromptSpec) -> String {
    render_stages(spec, &canonical_boxes(labeled, spec))
}

/// One line of a training/evaluation prompt corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub answer: String,
    pub image_id: i64,
    pub setting: Setting,
    pub granularity: Granularity,
    pub categories: Vec<String>,
    pub seed: u64,
    pub source: String,
}

impl PromptRecord {
    pub fn build(spec: &PromptSpec, answer: String, seed: u64, source: &str) -> Result<Self, PromptError> {
        Ok(PromptRecord {
            prompt: render_prompt(spec)?,
            answer,
            image_id: spec.image_id,
            setting: spec.setting,
            granularity: spec.granularity,
            categories: spec.categories.clone(),
            seed,
            source: source.to_string(),
        })
    }
}
