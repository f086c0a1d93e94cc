//! Annotation ingestion: COCO-style detection documents, LVIS frequency
//! metadata, and a line-delimited referring-expression format.
//!
//! The referring-expression format is one JSON object per line:
//!
//! ```text
//! {"image_id": 1, "expression": "the man on the left", "bbox": [x1, y1, x2, y2], "granularity": "phrase"}
//! ```
//!
//! `granularity` is `"phrase"` or `"sentence"`. Optional `width` / `height`
//! fields carry the image size when known. Upstream RefCOCO/+/g, Flickr30k
//! Entities or Visual Genome exports are converted to this shape once, outside
//! the toolkit.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{BBox, BoxError};

/// Sub-pixel overshoot tolerated (and clamped) when a box exceeds the image.
pub const BOUNDS_TOLERANCE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON{}: {source}", line_suffix(*.line))]
    Json {
        path: PathBuf,
        line: Option<usize>,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing or invalid field `{field}` in {record}")]
    MissingField { field: String, record: String },
    #[error("malformed box in {record}: {reason}")]
    MalformedBox { record: String, reason: String },
    #[error("annotation {annotation_id} references unknown category id {category_id}")]
    UnknownCategory { annotation_id: i64, category_id: i64 },
    #[error("annotation {annotation_id} references unknown image id {image_id}")]
    UnknownImage { annotation_id: i64, image_id: i64 },
    #[error("duplicate {what} `{key}`")]
    Duplicate { what: &'static str, key: String },
    #[error("annotation {annotation_id} box exceeds image bounds by {overshoot:.3} px")]
    OutOfBounds { annotation_id: i64, overshoot: f64 },
    #[error("category {category_id}: frequency `{frequency}` disagrees with image_count {image_count}")]
    BandConflict {
        category_id: i64,
        frequency: String,
        image_count: u64,
    },
    #[error("unknown granularity `{value}` in {record}")]
    UnknownGranularity { value: String, record: String },
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

/// LVIS-style frequency band of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Rare,
    Common,
    Frequent,
    Unknown,
}

impl Band {
    /// LVIS convention: 1 to 10 training images is rare, 11 to 100 common, above that frequent.
    pub fn from_image_count(count: u64) -> Band {
        match count {
            0 => Band::Unknown,
            1..=10 => Band::Rare,
            11..=100 => Band::Common,
            _ => Band::Frequent,
        }
    }

    pub fn from_code(code: &str) -> Option<Band> {
        match code {
            "r" => Some(Band::Rare),
            "c" => Some(Band::Common),
            "f" => Some(Band::Frequent),
            _ => None,
        }
    }
}

/// Prompt granularity of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Word,
    Phrase,
    Sentence,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Word => "word",
            Granularity::Phrase => "phrase",
            Granularity::Sentence => "sentence",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical form of a category name or label: lowercase, trimmed, internal
/// whitespace collapsed, trailing punctuation removed.
pub fn normalize_name(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')' && c != ']')
        .trim_end()
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: i64,
    pub name: String,
    pub band: Band,
}

/// Ordered category universe with unique ids and unique normalized names.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CategoryVocab {
    entries: Vec<Category>,
    #[serde(skip)]
    by_id: HashMap<i64, usize>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl CategoryVocab {
    /// Build from `(id, raw name)` pairs. Entries are kept sorted by id.
    pub fn new<I, S>(entries: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (i64, S)>,
        S: AsRef<str>,
    {
        let mut vocab = CategoryVocab::default();
        let mut cats: Vec<Category> = entries
            .into_iter()
            .map(|(id, name)| Category {
                id,
                name: normalize_name(name.as_ref()),
                band: Band::Unknown,
            })
            .collect();
        cats.sort_by_key(|c| c.id);
        for cat in cats {
            vocab.push(cat)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, cat: Category) -> Result<(), DatasetError> {
        if self.by_id.contains_key(&cat.id) {
            return Err(DatasetError::Duplicate {
                what: "category id",
                key: cat.id.to_string(),
            });
        }
        if cat.name.is_empty() || self.by_name.contains_key(&cat.name) {
            return Err(DatasetError::Duplicate {
                what: "category name",
                key: cat.name,
            });
        }
        let idx = self.entries.len();
        self.by_id.insert(cat.id, idx);
        self.by_name.insert(cat.name.clone(), idx);
        self.entries.push(cat);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Category> {
        self.entries.iter()
    }

    pub fn get(&self, id: i64) -> Option<&Category> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    pub fn name_of(&self, id: i64) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }

    /// Look up by name; the query is normalized first.
    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.by_name
            .get(&normalize_name(name))
            .map(|&i| &self.entries[i])
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|c| c.name.clone()).collect()
    }

    pub fn has_bands(&self) -> bool {
        self.entries.iter().any(|c| c.band != Band::Unknown)
    }

    pub fn set_band(&mut self, id: i64, band: Band) {
        if let Some(&i) = self.by_id.get(&id) {
            self.entries[i].band = band;
        }
    }
}

/// One ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Instance {
    pub category_id: i64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageAnnotation {
    pub image_id: i64,
    pub width: f64,
    pub height: f64,
    pub file_name: Option<String>,
    pub instances: Vec<Instance>,
    pub source: String,
}

impl ImageAnnotation {
    /// Distinct category ids present, ascending.
    pub fn category_ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.instances.iter().map(|i| i.category_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Result of loading a COCO-style document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CocoIndex {
    pub vocab: CategoryVocab,
    /// Sorted by image id.
    pub images: Vec<ImageAnnotation>,
    /// Source annotations dropped for zero width or height.
    pub dropped: usize,
    /// Total annotation records in the source document.
    pub source_annotations: usize,
}

impl CocoIndex {
    pub fn instance_count(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefExpression {
    pub image_id: i64,
    pub expression: String,
    pub target: BBox,
    pub granularity: Granularity,
    pub image_size: Option<(f64, f64)>,
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        line: None,
        source,
    })
}

fn field<'a>(obj: &'a Value, name: &str, record: &dyn Fn() -> String) -> Result<&'a Value, DatasetError> {
    obj.get(name).ok_or_else(|| DatasetError::MissingField {
        field: name.to_string(),
        record: record(),
    })
}

fn int_field(obj: &Value, name: &str, record: &dyn Fn() -> String) -> Result<i64, DatasetError> {
    let v = field(obj, name, record)?;
    v.as_i64()
        .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
        .ok_or_else(|| DatasetError::MissingField {
            field: name.to_string(),
            record: record(),
        })
}

fn num_field(obj: &Value, name: &str, record: &dyn Fn() -> String) -> Result<f64, DatasetError> {
    field(obj, name, record)?
        .as_f64()
        .ok_or_else(|| DatasetError::MissingField {
            field: name.to_string(),
            record: record(),
        })
}

fn str_field<'a>(obj: &'a Value, name: &str, record: &dyn Fn() -> String) -> Result<&'a str, DatasetError> {
    field(obj, name, record)?
        .as_str()
        .ok_or_else(|| DatasetError::MissingField {
            field: name.to_string(),
            record: record(),
        })
}

fn array_field<'a>(obj: &'a Value, name: &str, record: &dyn Fn() -> String) -> Result<&'a Vec<Value>, DatasetError> {
    field(obj, name, record)?
        .as_array()
        .ok_or_else(|| DatasetError::MissingField {
            field: name.to_string(),
            record: record(),
        })
}

fn four_numbers(v: &Value, record: &dyn Fn() -> String) -> Result<[f64; 4], DatasetError> {
    let malformed = |reason: &str| DatasetError::MalformedBox {
        record: record(),
        reason: reason.to_string(),
    };
    let arr = v.as_array().ok_or_else(|| malformed("bbox is not an array"))?;
    if arr.len() != 4 {
        return Err(malformed(&format!("expected 4 numbers, found {}", arr.len())));
    }
    let mut out = [0.0; 4];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = item.as_f64().ok_or_else(|| malformed("non-numeric coordinate"))?;
    }
    Ok(out)
}

/// Clamp sub-pixel overshoot; anything larger is an error.
fn fit_to_image(b: BBox, width: f64, height: f64, annotation_id: i64) -> Result<BBox, DatasetError> {
    let overshoot = b.overshoot(width, height);
    if overshoot == 0.0 {
        return Ok(b);
    }
    if overshoot >= BOUNDS_TOLERANCE {
        return Err(DatasetError::OutOfBounds {
            annotation_id,
            overshoot,
        });
    }
    b.clamp_to(width, height).map_err(|e| DatasetError::MalformedBox {
        record: format!("annotation {annotation_id}"),
        reason: e.to_string(),
    })
}

/// Load a COCO-style detection document (also used for LVIS, which shares
/// the schema). Boxes are converted from `[x, y, w, h]` to corner form.
pub fn load_coco(path: impl AsRef<Path>) -> Result<CocoIndex, DatasetError> {
    load_coco_tagged(path, "coco")
}

pub fn load_coco_tagged(path: impl AsRef<Path>, source: &str) -> Result<CocoIndex, DatasetError> {
    let doc = read_json(path.as_ref())?;
    parse_coco(&doc, source)
}

pub fn parse_coco(doc: &Value, source: &str) -> Result<CocoIndex, DatasetError> {
    let top = || "document".to_string();
    let categories = array_field(doc, "categories", &top)?;
    let images = array_field(doc, "images", &top)?;
    let annotations = array_field(doc, "annotations", &top)?;

    let mut cats = Vec::with_capacity(categories.len());
    for (i, c) in categories.iter().enumerate() {
        let rec = || format!("categories[{i}]");
        cats.push((int_field(c, "id", &rec)?, str_field(c, "name", &rec)?.to_string()));
    }
    let vocab = CategoryVocab::new(cats)?;

    let mut by_image: HashMap<i64, ImageAnnotation> = HashMap::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let rec = || format!("images[{i}]");
        let image_id = int_field(img, "id", &rec)?;
        let width = num_field(img, "width", &rec)?;
        let height = num_field(img, "height", &rec)?;
        let file_name = img.get("file_name").and_then(Value::as_str).map(str::to_string);
        let entry = ImageAnnotation {
            image_id,
            width,
            height,
            file_name,
            instances: Vec::new(),
            source: source.to_string(),
        };
        if by_image.insert(image_id, entry).is_some() {
            return Err(DatasetError::Duplicate {
                what: "image id",
                key: image_id.to_string(),
            });
        }
    }

    let mut dropped = 0;
    for (i, ann) in annotations.iter().enumerate() {
        let rec = || format!("annotations[{i}]");
        let annotation_id = ann.get("id").and_then(Value::as_i64).unwrap_or(i as i64);
        let image_id = int_field(ann, "image_id", &rec)?;
        let category_id = int_field(ann, "category_id", &rec)?;
        let [x, y, w, h] = four_numbers(field(ann, "bbox", &rec)?, &|| {
            format!("annotation {annotation_id}")
        })?;
        if vocab.get(category_id).is_none() {
            return Err(DatasetError::UnknownCategory {
                annotation_id,
                category_id,
            });
        }
        let image = by_image
            .get_mut(&image_id)
            .ok_or(DatasetError::UnknownImage {
                annotation_id,
                image_id,
            })?;
        if w == 0.0 || h == 0.0 {
            dropped += 1;
            continue;
        }
        if !(w > 0.0 && h > 0.0) {
            return Err(DatasetError::MalformedBox {
                record: format!("annotation {annotation_id}"),
                reason: format!("width {w}, height {h}"),
            });
        }
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e: BoxError| DatasetError::MalformedBox {
            record: format!("annotation {annotation_id}"),
            reason: e.to_string(),
        })?;
        let bbox = fit_to_image(bbox, image.width, image.height, annotation_id)?;
        image.instances.push(Instance { category_id, bbox });
    }

    let mut images: Vec<ImageAnnotation> = by_image.into_values().collect();
    images.sort_by_key(|i| i.image_id);
    Ok(CocoIndex {
        vocab,
        images,
        dropped,
        source_annotations: annotations.len(),
    })
}

/// Assign frequency bands from an LVIS-style category list (either a full
/// LVIS document or a bare array of categories).
pub fn load_lvis_bands(path: impl AsRef<Path>, vocab: &CategoryVocab) -> Result<CategoryVocab, DatasetError> {
    let doc = read_json(path.as_ref())?;
    apply_lvis_bands(&doc, vocab)
}

pub fn apply_lvis_bands(doc: &Value, vocab: &CategoryVocab) -> Result<CategoryVocab, DatasetError> {
    let top = || "document".to_string();
    let categories = match doc {
        Value::Array(items) => items,
        _ => array_field(doc, "categories", &top)?,
    };
    let mut out = vocab.clone();
    for (i, c) in categories.iter().enumerate() {
        let rec = || format!("categories[{i}]");
        let id = int_field(c, "id", &rec)?;
        let from_freq = match c.get("frequency").and_then(Value::as_str) {
            Some(code) => Some((
                code.to_string(),
                Band::from_code(code).ok_or_else(|| DatasetError::MissingField {
                    field: "frequency".into(),
                    record: rec(),
                })?,
            )),
            None => None,
        };
        let count = c.get("image_count").and_then(Value::as_u64);
        let band = match (from_freq, count) {
            (Some((code, band)), Some(n)) => {
                let derived = Band::from_image_count(n);
                if derived != band {
                    return Err(DatasetError::BandConflict {
                        category_id: id,
                        frequency: code,
                        image_count: n,
                    });
                }
                band
            }
            (Some((_, band)), None) => band,
            (None, Some(n)) => Band::from_image_count(n),
            (None, None) => continue,
        };
        out.set_band(id, band);
    }
    Ok(out)
}

/// Record layout of the line-delimited referring-expression format.
#[derive(Debug, Serialize, Deserialize)]
pub struct RefExpRecord {
    pub image_id: i64,
    pub expression: String,
    pub bbox: [f64; 4],
    pub granularity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

pub fn load_refexp(path: impl AsRef<Path>) -> Result<Vec<RefExpression>, DatasetError> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_refexp(&text, path)
}

pub fn parse_refexp(text: &str, path: &Path) -> Result<Vec<RefExpression>, DatasetError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: Some(line_no),
            source,
        })?;
        let rec = || format!("line {line_no}");
        let image_id = int_field(&value, "image_id", &rec)?;
        let expression = str_field(&value, "expression", &rec)?.to_string();
        let [x1, y1, x2, y2] = four_numbers(field(&value, "bbox", &rec)?, &rec)?;
        let target = BBox::new(x1, y1, x2, y2).map_err(|e| DatasetError::MalformedBox {
            record: rec(),
            reason: e.to_string(),
        })?;
        let g = str_field(&value, "granularity", &rec)?;
        let granularity = match g {
            "phrase" => Granularity::Phrase,
            "sentence" => Granularity::Sentence,
            other => {
                return Err(DatasetError::UnknownGranularity {
                    value: other.to_string(),
                    record: rec(),
                })
            }
        };
        let w = value.get("width").and_then(Value::as_f64);
        let h = value.get("height").and_then(Value::as_f64);
        out.push(RefExpression {
            image_id,
            expression,
            target,
            granularity,
            image_size: w.zip(h),
        });
    }
    Ok(out)
}
