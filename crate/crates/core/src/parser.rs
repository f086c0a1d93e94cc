//! Parsing of three-stage answers, cross-stage consistency checks, and
//! conversion to scored detections.
//!
//! Parsing is tolerant: headers match case-insensitively, code fences and
//! prose around the stages are ignored, and a malformed grounding record is
//! skipped with a warning. Strictness lives in [`validate`] and in the
//! [`Policy`] passed to [`to_detections`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datasets::normalize_name;
use crate::geometry::BBox;
use crate::prompt::PromptSpec;

pub const DEFAULT_DUP_IOU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no recognizable stage or record list in model output")]
    NoParsableContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classification,
    Counting,
    Grounding,
}

/// How a stage's content was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StageSource {
    Parsed,
    /// Reconstructed from another stage because the header was absent.
    Derived,
    #[default]
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Stages {
    pub classification: StageSource,
    pub counting: StageSource,
    pub grounding: StageSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    MissingStage { stage: Stage },
    RepeatedStage { stage: Stage },
    MalformedRecord { index: usize, reason: String },
    MalformedCount { entry: String },
    RepeatedCategory { name: String },
    TruncatedList,
    BareRecordList,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::MissingStage { stage } => write!(f, "missing {stage:?} stage"),
            ParseWarning::RepeatedStage { stage } => write!(f, "repeated {stage:?} header ignored"),
            ParseWarning::MalformedRecord { index, reason } => {
                write!(f, "grounding record {index} skipped: {reason}")
            }
            ParseWarning::MalformedCount { entry } => write!(f, "unparsable count entry `{entry}`"),
            ParseWarning::RepeatedCategory { name } => write!(f, "category `{name}` listed twice"),
            ParseWarning::TruncatedList => f.write_str("grounding list not closed"),
            ParseWarning::BareRecordList => f.write_str("bare record list without stage headers"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedBox {
    pub bbox: BBox,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParsedAnswer {
    pub classification: Vec<String>,
    pub counts: Vec<(String, u32)>,
    pub boxes: Vec<GroundedBox>,
    pub warnings: Vec<ParseWarning>,
    pub stages: Stages,
}

impl ParsedAnswer {
    pub fn declared_count(&self, name: &str) -> Option<u32> {
        self.counts.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// True when the text carried no stage headers (non-CoT output).
    pub fn is_bare(&self) -> bool {
        self.stages.classification != StageSource::Parsed
            && self.stages.counting != StageSource::Parsed
    }
}

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t>#*_\-]*(category[ \t]+classification|category[ \t]+counting|grounding[ \t]+boxes)[ \t]*[*_]*[ \t]*:[*_]*",
        )
        .expect("valid header regex")
    })
}

fn list_start_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*[\{\]]").expect("valid list regex"))
}

fn stage_of(header: &str) -> Stage {
    let h = header.to_ascii_lowercase();
    if h.contains("classification") {
        Stage::Classification
    } else if h.contains("counting") {
        Stage::Counting
    } else {
        Stage::Grounding
    }
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Raw object slices found inside the first bracketed list of `text`.
struct RecordScan<'a> {
    records: Vec<&'a str>,
    truncated: bool,
}

fn scan_records(text: &str) -> Option<RecordScan<'_>> {
    let start = list_start_regex().find(text)?.start();
    let bytes = text.as_bytes();
    let mut records = Vec::new();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    let mut obj_start = None;
    let mut i = start + 1;
    while i < bytes.len() {
        let c = bytes[i];
        if in_str {
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == b'"' {
                in_str = false;
            }
        } else {
            match c {
                b'"' if depth > 0 => in_str = true,
                b'{' => {
                    if depth == 0 {
                        obj_start = Some(i);
                    }
                    depth += 1;
                }
                b'}' if depth > 0 => {
                    depth -= 1;
                    if depth == 0 {
                        if let Some(s) = obj_start.take() {
                            records.push(&text[s..=i]);
                        }
                    }
                }
                b']' if depth == 0 => {
                    return Some(RecordScan {
                        records,
                        truncated: false,
                    })
                }
                _ => {}
            }
        }
        i += 1;
    }
    Some(RecordScan {
        records,
        truncated: true,
    })
}

fn parse_record(raw: &str) -> Result<GroundedBox, String> {
    let value: Value = serde_json::from_str(raw)
        .or_else(|_| serde_json::from_str(&raw.replace('\'', "\"")))
        .map_err(|e| format!("invalid record syntax ({e})"))?;
    let bbox_val = value
        .get("bbox_2d")
        .or_else(|| value.get("bbox"))
        .ok_or("missing bbox_2d")?;
    let arr = bbox_val.as_array().ok_or("bbox_2d is not an array")?;
    if arr.len() != 4 {
        return Err(format!("bbox_2d has {} elements, expected 4", arr.len()));
    }
    let mut c = [0.0; 4];
    for (slot, v) in c.iter_mut().zip(arr) {
        *slot = v.as_f64().ok_or("non-numeric coordinate")?;
    }
    let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| e.to_string())?;
    let label = value
        .get("label")
        .and_then(Value::as_str)
        .ok_or("missing label")?;
    let label = normalize_name(label);
    if label.is_empty() {
        return Err("empty label".into());
    }
    Ok(GroundedBox { bbox, label })
}

fn parse_grounding(text: &str, warnings: &mut Vec<ParseWarning>) -> Option<Vec<GroundedBox>> {
    let scan = scan_records(text)?;
    let mut boxes = Vec::with_capacity(scan.records.len());
    for (index, raw) in scan.records.iter().enumerate() {
        match parse_record(raw) {
            Ok(b) => boxes.push(b),
            Err(reason) => warnings.push(ParseWarning::MalformedRecord { index, reason }),
        }
    }
    if scan.truncated {
        warnings.push(ParseWarning::TruncatedList);
    }
    Some(boxes)
}

fn parse_classification(text: &str, warnings: &mut Vec<ParseWarning>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in text.split([',', '\n']) {
        let name = normalize_name(item);
        if name.is_empty() {
            continue;
        }
        if out.contains(&name) {
            warnings.push(ParseWarning::RepeatedCategory { name });
        } else {
            out.push(name);
        }
    }
    out
}

fn parse_counts(text: &str, warnings: &mut Vec<ParseWarning>) -> Vec<(String, u32)> {
    let mut out: Vec<(String, u32)> = Vec::new();
    for item in text.split([';', '\n']) {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let parsed = item.rsplit_once(':').and_then(|(name, count)| {
            let name = normalize_name(name);
            let count = count.trim().trim_end_matches('.').parse::<u32>().ok()?;
            (!name.is_empty()).then_some((name, count))
        });
        match parsed {
            Some((name, count)) => {
                if out.iter().any(|(n, _)| *n == name) {
                    warnings.push(ParseWarning::RepeatedCategory { name });
                } else {
                    out.push((name, count));
                }
            }
            None => warnings.push(ParseWarning::MalformedCount {
                entry: item.to_string(),
            }),
        }
    }
    out
}

fn observed_counts(boxes: &[GroundedBox]) -> Vec<(String, u32)> {
    let mut out: Vec<(String, u32)> = Vec::new();
    for b in boxes {
        match out.iter_mut().find(|(n, _)| *n == b.label) {
            Some((_, c)) => *c += 1,
            None => out.push((b.label.clone(), 1)),
        }
    }
    out
}

/// Parse raw model text. Total over all inputs: the only error is
/// [`ParseError::NoParsableContent`].
pub fn parse_cot_answer(text: &str) -> Result<ParsedAnswer, ParseError> {
    let cleaned = strip_fences(text);
    let mut warnings = Vec::new();

    let mut headers: Vec<(Stage, usize, usize)> = Vec::new();
    for m in header_regex().captures_iter(&cleaned) {
        let whole = m.get(0).expect("match");
        let stage = stage_of(&m[1]);
        if headers.iter().any(|(s, _, _)| *s == stage) {
            warnings.push(ParseWarning::RepeatedStage { stage });
            continue;
        }
        headers.push((stage, whole.start(), whole.end()));
    }

    let mut ans = ParsedAnswer::default();

    if headers.is_empty() {
        let boxes = parse_grounding(&cleaned, &mut warnings).ok_or(ParseError::NoParsableContent)?;
        warnings.insert(0, ParseWarning::BareRecordList);
        ans.boxes = boxes;
        ans.stages.grounding = StageSource::Parsed;
    } else {
        // Section bodies run to the next header (headers are sorted by position).
        let mut body_of: HashMap<Stage, &str> = HashMap::new();
        let mut tail_start = 0;
        for (k, &(stage, _, end)) in headers.iter().enumerate() {
            let stop = headers
                .iter()
                .map(|h| h.1)
                .filter(|&s| s > end)
                .min()
                .unwrap_or(cleaned.len());
            body_of.insert(stage, &cleaned[end..stop]);
            if k == headers.len() - 1 {
                tail_start = end;
            }
        }
        if let Some(body) = body_of.get(&Stage::Classification) {
            ans.classification = parse_classification(body, &mut warnings);
            ans.stages.classification = StageSource::Parsed;
        }
        if let Some(body) = body_of.get(&Stage::Counting) {
            ans.counts = parse_counts(body, &mut warnings);
            ans.stages.counting = StageSource::Parsed;
        }
        match body_of.get(&Stage::Grounding) {
            Some(body) => {
                ans.boxes = parse_grounding(body, &mut warnings).unwrap_or_default();
                ans.stages.grounding = StageSource::Parsed;
            }
            None => {
                warnings.push(ParseWarning::MissingStage {
                    stage: Stage::Grounding,
                });
                if let Some(boxes) = parse_grounding(&cleaned[tail_start..], &mut warnings) {
                    ans.boxes = boxes;
                    ans.stages.grounding = StageSource::Derived;
                }
            }
        }
    }

    if ans.stages.counting == StageSource::Missing {
        warnings.push(ParseWarning::MissingStage {
            stage: Stage::Counting,
        });
        ans.counts = if ans.stages.classification == StageSource::Parsed && ans.boxes.is_empty() {
            Vec::new()
        } else {
            observed_counts(&ans.boxes)
        };
        ans.stages.counting = StageSource::Derived;
    }
    if ans.stages.classification == StageSource::Missing {
        warnings.push(ParseWarning::MissingStage {
            stage: Stage::Classification,
        });
        ans.classification = ans
            .counts
            .iter()
            .filter(|(_, c)| *c > 0)
            .map(|(n, _)| n.clone())
            .collect();
        ans.stages.classification = StageSource::Derived;
    }
    ans.warnings = warnings;
    Ok(ans)
}

/// Per-category difference between declared and emitted box counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDelta {
    pub category: String,
    pub declared: u32,
    pub emitted: u32,
    /// `declared - emitted`.
    pub delta: i64,
}

/// Cross-stage consistency of one parsed answer against its prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub classification_counts_agree: bool,
    pub counts_boxes_agree: bool,
    /// Only categories whose delta is non-zero.
    pub count_deltas: Vec<CountDelta>,
    pub labels_subset_of_prompt: bool,
    pub ordering_canonical: bool,
    pub boxes_within_image: bool,
    /// Groups of same-label box indices linked by IoU ≥ `dup_iou`.
    pub duplicate_groups: Vec<Vec<usize>>,
    pub width: f64,
    pub height: f64,
    pub dup_iou: f64,
}

impl ConsistencyReport {
    pub fn all_pass(&self) -> bool {
        self.classification_counts_agree
            && self.counts_boxes_agree
            && self.labels_subset_of_prompt
            && self.ordering_canonical
            && self.boxes_within_image
            && self.duplicate_groups.is_empty()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Same-label boxes whose pairwise IoU reaches `dup_iou`, grouped transitively.
pub fn duplicate_groups(boxes: &[GroundedBox], dup_iou: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if boxes[i].label == boxes[j].label && boxes[i].bbox.iou(&boxes[j].bbox) >= dup_iou {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() > 1).collect();
    out.sort_by_key(|g| g[0]);
    out
}

pub fn validate(
    ans: &ParsedAnswer,
    spec: &PromptSpec,
    width: f64,
    height: f64,
    dup_iou: f64,
) -> ConsistencyReport {
    let declared: HashSet<&str> = ans
        .counts
        .iter()
        .filter(|(_, c)| *c > 0)
        .map(|(n, _)| n.as_str())
        .collect();
    let classified: HashSet<&str> = ans.classification.iter().map(String::as_str).collect();
    let zero_but_classified = ans
        .counts
        .iter()
        .any(|(n, c)| *c == 0 && classified.contains(n.as_str()));
    let classification_counts_agree = declared == classified && !zero_but_classified;

    let emitted = observed_counts(&ans.boxes);
    let mut names: Vec<&str> = ans.counts.iter().map(|(n, _)| n.as_str()).collect();
    for (n, _) in &emitted {
        if !names.contains(&n.as_str()) {
            names.push(n);
        }
    }
    let count_deltas: Vec<CountDelta> = names
        .into_iter()
        .filter_map(|name| {
            let d = ans.declared_count(name).unwrap_or(0);
            let e = emitted
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, c)| *c)
                .unwrap_or(0);
            (d != e).then(|| CountDelta {
                category: name.to_string(),
                declared: d,
                emitted: e,
                delta: d as i64 - e as i64,
            })
        })
        .collect();

    let in_prompt = |n: &str| spec.index_of(n).is_some();
    let labels_subset_of_prompt = ans.classification.iter().all(|n| in_prompt(n))
        && ans.counts.iter().all(|(n, _)| in_prompt(n))
        && ans.boxes.iter().all(|b| in_prompt(&b.label));

    let key = |b: &GroundedBox| spec.index_of(&b.label).unwrap_or(usize::MAX);
    let ordering_canonical = ans.boxes.windows(2).all(|w| {
        key(&w[0])
            .cmp(&key(&w[1]))
            .then(w[0].bbox.spatial_cmp(&w[1].bbox))
            .is_le()
    });

    ConsistencyReport {
        classification_counts_agree,
        counts_boxes_agree: count_deltas.is_empty(),
        count_deltas,
        labels_subset_of_prompt,
        ordering_canonical,
        boxes_within_image: ans.boxes.iter().all(|b| b.bbox.within(width, height)),
        duplicate_groups: duplicate_groups(&ans.boxes, dup_iou),
        width,
        height,
        dup_iou,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Every parsed box.
    Lenient,
    /// Nothing unless every consistency flag passes.
    Strict,
    /// Enforce the answer's own classification and counts.
    Repair,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Lenient => "lenient",
            Policy::Strict => "strict",
            Policy::Repair => "repair",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lenient" => Ok(Policy::Lenient),
            "strict" => Ok(Policy::Strict),
            "repair" => Ok(Policy::Repair),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// A scored box. Scores come from emission order since model output has none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
}

/// Scores `1 - i/(n+1)` for the i-th of n surviving boxes.
pub fn assign_pseudo_scores(boxes: Vec<(BBox, String)>) -> Vec<Detection> {
    let n = boxes.len() as f64;
    boxes
        .into_iter()
        .enumerate()
        .map(|(i, (bbox, label))| Detection {
            bbox,
            label,
            score: 1.0 - i as f64 / (n + 1.0),
        })
        .collect()
}

fn repair(ans: &ParsedAnswer, report: &ConsistencyReport) -> Vec<(BBox, String)> {
    let classified: HashSet<&str> = ans.classification.iter().map(String::as_str).collect();
    let mut keep: Vec<bool> = ans
        .boxes
        .iter()
        .map(|b| classified.contains(b.label.as_str()))
        .collect();

    for group in &report.duplicate_groups {
        let survivors: Vec<usize> = group.iter().copied().filter(|&i| i < keep.len() && keep[i]).collect();
        for &i in survivors.iter().skip(1) {
            keep[i] = false;
        }
    }

    let mut used: HashMap<&str, u32> = HashMap::new();
    for (i, b) in ans.boxes.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        if let Some(limit) = ans.declared_count(&b.label) {
            let n = used.entry(b.label.as_str()).or_insert(0);
            if *n >= limit {
                keep[i] = false;
            } else {
                *n += 1;
            }
        }
    }

    ans.boxes
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .filter_map(|(b, _)| {
            let over = b.bbox.overshoot(report.width, report.height);
            if over == 0.0 {
                Some((b.bbox, b.label.clone()))
            } else if over < 1.0 {
                b.bbox
                    .clamp_to(report.width, report.height)
                    .ok()
                    .map(|c| (c, b.label.clone()))
            } else {
                None
            }
        })
        .collect()
}

pub fn to_detections(ans: &ParsedAnswer, report: &ConsistencyReport, policy: Policy) -> Vec<Detection> {
    let all = || {
        ans.boxes
            .iter()
            .map(|b| (b.bbox, b.label.clone()))
            .collect::<Vec<_>>()
    };
    let survivors = match policy {
        Policy::Lenient => all(),
        Policy::Strict if report.all_pass() => all(),
        Policy::Strict => Vec::new(),
        Policy::Repair => repair(ans, report),
    };
    assign_pseudo_scores(survivors)
}
