//! Three-stage classification → counting → grounding detection toolkit:
//! dataset ingestion, prompt/answer construction, output parsing and repair,
//! and COCO/LVIS/REC scoring.

pub mod datasets;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod mixture;
pub mod parser;
pub mod prompt;

pub use datasets::{CategoryVocab, ImageAnnotation, RefExpression};
pub use geometry::BBox;
pub use metrics::EvalReport;
pub use parser::{Detection, ParsedAnswer, Policy};
pub use prompt::{PromptSpec, Setting};
