//! Axis-aligned bounding boxes in original pixel coordinates.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// COCO small-object area threshold (32²).
pub const SMALL_AREA: f64 = 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BoxError {
    #[error("box coordinate is not finite")]
    NonFinite,
    #[error("box coordinate is negative")]
    Negative,
    #[error("degenerate box: width {width}, height {height}")]
    Degenerate { width: f64, height: f64 },
}

/// An axis-aligned rectangle `[x1, y1, x2, y2]` with the origin at the top-left.
///
/// Construction enforces `x1 < x2`, `y1 < y2` and finite, non-negative
/// coordinates, so every `BBox` in circulation has strictly positive area.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if x1 < 0.0 || y1 < 0.0 || x2 < 0.0 || y2 < 0.0 {
            return Err(BoxError::Negative);
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(BoxError::Degenerate {
                width: x2 - x1,
                height: y2 - y1,
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Build from COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_small(&self) -> bool {
        self.area() < SMALL_AREA
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Shift by `(dx, dy)`; fails if the result leaves the valid domain.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, BoxError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Largest distance by which the box extends past `[0, width] × [0, height]`.
    pub fn overshoot(&self, width: f64, height: f64) -> f64 {
        (self.x2 - width).max(self.y2 - height).max(0.0)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    /// Clip to the image rectangle. Fails if nothing with positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Result<Self, BoxError> {
        Self::new(
            self.x1.min(width),
            self.y1.min(height),
            self.x2.min(width),
            self.y2.min(height),
        )
    }

    /// Total order on `(x1, y1, x2, y2)`; the left-to-right ordering of grounding output.
    pub fn spatial_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = BoxError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}
