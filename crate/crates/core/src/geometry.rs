//! Shared geometry, coordinate-frame transforms, and scalar metric primitives.
//!
//! Coordinates are continuous (sub-pixel) throughout the pipeline;
//! rasterization rounds only at pixel-buffer access.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in pixel coordinates, patch frame or slide frame depending on context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite point ({x}, {y})")));
        }
        Ok(Point2D { x, y })
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Physical scan resolution in micrometers per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MppScale {
    microns_per_pixel: f64,
}

impl MppScale {
    pub fn new(microns_per_pixel: f64) -> Result<Self> {
        if !(microns_per_pixel.is_finite() && microns_per_pixel > 0.0) {
            return Err(Error::InvalidValue(format!(
                "microns_per_pixel must be finite and > 0, got {microns_per_pixel}"
            )));
        }
        Ok(MppScale { microns_per_pixel })
    }

    pub fn microns_per_pixel(&self) -> f64 {
        self.microns_per_pixel
    }
}

/// Axis-aligned rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        if ![x, y, width, height].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("non-finite rectangle".into()));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "rectangle must have positive area, got {width}x{height}"
            )));
        }
        Ok(Rect { x, y, width, height })
    }

    pub fn center(&self) -> Point2D {
        Point2D {
            x: self.x + self.width / 2.0,
            y: self.y + self.height / 2.0,
        }
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= self.x && p.x < self.x + self.width && p.y >= self.y && p.y < self.y + self.height
    }

    /// Intersection area with another rectangle, 0 when disjoint.
    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union with another rectangle.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.width * self.height + other.width * other.height - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Direction of a patch/slide coordinate transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameDirection {
    /// Patch frame to slide frame: add the patch origin.
    ToSlide,
    /// Slide frame to patch frame: subtract the patch origin.
    ToPatch,
}

/// Translate a point between patch and slide frames. The two directions are
/// mutual inverses and exact for integer-valued inputs.
pub fn frame_transform(p: Point2D, origin: Point2D, direction: FrameDirection) -> Point2D {
    match direction {
        FrameDirection::ToSlide => Point2D { x: p.x + origin.x, y: p.y + origin.y },
        FrameDirection::ToPatch => Point2D { x: p.x - origin.x, y: p.y - origin.y },
    }
}

/// Convert a micron distance to pixels at the given scan resolution.
pub fn microns_to_pixels(microns: f64, scale: MppScale) -> Result<f64> {
    if !(microns.is_finite() && microns >= 0.0) {
        return Err(Error::InvalidValue(format!("distance must be >= 0, got {microns}")));
    }
    Ok(microns / scale.microns_per_pixel())
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> Result<f64> {
    for (name, v) in [("precision", precision), ("recall", recall)] {
        if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidValue(format!("{name} must be in [0,1], got {v}")));
        }
    }
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}
