//! Lift patch-frame detections to the slide frame and deduplicate across
//! overlapping tiles with greedy radius suppression.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frame_transform, FrameDirection, Point2D};
use crate::manifest::AnnotationLabel;
use crate::orchestrator::PatchDetection;
use crate::patchset::PatchSpec;

/// A detection in slide coordinates with its originating patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideDetection {
    pub slide_id: String,
    pub center: Point2D,
    pub score: f64,
    pub label: AnnotationLabel,
    pub provenance: String,
}

/// Transform patch-frame detections into the slide frame via their specs.
pub fn lift_to_slide(
    detections: &[PatchDetection],
    specs: &[PatchSpec],
) -> Result<Vec<SlideDetection>> {
    let by_id: HashMap<&str, &PatchSpec> =
        specs.iter().map(|s| (s.patch_id.as_str(), s)).collect();
    detections
        .iter()
        .map(|d| {
            let spec = by_id.get(d.patch_id.as_str()).ok_or_else(|| {
                Error::Integrity(format!("detection references unknown patch {}", d.patch_id))
            })?;
            Ok(SlideDetection {
                slide_id: spec.slide_id.clone(),
                center: frame_transform(d.center, spec.origin, FrameDirection::ToSlide),
                score: d.score,
                label: d.label,
                provenance: d.patch_id.clone(),
            })
        })
        .collect()
}

/// Canonical suppression order: score desc, then x, then y, then provenance.
fn canonical_order(detections: &mut Vec<SlideDetection>) {
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.center.x.partial_cmp(&b.center.x).unwrap())
            .then_with(|| a.center.y.partial_cmp(&b.center.y).unwrap())
            .then_with(|| a.provenance.cmp(&b.provenance))
    });
}

/// Reference O(n^2) implementation of the greedy suppression rule. Kept as
/// the behavioral oracle for the grid-accelerated version.
pub fn radius_suppress_naive(detections: &[SlideDetection], radius: f64) -> Vec<SlideDetection> {
    let mut sorted = detections.to_vec();
    canonical_order(&mut sorted);
    let mut kept: Vec<SlideDetection> = Vec::new();
    for d in sorted {
        let clear = kept
            .iter()
            .filter(|k| k.slide_id == d.slide_id)
            .all(|k| k.center.distance(&d.center) > radius);
        if clear {
            kept.push(d);
        }
    }
    kept
}

/// Greedy radius suppression: iterate in canonical order, keep a detection
/// iff its distance to every already-kept detection on the same slide
/// exceeds `radius`. A uniform grid hash with cell size = radius accelerates
/// the neighbor query; behavior is identical to [`radius_suppress_naive`].
pub fn radius_suppress(detections: &[SlideDetection], radius: f64) -> Result<Vec<SlideDetection>> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidValue(format!("radius must be > 0, got {radius}")));
    }
    let mut sorted = detections.to_vec();
    canonical_order(&mut sorted);
    // (slide, cell x, cell y) -> indices into kept
    let mut grid: HashMap<(String, i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<SlideDetection> = Vec::new();
    let cell_of = |v: f64| (v / radius).floor() as i64;
    for d in sorted {
        let (cx, cy) = (cell_of(d.center.x), cell_of(d.center.y));
        let mut clear = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                let key = (d.slide_id.clone(), cx + dx, cy + dy);
                if let Some(indices) = grid.get(&key) {
                    for &i in indices {
                        if kept[i].center.distance(&d.center) <= radius {
                            clear = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if clear {
            grid.entry((d.slide_id.clone(), cx, cy)).or_default().push(kept.len());
            kept.push(d);
        }
    }
    Ok(kept)
}

pub fn save_slide_detections(detections: &[SlideDetection], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for d in detections {
        serde_json::to_writer(&mut out, d).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_slide_detections(path: &Path) -> Result<Vec<SlideDetection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(out)
}
