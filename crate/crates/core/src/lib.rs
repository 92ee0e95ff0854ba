//! Dataset construction, inference orchestration, and evaluation toolkit for
//! mitotic figure detection in histopathology.
//!
//! The pipeline runs around a pluggable external detector:
//!
//! 1. [`manifest`] — canonical dataset model plus a COCO-style annotation importer.
//! 2. [`split`] — deterministic, domain-stratified, case-grouped train/valid/test splits.
//! 3. [`patchset`] — training patch planning (positive / negative / hard-negative)
//!    and inference tile grids, with PNG + NDJSON persistence.
//! 4. [`augment`] — seeded, annotation-aware geometric augmentation.
//! 5. [`orchestrator`] — drives an external detector process pool over a patch
//!    workload via a line-oriented JSON protocol; ships a seeded oracle detector
//!    for end-to-end testing.
//! 6. [`merge`] — lifts patch-frame detections to the slide frame and removes
//!    duplicates from overlapping tiles by radius suppression.
//! 7. [`eval`] — point-matched precision/recall/F1 at a micron radius, AP@0.5,
//!    and per-domain reports.
//!
//! All randomness flows from explicit seeds; every stage is reproducible
//! byte-for-byte given identical inputs.

pub mod augment;
pub mod config;
pub mod error;
pub mod geometry;
pub mod manifest;
pub mod merge;
pub mod metrics;
pub mod orchestrator;
pub mod patchset;
pub mod seeding;
pub mod split;
pub mod synthetic;

pub mod eval {
    //! Re-export of the evaluation surface.
    pub use crate::metrics::*;
}

pub use error::{Error, Result};
pub use geometry::{frame_transform, harmonic_f1, microns_to_pixels, FrameDirection, MppScale, Point2D, Rect};
pub use manifest::{AnnotationLabel, AnnotationRecord, DatasetManifest, RegionLabel, RegionRecord, SlideRecord};
