//! Plan and render training patches (positive, random-negative, hard-negative)
//! and inference tile grids.
//!
//! Planning is pure and seeded; rendering touches pixel buffers. Patch ids are
//! content-derived from (slide_id, origin, size, purpose) so joins across
//! pipeline stages stay stable.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frame_transform, FrameDirection, Point2D, Rect};
use crate::manifest::{AnnotationLabel, AnnotationRecord, DatasetManifest, RegionLabel, SlideRecord};
use crate::seeding::derive_seed;

pub const DEFAULT_PATCH_SIZE: u32 = 380;
pub const DEFAULT_HARD_NEGATIVE_SIZE: u32 = 360;
pub const DEFAULT_HARD_NEGATIVE_COUNT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPurpose {
    Positive,
    Negative,
    HardNegative,
    Tile,
}

impl PatchPurpose {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatchPurpose::Positive => "positive",
            PatchPurpose::Negative => "negative",
            PatchPurpose::HardNegative => "hard_negative",
            PatchPurpose::Tile => "tile",
        }
    }
}

/// An annotation expressed in patch-local coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalAnnotation {
    pub label: AnnotationLabel,
    pub center: Point2D,
}

/// A planned rectangular window on a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_id: String,
    pub slide_id: String,
    /// Slide-frame origin, integer-valued.
    pub origin: Point2D,
    pub width: u32,
    pub height: u32,
    pub purpose: PatchPurpose,
    pub local_annotations: Vec<LocalAnnotation>,
}

impl PatchSpec {
    pub fn new(slide_id: &str, origin: Point2D, width: u32, height: u32, purpose: PatchPurpose) -> Self {
        let patch_id = patch_id_for(slide_id, origin, width, height, purpose);
        PatchSpec {
            patch_id,
            slide_id: slide_id.to_string(),
            origin,
            width,
            height,
            purpose,
            local_annotations: Vec::new(),
        }
    }

    pub fn window(&self) -> Rect {
        Rect::new(self.origin.x, self.origin.y, self.width as f64, self.height as f64)
            .expect("positive patch dims")
    }

    /// Fill local_annotations with every annotation whose center falls inside
    /// the window, remapped to the patch frame.
    pub fn attach_annotations(&mut self, annotations: &[AnnotationRecord]) {
        let window = self.window();
        self.local_annotations = annotations
            .iter()
            .filter(|a| a.slide_id == self.slide_id && window.contains(&a.center))
            .map(|a| LocalAnnotation {
                label: a.label,
                center: frame_transform(a.center, self.origin, FrameDirection::ToPatch),
            })
            .collect();
    }
}

/// Content-derived patch id, filesystem-safe.
pub fn patch_id_for(slide_id: &str, origin: Point2D, width: u32, height: u32, purpose: PatchPurpose) -> String {
    let slug: String = slide_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let disambig = derive_seed(0, slide_id, 0) & 0xffff_ffff;
    format!(
        "{slug}-{disambig:08x}_{}_{}_{}x{}_{}",
        origin.x as i64,
        origin.y as i64,
        width,
        height,
        purpose.as_str()
    )
}

/// Planned patches plus counted warnings from the planner.
#[derive(Debug, Clone, Default)]
pub struct PlanReport {
    pub patches: Vec<PatchSpec>,
    pub warnings: Vec<String>,
}

fn clamp_origin(value: f64, size: u32, limit: u32) -> f64 {
    let max = (limit - size) as f64;
    value.round().clamp(0.0, max)
}

/// One annotation-centered patch per mitotic figure, with seeded jitter,
/// clamped into slide bounds. Slides smaller than the patch are reported and
/// their annotations skipped.
pub fn plan_positive_patches(
    manifest: &DatasetManifest,
    size: u32,
    jitter_max: u32,
    seed: u64,
) -> Result<PlanReport> {
    let slides: HashMap<&str, &SlideRecord> =
        manifest.slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let mut report = PlanReport::default();
    for ann in &manifest.annotations {
        if ann.label != AnnotationLabel::MitoticFigure {
            continue;
        }
        let slide = slides[ann.slide_id.as_str()];
        if slide.width < size || slide.height < size {
            report.warnings.push(format!(
                "slide {} ({}x{}) smaller than patch size {size}; annotation {} skipped",
                slide.slide_id, slide.width, slide.height, ann.ann_id
            ));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &ann.ann_id, 0));
        let half = size as f64 / 2.0;
        let (jx, jy) = if jitter_max == 0 {
            (0.0, 0.0)
        } else {
            let j = jitter_max as f64;
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        };
        let origin = Point2D {
            x: clamp_origin(ann.center.x - half + jx, size, slide.width),
            y: clamp_origin(ann.center.y - half + jy, size, slide.height),
        };
        let mut spec = PatchSpec::new(&slide.slide_id, origin, size, size, PatchPurpose::Positive);
        spec.attach_annotations(&manifest.annotations);
        report.patches.push(spec);
    }
    Ok(report)
}

const NEGATIVE_ATTEMPT_FACTOR: usize = 200;

/// Seeded uniform background windows whose centers stay at least
/// `min_distance` from every mitotic figure. Rejection sampling with a
/// bounded attempt budget; may return fewer than requested with a warning.
pub fn plan_negative_patches(
    manifest: &DatasetManifest,
    size: u32,
    count: usize,
    min_distance: f64,
    seed: u64,
) -> Result<PlanReport> {
    let mut report = PlanReport::default();
    if count == 0 {
        return Ok(report);
    }
    let eligible: Vec<&SlideRecord> = manifest
        .slides
        .iter()
        .filter(|s| s.width >= size && s.height >= size)
        .collect();
    if eligible.is_empty() {
        report.warnings.push("no slide large enough for negative patches".into());
        return Ok(report);
    }
    let positives: HashMap<&str, Vec<Point2D>> = {
        let mut m: HashMap<&str, Vec<Point2D>> = HashMap::new();
        for a in &manifest.annotations {
            if a.label == AnnotationLabel::MitoticFigure {
                m.entry(a.slide_id.as_str()).or_default().push(a.center);
            }
        }
        m
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "negative", 0));
    let budget = count * NEGATIVE_ATTEMPT_FACTOR;
    let mut attempts = 0;
    while report.patches.len() < count && attempts < budget {
        attempts += 1;
        let slide = eligible[rng.gen_range(0..eligible.len())];
        let ox = rng.gen_range(0..=(slide.width - size)) as f64;
        let oy = rng.gen_range(0..=(slide.height - size)) as f64;
        let center = Point2D { x: ox + size as f64 / 2.0, y: oy + size as f64 / 2.0 };
        let too_close = positives
            .get(slide.slide_id.as_str())
            .map(|pts| pts.iter().any(|p| p.distance(&center) < min_distance))
            .unwrap_or(false);
        if too_close {
            continue;
        }
        let mut spec = PatchSpec::new(
            &slide.slide_id,
            Point2D { x: ox, y: oy },
            size,
            size,
            PatchPurpose::Negative,
        );
        spec.attach_annotations(&manifest.annotations);
        report.patches.push(spec);
    }
    if report.patches.len() < count {
        report.warnings.push(format!(
            "negative sampling budget exhausted: planned {} of {count}",
            report.patches.len()
        ));
    }
    Ok(report)
}

/// Center-crop patches from necrosis regions for hard-negative mining.
/// Regions smaller than the crop are skipped; when more than `n` qualify a
/// seeded sample without replacement is taken.
pub fn mine_hard_negative_patches(
    manifest: &DatasetManifest,
    n: usize,
    size: u32,
    seed: u64,
) -> Result<PlanReport> {
    let slides: HashMap<&str, &SlideRecord> =
        manifest.slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let mut report = PlanReport::default();
    let mut qualifying = Vec::new();
    let mut n_necrosis = 0;
    for region in &manifest.regions {
        if region.region_label != RegionLabel::Necrosis {
            continue;
        }
        n_necrosis += 1;
        if region.bounds.width < size as f64 || region.bounds.height < size as f64 {
            continue;
        }
        qualifying.push(region);
    }
    if n_necrosis == 0 {
        report.warnings.push("no necrosis regions in manifest".into());
        return Ok(report);
    }
    qualifying.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    if qualifying.len() > n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "hard_negative", 0));
        qualifying.shuffle(&mut rng);
        qualifying.truncate(n);
        qualifying.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    } else if qualifying.len() < n {
        report.warnings.push(format!(
            "only {} of {n} requested hard-negative regions qualify",
            qualifying.len()
        ));
    }
    for region in qualifying {
        let slide = slides[region.slide_id.as_str()];
        let center = region.bounds.center();
        let origin = Point2D {
            x: clamp_origin(center.x - size as f64 / 2.0, size, slide.width),
            y: clamp_origin(center.y - size as f64 / 2.0, size, slide.height),
        };
        let mut spec =
            PatchSpec::new(&slide.slide_id, origin, size, size, PatchPurpose::HardNegative);
        spec.attach_annotations(&manifest.annotations);
        report.patches.push(spec);
    }
    Ok(report)
}

/// A sliding-window grid covering a region of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub roi: Rect,
    pub tile_size: u32,
    pub overlap: u32,
    pub tiles: Vec<PatchSpec>,
}

/// Axis origins at stride (tile_size - overlap); a final origin clamped to
/// (end - tile_size) is appended when the stride grid stops short of the end.
fn axis_origins(start: f64, extent: f64, tile_size: u32, overlap: u32) -> Vec<f64> {
    let stride = (tile_size - overlap) as f64;
    let size = tile_size as f64;
    let end = start + extent;
    let mut origins = Vec::new();
    let mut o = start;
    while o + size <= end {
        origins.push(o);
        o += stride;
    }
    let last = *origins.last().expect("tile fits: checked by caller");
    if last + size < end {
        origins.push(end - size);
    }
    origins
}

/// Plan an overlapping tile grid over the ROI.
pub fn plan_tile_grid(slide_id: &str, roi: Rect, tile_size: u32, overlap: u32) -> Result<TilePlan> {
    if overlap >= tile_size {
        return Err(Error::InvalidValue(format!(
            "overlap {overlap} must be < tile_size {tile_size}"
        )));
    }
    if roi.width < tile_size as f64 || roi.height < tile_size as f64 {
        return Err(Error::InvalidValue(format!(
            "roi {}x{} smaller than tile size {tile_size}",
            roi.width, roi.height
        )));
    }
    let xs = axis_origins(roi.x, roi.width, tile_size, overlap);
    let ys = axis_origins(roi.y, roi.height, tile_size, overlap);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push(PatchSpec::new(
                slide_id,
                Point2D { x, y },
                tile_size,
                tile_size,
                PatchPurpose::Tile,
            ));
        }
    }
    Ok(TilePlan { roi, tile_size, overlap, tiles })
}

/// Crop a patch out of a slide image and remap its annotations.
pub fn render_patch(
    image: &RgbImage,
    spec: &PatchSpec,
    annotations: &[AnnotationRecord],
) -> Result<(RgbImage, Vec<LocalAnnotation>)> {
    let (ox, oy) = (spec.origin.x, spec.origin.y);
    if ox < 0.0
        || oy < 0.0
        || ox as u32 + spec.width > image.width()
        || oy as u32 + spec.height > image.height()
    {
        return Err(Error::InvalidValue(format!(
            "patch {} exceeds image bounds {}x{}",
            spec.patch_id,
            image.width(),
            image.height()
        )));
    }
    let crop = image::imageops::crop_imm(image, ox as u32, oy as u32, spec.width, spec.height)
        .to_image();
    let window = spec.window();
    let locals = annotations
        .iter()
        .filter(|a| a.slide_id == spec.slide_id && window.contains(&a.center))
        .map(|a| LocalAnnotation {
            label: a.label,
            center: frame_transform(a.center, spec.origin, FrameDirection::ToPatch),
        })
        .collect();
    Ok((crop, locals))
}

// ---------------------------------------------------------------------------
// Persistence: a directory of PNG patch images plus an NDJSON index.
// ---------------------------------------------------------------------------

pub const PATCH_INDEX_FILE: &str = "index.ndjson";

pub fn save_patch_index(specs: &[PatchSpec], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(PATCH_INDEX_FILE);
    let mut out = Vec::new();
    for spec in specs {
        serde_json::to_writer(&mut out, spec).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(&path, out).map_err(|e| Error::io(path, e))
}

pub fn load_patch_index(dir: &Path) -> Result<Vec<PatchSpec>> {
    let path = dir.join(PATCH_INDEX_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut specs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        specs.push(serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(specs)
}

/// Render every spec from its slide image and write PNG + index into `dir`.
pub fn render_patchset(manifest: &DatasetManifest, specs: &[PatchSpec], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cache: HashMap<&str, RgbImage> = HashMap::new();
    for spec in specs {
        let slide = manifest
            .slide(&spec.slide_id)
            .ok_or_else(|| Error::Integrity(format!("patch {} references unknown slide", spec.patch_id)))?;
        if !cache.contains_key(spec.slide_id.as_str()) {
            let img = image::open(&slide.image_path)
                .map_err(|e| Error::Image(format!("{}: {e}", slide.image_path)))?
                .to_rgb8();
            cache.insert(spec.slide_id.as_str(), img);
        }
        let img = &cache[spec.slide_id.as_str()];
        let (crop, _) = render_patch(img, spec, &manifest.annotations)?;
        let out = dir.join(format!("{}.png", spec.patch_id));
        crop.save(&out).map_err(|e| Error::Image(format!("{}: {e}", out.display())))?;
    }
    save_patch_index(specs, dir)
}

/// Write a spec's pixels to `dir` from an in-memory image (test support and
/// synthetic pipelines).
pub fn save_patch_image(image: &RgbImage, spec: &PatchSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = dir.join(format!("{}.png", spec.patch_id));
    image
        .save(&out)
        .map_err(|e| Error::Image(format!("{}: {e}", out.display())))
}
