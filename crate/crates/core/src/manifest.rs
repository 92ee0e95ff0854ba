//! Canonical dataset model, COCO-style annotation import, and manifest persistence.
//!
//! The canonical manifest is a single JSON document with a declared
//! `format_version`; adapters normalize external formats into it so the rest
//! of the pipeline never sees source-format drift.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MppScale, Point2D, Rect};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationLabel {
    MitoticFigure,
    Imposter,
}

impl AnnotationLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnnotationLabel::MitoticFigure => "mitotic_figure",
            AnnotationLabel::Imposter => "imposter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    Necrosis,
    Other,
}

/// One source image region or WSI export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub dataset_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub scale: MppScale,
    /// Tumor type / scanner variant grouping used for stratification and reports.
    pub domain_tag: String,
    /// Patient/case grouping key; split unit. Defaults to slide_id on import.
    pub case_id: String,
}

impl SlideRecord {
    pub fn bounds(&self) -> Rect {
        Rect::new(0.0, 0.0, self.width as f64, self.height as f64).expect("positive slide dims")
    }
}

/// A ground-truth point object in slide pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub ann_id: String,
    pub slide_id: String,
    pub center: Point2D,
    pub label: AnnotationLabel,
    pub source: String,
}

/// An annotated area (e.g. necrosis) used for hard-negative mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: String,
    pub slide_id: String,
    pub bounds: Rect,
    pub region_label: RegionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub slides: Vec<SlideRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub regions: Vec<RegionRecord>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            slides: Vec::new(),
            annotations: Vec::new(),
            regions: Vec::new(),
        }
    }
}

impl DatasetManifest {
    /// Check id uniqueness, referential integrity, and bounds invariants.
    /// Reports the first offending record.
    pub fn validate(&self) -> Result<()> {
        let mut slide_ids = BTreeSet::new();
        for s in &self.slides {
            if s.width == 0 || s.height == 0 {
                return Err(Error::Integrity(format!("slide {} has zero dimension", s.slide_id)));
            }
            if !slide_ids.insert(s.slide_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate slide_id {}", s.slide_id)));
            }
        }
        let by_id: HashMap<&str, &SlideRecord> =
            self.slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.ann_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate ann_id {}", a.ann_id)));
            }
            let slide = by_id.get(a.slide_id.as_str()).ok_or_else(|| {
                Error::Integrity(format!("annotation {} references unknown slide {}", a.ann_id, a.slide_id))
            })?;
            if !slide.bounds().contains(&a.center) {
                return Err(Error::Integrity(format!(
                    "annotation {} center ({}, {}) outside slide {} bounds",
                    a.ann_id, a.center.x, a.center.y, a.slide_id
                )));
            }
        }
        let mut region_ids = BTreeSet::new();
        for r in &self.regions {
            if !region_ids.insert(r.region_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate region_id {}", r.region_id)));
            }
            let slide = by_id.get(r.slide_id.as_str()).ok_or_else(|| {
                Error::Integrity(format!("region {} references unknown slide {}", r.region_id, r.slide_id))
            })?;
            let b = slide.bounds();
            if r.bounds.x < 0.0
                || r.bounds.y < 0.0
                || r.bounds.x + r.bounds.width > b.width
                || r.bounds.y + r.bounds.height > b.height
            {
                return Err(Error::Integrity(format!(
                    "region {} bounds exceed slide {}",
                    r.region_id, r.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    /// Distinct case ids, grouped per domain tag, in slide order.
    pub fn cases_by_domain(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for s in &self.slides {
            if seen.insert(s.case_id.clone()) {
                out.entry(s.domain_tag.clone()).or_default().push(s.case_id.clone());
            }
        }
        out
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&data).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported manifest format_version {}",
            manifest.format_version
        )));
    }
    manifest.validate()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// COCO-style import
// ---------------------------------------------------------------------------

/// Target of a source category mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTarget {
    MitoticFigure,
    Imposter,
    Ignore,
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    #[allow(dead_code)]
    categories: Vec<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default)]
    mpp: Option<f64>,
    #[serde(default, alias = "tumor_type", alias = "domain")]
    domain_tag: Option<String>,
    #[serde(default, alias = "case")]
    case_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: serde_json::Value,
    image_id: serde_json::Value,
    category_id: i64,
    /// [x, y, w, h] box or [x, y] point.
    #[serde(default)]
    bbox: Option<Vec<f64>>,
    #[serde(default)]
    point: Option<Vec<f64>>,
}

/// Outcome counters for an import run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportSummary {
    pub imported: usize,
    pub ignored: usize,
    pub skipped_out_of_bounds: usize,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Import a COCO-like point/box annotation file into canonical records.
///
/// `label_map` maps source category ids to targets; categories mapped to
/// [`LabelTarget::Ignore`] are dropped and counted. Box annotations become
/// box-center points. Annotations outside image bounds are skipped with a
/// counted warning rather than failing the import. Cases default to the
/// slide when the source provides no case grouping.
pub fn import_point_annotations(
    path: &Path,
    dataset_id: &str,
    label_map: &HashMap<i64, LabelTarget>,
    default_mpp: MppScale,
) -> Result<(DatasetManifest, ImportSummary)> {
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile =
        serde_json::from_str(&data).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;

    let mut manifest = DatasetManifest::default();
    let mut summary = ImportSummary::default();

    let mut slide_of_image: HashMap<String, usize> = HashMap::new();
    for img in &coco.images {
        let image_key = id_string(&img.id);
        let slide_id = format!("{dataset_id}/{image_key}");
        let scale = match img.mpp {
            Some(v) => MppScale::new(v)?,
            None => default_mpp,
        };
        slide_of_image.insert(image_key, manifest.slides.len());
        manifest.slides.push(SlideRecord {
            case_id: img.case_id.clone().unwrap_or_else(|| slide_id.clone()),
            slide_id,
            dataset_id: dataset_id.to_string(),
            image_path: img.file_name.clone(),
            width: img.width,
            height: img.height,
            scale,
            domain_tag: img.domain_tag.clone().unwrap_or_else(|| "unknown".to_string()),
        });
    }

    for ann in &coco.annotations {
        let target = label_map.get(&ann.category_id).ok_or_else(|| {
            Error::Parse(format!(
                "annotation {} has unmapped category {}",
                id_string(&ann.id),
                ann.category_id
            ))
        })?;
        let label = match target {
            LabelTarget::Ignore => {
                summary.ignored += 1;
                continue;
            }
            LabelTarget::MitoticFigure => AnnotationLabel::MitoticFigure,
            LabelTarget::Imposter => AnnotationLabel::Imposter,
        };
        let image_key = id_string(&ann.image_id);
        let slide_idx = *slide_of_image.get(&image_key).ok_or_else(|| {
            Error::Parse(format!(
                "annotation {} references unknown image {image_key}",
                id_string(&ann.id)
            ))
        })?;
        let center = match (&ann.bbox, &ann.point) {
            (Some(b), _) if b.len() == 4 => Point2D::new(b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)?,
            (_, Some(p)) if p.len() == 2 => Point2D::new(p[0], p[1])?,
            _ => {
                return Err(Error::Parse(format!(
                    "annotation {} has neither a 4-element bbox nor a 2-element point",
                    id_string(&ann.id)
                )))
            }
        };
        let slide = &manifest.slides[slide_idx];
        if !slide.bounds().contains(&center) {
            summary.skipped_out_of_bounds += 1;
            continue;
        }
        manifest.annotations.push(AnnotationRecord {
            ann_id: format!("{dataset_id}/{}", id_string(&ann.id)),
            slide_id: slide.slide_id.clone(),
            center,
            label,
            source: dataset_id.to_string(),
        });
        summary.imported += 1;
    }

    manifest.validate()?;
    Ok((manifest, summary))
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_slides: usize,
    pub n_cases: usize,
    pub n_annotations: usize,
    pub n_regions: usize,
    pub per_label: BTreeMap<String, usize>,
    pub per_domain: BTreeMap<String, usize>,
    pub per_dataset: BTreeMap<String, usize>,
}

/// Summarize counts per label, per domain tag, and per dataset.
/// Grouped counts always sum to the ungrouped totals.
pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let domain_of: HashMap<&str, &str> = manifest
        .slides
        .iter()
        .map(|s| (s.slide_id.as_str(), s.domain_tag.as_str()))
        .collect();
    let dataset_of: HashMap<&str, &str> = manifest
        .slides
        .iter()
        .map(|s| (s.slide_id.as_str(), s.dataset_id.as_str()))
        .collect();

    let mut stats = DatasetStats {
        n_slides: manifest.slides.len(),
        n_cases: manifest.slides.iter().map(|s| s.case_id.as_str()).collect::<BTreeSet<_>>().len(),
        n_annotations: manifest.annotations.len(),
        n_regions: manifest.regions.len(),
        ..Default::default()
    };
    for a in &manifest.annotations {
        *stats.per_label.entry(a.label.as_str().to_string()).or_default() += 1;
        if let Some(d) = domain_of.get(a.slide_id.as_str()) {
            *stats.per_domain.entry(d.to_string()).or_default() += 1;
        }
        if let Some(d) = dataset_of.get(a.slide_id.as_str()) {
            *stats.per_dataset.entry(d.to_string()).or_default() += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn slide(id: &str, domain: &str, case: &str) -> SlideRecord {
        SlideRecord {
            slide_id: id.to_string(),
            dataset_id: "test".to_string(),
            image_path: format!("{id}.png"),
            width: 1000,
            height: 1000,
            scale: MppScale::new(0.25).unwrap(),
            domain_tag: domain.to_string(),
            case_id: case.to_string(),
        }
    }

    fn ann(id: &str, slide_id: &str, x: f64, y: f64) -> AnnotationRecord {
        AnnotationRecord {
            ann_id: id.to_string(),
            slide_id: slide_id.to_string(),
            center: Point2D::new(x, y).unwrap(),
            label: AnnotationLabel::MitoticFigure,
            source: "test".to_string(),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.json");
        let manifest = DatasetManifest {
            slides: vec![slide("s1", "d1", "c1"), slide("s2", "d2", "c2")],
            annotations: vec![ann("a1", "s1", 10.0, 20.0)],
            ..Default::default()
        };
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn empty_manifest_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&DatasetManifest::default(), &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert!(loaded.slides.is_empty() && loaded.annotations.is_empty());
    }

    #[test]
    fn unknown_slide_reference_rejected() {
        let manifest = DatasetManifest {
            annotations: vec![ann("a1", "ghost", 1.0, 1.0)],
            ..Default::default()
        };
        let err = manifest.validate().unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn out_of_bounds_annotation_rejected() {
        let manifest = DatasetManifest {
            slides: vec![slide("s1", "d", "c")],
            annotations: vec![ann("a1", "s1", 1500.0, 10.0)],
            ..Default::default()
        };
        assert!(manifest.validate().is_err());
    }

    fn write_coco(dir: &Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("coco.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn import_box_center() {
        let dir = tempdir().unwrap();
        let path = write_coco(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"img1.png","width":100,"height":100}],
                "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[10,10,30,30]}],
                "categories":[]}"#,
        );
        let map = HashMap::from([(1, LabelTarget::MitoticFigure)]);
        let (m, summary) = import_point_annotations(&path, "ds", &map, MppScale::new(0.25).unwrap()).unwrap();
        assert_eq!(summary.imported, 1);
        assert_eq!(m.annotations.len(), 1);
        assert_eq!(m.annotations[0].center, Point2D::new(25.0, 25.0).unwrap());
        // no case grouping in the source: case defaults to slide
        assert_eq!(m.slides[0].case_id, m.slides[0].slide_id);
    }

    #[test]
    fn import_ignore_mapping_counts_skip() {
        let dir = tempdir().unwrap();
        let path = write_coco(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"i.png","width":50,"height":50}],
                "annotations":[{"id":1,"image_id":1,"category_id":9,"point":[5,5]}],
                "categories":[]}"#,
        );
        let map = HashMap::from([(9, LabelTarget::Ignore)]);
        let (m, summary) = import_point_annotations(&path, "ds", &map, MppScale::new(0.25).unwrap()).unwrap();
        assert_eq!(m.annotations.len(), 0);
        assert_eq!(summary.ignored, 1);
    }

    #[test]
    fn import_out_of_bounds_skipped_and_counted() {
        let dir = tempdir().unwrap();
        let path = write_coco(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"i.png","width":50,"height":50}],
                "annotations":[{"id":1,"image_id":1,"category_id":1,"point":[500,5]}],
                "categories":[]}"#,
        );
        let map = HashMap::from([(1, LabelTarget::MitoticFigure)]);
        let (m, summary) = import_point_annotations(&path, "ds", &map, MppScale::new(0.25).unwrap()).unwrap();
        assert_eq!(m.annotations.len(), 0);
        assert_eq!(summary.skipped_out_of_bounds, 1);
    }

    #[test]
    fn import_unmapped_category_fails() {
        let dir = tempdir().unwrap();
        let path = write_coco(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"i.png","width":50,"height":50}],
                "annotations":[{"id":1,"image_id":1,"category_id":3,"point":[5,5]}],
                "categories":[]}"#,
        );
        let map = HashMap::from([(1, LabelTarget::MitoticFigure)]);
        assert!(import_point_annotations(&path, "ds", &map, MppScale::new(0.25).unwrap()).is_err());
    }

    #[test]
    fn import_deterministic() {
        let dir = tempdir().unwrap();
        let path = write_coco(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"i.png","width":50,"height":50,"domain":"breast","case":"c7"}],
                "annotations":[{"id":1,"image_id":1,"category_id":1,"point":[5,5]},
                               {"id":2,"image_id":1,"category_id":2,"point":[7,9]}],
                "categories":[]}"#,
        );
        let map = HashMap::from([(1, LabelTarget::MitoticFigure), (2, LabelTarget::Imposter)]);
        let (m1, _) = import_point_annotations(&path, "ds", &map, MppScale::new(0.25).unwrap()).unwrap();
        let (m2, _) = import_point_annotations(&path, "ds", &map, MppScale::new(0.25).unwrap()).unwrap();
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
        assert_eq!(m1.slides[0].domain_tag, "breast");
        assert_eq!(m1.slides[0].case_id, "c7");
    }

    #[test]
    fn stats_empty_manifest() {
        let stats = dataset_stats(&DatasetManifest::default());
        assert_eq!(stats.n_slides, 0);
        assert_eq!(stats.n_annotations, 0);
        assert!(stats.per_label.is_empty());
    }

    #[test]
    fn stats_grouped_counts_sum_to_totals() {
        // 3 slides over 2 domains, 5 annotations; counts checked by hand
        let manifest = DatasetManifest {
            slides: vec![slide("s1", "d1", "c1"), slide("s2", "d1", "c2"), slide("s3", "d2", "c3")],
            annotations: vec![
                ann("a1", "s1", 1.0, 1.0),
                ann("a2", "s1", 2.0, 2.0),
                ann("a3", "s2", 3.0, 3.0),
                ann("a4", "s3", 4.0, 4.0),
                ann("a5", "s3", 5.0, 5.0),
            ],
            ..Default::default()
        };
        let stats = dataset_stats(&manifest);
        assert_eq!(stats.n_slides, 3);
        assert_eq!(stats.n_cases, 3);
        assert_eq!(stats.n_annotations, 5);
        assert_eq!(stats.per_domain["d1"], 3);
        assert_eq!(stats.per_domain["d2"], 2);
        assert_eq!(stats.per_label["mitotic_figure"], 5);
        assert_eq!(stats.per_domain.values().sum::<usize>(), stats.n_annotations);
        assert_eq!(stats.per_label.values().sum::<usize>(), stats.n_annotations);
    }
}
