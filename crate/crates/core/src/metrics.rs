//! Point-matched detection evaluation: precision/recall/F1 at a micron
//! radius, AP@0.5 over derived boxes, and per-domain reports.
//!
//! Greedy score-ordered matching is the primary mode; maximum-cardinality
//! bipartite matching is available as an audit mode to quantify the gap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{harmonic_f1, microns_to_pixels, Point2D, Rect};
use crate::manifest::{AnnotationLabel, AnnotationRecord, DatasetManifest};
use crate::merge::SlideDetection;
use crate::split::{Split, SplitAssignment};

pub const DEFAULT_MATCH_RADIUS_MICRONS: f64 = 7.5;
pub const DEFAULT_BOX_HALF_SIZE: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricTriple {
    /// Precision/recall/F1 from counts with the degenerate conventions:
    /// precision is 1 when nothing was predicted and nothing was missed,
    /// 0 when nothing was predicted but ground truth exists; recall is 1
    /// when there is no ground truth.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> MetricTriple {
        let precision = if tp + fp == 0 {
            if fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = harmonic_f1(precision, recall).expect("ratios in range");
        MetricTriple { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Greedy,
    Optimal,
}

/// One matched (detection, annotation) pair with its distance in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    /// Index into the detection list as passed in.
    pub detection_index: usize,
    pub ann_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchPair>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub radius: f64,
    pub mode: MatchMode,
}

/// Canonical visiting order: score desc, then x, then y, then provenance.
fn detection_order(detections: &[SlideDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then_with(|| da.center.x.partial_cmp(&db.center.x).unwrap())
            .then_with(|| da.center.y.partial_cmp(&db.center.y).unwrap())
            .then_with(|| da.provenance.cmp(&db.provenance))
    });
    order
}

/// Greedy point matching: detections visited in canonical score order, each
/// takes its nearest unmatched annotation within `radius` (distance ties
/// broken by annotation id). Unmatched detections are FP, unmatched
/// annotations FN.
pub fn greedy_match(
    detections: &[SlideDetection],
    annotations: &[AnnotationRecord],
    radius: f64,
) -> MatchOutcome {
    let mut taken = vec![false; annotations.len()];
    let mut pairs = Vec::new();
    for det_idx in detection_order(detections) {
        let det = &detections[det_idx];
        let mut best: Option<(f64, usize)> = None;
        for (i, ann) in annotations.iter().enumerate() {
            if taken[i] || ann.slide_id != det.slide_id {
                continue;
            }
            let dist = det.center.distance(&ann.center);
            if dist > radius {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bi)) => {
                    dist < bd || (dist == bd && ann.ann_id < annotations[bi].ann_id)
                }
            };
            if better {
                best = Some((dist, i));
            }
        }
        if let Some((dist, i)) = best {
            taken[i] = true;
            pairs.push(MatchPair {
                detection_index: det_idx,
                ann_id: annotations[i].ann_id.clone(),
                distance: dist,
            });
        }
    }
    let tp = pairs.len();
    MatchOutcome {
        tp,
        fp: detections.len() - tp,
        fn_: annotations.len() - tp,
        pairs,
        radius,
        mode: MatchMode::Greedy,
    }
}

/// Maximum-cardinality bipartite matching over edges with distance <= radius
/// (Kuhn's augmenting paths). Detections are seeded in score order, which
/// biases ties toward higher-scored detections; cardinality is the contract.
pub fn optimal_match(
    detections: &[SlideDetection],
    annotations: &[AnnotationRecord],
    radius: f64,
) -> MatchOutcome {
    let adjacency: Vec<Vec<usize>> = detections
        .iter()
        .map(|det| {
            let mut edges: Vec<(f64, usize)> = annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.slide_id == det.slide_id)
                .filter_map(|(i, a)| {
                    let dist = det.center.distance(&a.center);
                    (dist <= radius).then_some((dist, i))
                })
                .collect();
            edges.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            edges.into_iter().map(|(_, i)| i).collect()
        })
        .collect();

    // match_of[ann] = detection index
    let mut match_of: Vec<Option<usize>> = vec![None; annotations.len()];

    fn try_augment(
        det: usize,
        adjacency: &[Vec<usize>],
        match_of: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &ann in &adjacency[det] {
            if visited[ann] {
                continue;
            }
            visited[ann] = true;
            if match_of[ann].is_none()
                || try_augment(match_of[ann].unwrap(), adjacency, match_of, visited)
            {
                match_of[ann] = Some(det);
                return true;
            }
        }
        false
    }

    for det_idx in detection_order(detections) {
        let mut visited = vec![false; annotations.len()];
        try_augment(det_idx, &adjacency, &mut match_of, &mut visited);
    }

    let mut pairs: Vec<MatchPair> = match_of
        .iter()
        .enumerate()
        .filter_map(|(ann, det)| {
            det.map(|d| MatchPair {
                detection_index: d,
                ann_id: annotations[ann].ann_id.clone(),
                distance: detections[d].center.distance(&annotations[ann].center),
            })
        })
        .collect();
    pairs.sort_by_key(|p| p.detection_index);
    let tp = pairs.len();
    MatchOutcome {
        tp,
        fp: detections.len() - tp,
        fn_: annotations.len() - tp,
        pairs,
        radius,
        mode: MatchMode::Optimal,
    }
}

/// Metrics from a match outcome.
pub fn prf(outcome: &MatchOutcome) -> MetricTriple {
    MetricTriple::from_counts(outcome.tp, outcome.fp, outcome.fn_)
}

// ---------------------------------------------------------------------------
// AP@IoU over derived boxes
// ---------------------------------------------------------------------------

fn centered_box(center: Point2D, half: f64) -> Rect {
    Rect::new(center.x - half, center.y - half, 2.0 * half, 2.0 * half).expect("half > 0")
}

/// Average precision at a single IoU threshold over boxes derived from point
/// centers. Detections are swept in score-descending order; a detection is TP
/// when its best-IoU unmatched annotation reaches the threshold. AP is the
/// area under the PR curve with the precision envelope (all-points
/// interpolation).
pub fn ap_at_iou(
    detections: &[SlideDetection],
    annotations: &[AnnotationRecord],
    iou_threshold: f64,
    box_half_size: f64,
) -> Result<f64> {
    if box_half_size <= 0.0 {
        return Err(Error::InvalidValue("box_half_size must be > 0".into()));
    }
    if annotations.is_empty() {
        return Ok(if detections.is_empty() { 1.0 } else { 0.0 });
    }
    let gt_boxes: Vec<(usize, Rect)> = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| (i, centered_box(a.center, box_half_size)))
        .collect();
    let mut taken = vec![false; annotations.len()];
    let mut is_tp = Vec::with_capacity(detections.len());
    for det_idx in detection_order(detections) {
        let det = &detections[det_idx];
        let dbox = centered_box(det.center, box_half_size);
        let best = gt_boxes
            .iter()
            .filter(|(i, _)| !taken[*i] && annotations[*i].slide_id == det.slide_id)
            .map(|(i, b)| (*i, dbox.iou(b)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        match best {
            Some((i, iou)) if iou >= iou_threshold => {
                taken[i] = true;
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    // PR points along the ranked sweep
    let n_gt = annotations.len() as f64;
    let mut tp = 0.0;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(is_tp.len()); // (recall, precision)
    for (rank, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        points.push((tp / n_gt, tp / (rank as f64 + 1.0)));
    }
    // precision envelope from the right, then sum recall increments
    let mut envelope = points.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in envelope {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub metrics: MetricTriple,
}

impl GroupMetrics {
    fn from_counts(n_gt: usize, tp: usize, fp: usize, fn_: usize) -> GroupMetrics {
        GroupMetrics { n_gt, tp, fp, fn_, metrics: MetricTriple::from_counts(tp, fp, fn_) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub overall: GroupMetrics,
    pub per_domain: BTreeMap<String, GroupMetrics>,
    pub per_slide: BTreeMap<String, GroupMetrics>,
    pub operating_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&data).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub radius_microns: f64,
    pub threshold: f64,
    /// Restrict to slides whose case falls in this split.
    pub split: Option<Split>,
    /// Annotation labels treated as ignore regions: they are not ground
    /// truth, and detections within radius of one are discarded before
    /// FP counting.
    pub ignore_labels: Vec<AnnotationLabel>,
    /// When set, AP at IoU 0.5 over boxes of this half-size is added.
    pub ap_box_half_size: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            radius_microns: DEFAULT_MATCH_RADIUS_MICRONS,
            threshold: 0.0,
            split: None,
            ignore_labels: Vec::new(),
            ap_box_half_size: None,
        }
    }
}

/// Match detections against manifest ground truth slide by slide (radius
/// converted per slide from microns) and micro-aggregate counts overall and
/// per domain tag.
pub fn evaluate(
    detections: &[SlideDetection],
    manifest: &DatasetManifest,
    assignment: Option<&SplitAssignment>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let split_of_case = assignment.map(|a| &a.assignments);
    let mut per_slide = BTreeMap::new();
    let mut per_domain: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    let mut overall = [0usize; 4]; // n_gt, tp, fp, fn
    let mut ap_dets = Vec::new();
    let mut ap_gt = Vec::new();

    for slide in &manifest.slides {
        if let Some(split) = options.split {
            let in_split = split_of_case
                .and_then(|m| m.get(&slide.case_id))
                .map(|s| *s == split)
                .unwrap_or(false);
            if !in_split {
                continue;
            }
        }
        let radius = microns_to_pixels(options.radius_microns, slide.scale)?;
        let mut slide_dets: Vec<SlideDetection> = detections
            .iter()
            .filter(|d| d.slide_id == slide.slide_id && d.score >= options.threshold)
            .cloned()
            .collect();
        let ground_truth: Vec<AnnotationRecord> = manifest
            .annotations
            .iter()
            .filter(|a| a.slide_id == slide.slide_id && a.label == AnnotationLabel::MitoticFigure)
            .cloned()
            .collect();
        if !options.ignore_labels.is_empty() {
            let ignored: Vec<AnnotationRecord> = manifest
                .annotations
                .iter()
                .filter(|a| a.slide_id == slide.slide_id && options.ignore_labels.contains(&a.label))
                .cloned()
                .collect();
            slide_dets.retain(|d| {
                !ignored.iter().any(|a| a.center.distance(&d.center) <= radius)
            });
        }
        let outcome = greedy_match(&slide_dets, &ground_truth, radius);
        let counts = [ground_truth.len(), outcome.tp, outcome.fp, outcome.fn_];
        per_slide.insert(
            slide.slide_id.clone(),
            GroupMetrics::from_counts(counts[0], counts[1], counts[2], counts[3]),
        );
        let domain = per_domain.entry(slide.domain_tag.clone()).or_default();
        for i in 0..4 {
            domain[i] += counts[i];
            overall[i] += counts[i];
        }
        if options.ap_box_half_size.is_some() {
            ap_dets.extend(slide_dets);
            ap_gt.extend(ground_truth);
        }
    }

    let ap50 = match options.ap_box_half_size {
        Some(half) => Some(ap_at_iou(&ap_dets, &ap_gt, 0.5, half)?),
        None => None,
    };
    Ok(EvalReport {
        split: options.split.map(|s| s.as_str().to_string()).unwrap_or_else(|| "all".into()),
        overall: GroupMetrics::from_counts(overall[0], overall[1], overall[2], overall[3]),
        per_domain: per_domain
            .into_iter()
            .map(|(k, c)| (k, GroupMetrics::from_counts(c[0], c[1], c[2], c[3])))
            .collect(),
        per_slide,
        operating_threshold: options.threshold,
        ap50,
    })
}

/// Fixed-width human-readable table for an evaluation report.
pub fn render_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<8} {:<20} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "split", "domain", "n_gt", "tp", "fp", "fn", "precision", "recall", "f1"
    )
    .unwrap();
    let mut row = |domain: &str, g: &GroupMetrics| {
        writeln!(
            out,
            "{:<8} {:<20} {:>8} {:>8} {:>8} {:>8} {:>10.4} {:>10.4} {:>10.4}",
            report.split,
            domain,
            g.n_gt,
            g.tp,
            g.fp,
            g.fn_,
            g.metrics.precision,
            g.metrics.recall,
            g.metrics.f1
        )
        .unwrap();
    };
    for (domain, g) in &report.per_domain {
        row(domain, g);
    }
    row("OVERALL", &report.overall);
    if let Some(ap) = report.ap50 {
        writeln!(out, "ap@0.5: {ap:.4}").unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub metrics: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Threshold with the highest F1 (first on ties).
    pub best_threshold: f64,
}

/// F1 across a grid of operating thresholds. Recall is non-increasing in the
/// threshold.
pub fn threshold_sweep(
    detections: &[SlideDetection],
    manifest: &DatasetManifest,
    radius_microns: f64,
    thresholds: &[f64],
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(Error::InvalidValue("threshold grid must be non-empty".into()));
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let options = EvalOptions { radius_microns, threshold, ..Default::default() };
        let report = evaluate(detections, manifest, None, &options)?;
        points.push(SweepPoint { threshold, metrics: report.overall.metrics });
    }
    let best_threshold = points
        .iter()
        .max_by(|a, b| a.metrics.f1.partial_cmp(&b.metrics.f1).unwrap())
        .map(|p| p.threshold)
        .unwrap();
    Ok(SweepResult { points, best_threshold })
}
