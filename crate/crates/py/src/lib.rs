//! Python bindings over the core toolkit. Points travel as plain tuples:
//! detections as (x, y, score), annotations as (x, y).

use std::collections::HashMap;
use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mitokit::geometry::{MppScale, Point2D, Rect};
use mitokit::manifest::{
    dataset_stats, load_manifest, AnnotationLabel, AnnotationRecord, DatasetManifest, SlideRecord,
};
use mitokit::merge::SlideDetection;
use mitokit::metrics::{ap_at_iou, greedy_match, optimal_match};
use mitokit::orchestrator::{oracle_detector, OracleParams};
use mitokit::split::{stratified_split, SplitRatios};
use mitokit::synthetic::synthetic_manifest;

fn err(e: mitokit::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn dets(points: &[(f64, f64, f64)]) -> Vec<SlideDetection> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y, score))| SlideDetection {
            slide_id: "py".into(),
            center: Point2D { x, y },
            score,
            label: AnnotationLabel::MitoticFigure,
            provenance: format!("py-{i}"),
        })
        .collect()
}

fn anns(points: &[(f64, f64)]) -> Vec<AnnotationRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| AnnotationRecord {
            ann_id: format!("py-{i}"),
            slide_id: "py".into(),
            center: Point2D { x, y },
            label: AnnotationLabel::MitoticFigure,
            source: "py".into(),
        })
        .collect()
}

#[pyfunction]
fn harmonic_f1(precision: f64, recall: f64) -> PyResult<f64> {
    mitokit::geometry::harmonic_f1(precision, recall).map_err(err)
}

#[pyfunction]
fn microns_to_pixels(microns: f64, mpp: f64) -> PyResult<f64> {
    let scale = MppScale::new(mpp).map_err(err)?;
    mitokit::geometry::microns_to_pixels(microns, scale).map_err(err)
}

#[pyfunction]
fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    mitokit::seeding::derive_seed(base, tag, index)
}

/// Tile origins for a (width, height) region as a list of (x, y).
#[pyfunction]
fn plan_tile_grid(
    width: f64,
    height: f64,
    tile_size: u32,
    overlap: u32,
) -> PyResult<Vec<(f64, f64)>> {
    let roi = Rect::new(0.0, 0.0, width, height).map_err(err)?;
    let plan = mitokit::patchset::plan_tile_grid("py", roi, tile_size, overlap).map_err(err)?;
    Ok(plan.tiles.iter().map(|t| (t.origin.x, t.origin.y)).collect())
}

/// Greedy radius suppression over (x, y, score) detections.
#[pyfunction]
fn radius_suppress(detections: Vec<(f64, f64, f64)>, radius: f64) -> PyResult<Vec<(f64, f64, f64)>> {
    let kept = mitokit::merge::radius_suppress(&dets(&detections), radius).map_err(err)?;
    Ok(kept.into_iter().map(|d| (d.center.x, d.center.y, d.score)).collect())
}

/// Point matching at a pixel radius; mode is "greedy" or "optimal".
/// Returns (tp, fp, fn).
#[pyfunction]
#[pyo3(signature = (detections, annotations, radius, mode = "greedy"))]
fn match_points(
    detections: Vec<(f64, f64, f64)>,
    annotations: Vec<(f64, f64)>,
    radius: f64,
    mode: &str,
) -> PyResult<(usize, usize, usize)> {
    let d = dets(&detections);
    let a = anns(&annotations);
    let outcome = match mode {
        "greedy" => greedy_match(&d, &a, radius),
        "optimal" => optimal_match(&d, &a, radius),
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    Ok((outcome.tp, outcome.fp, outcome.fn_))
}

/// AP at an IoU threshold over boxes derived from point centers.
#[pyfunction]
#[pyo3(signature = (detections, annotations, iou_threshold = 0.5, box_half_size = 25.0))]
fn average_precision(
    detections: Vec<(f64, f64, f64)>,
    annotations: Vec<(f64, f64)>,
    iou_threshold: f64,
    box_half_size: f64,
) -> PyResult<f64> {
    ap_at_iou(&dets(&detections), &anns(&annotations), iou_threshold, box_half_size).map_err(err)
}

/// Stratified case split: cases as (case_id, domain_tag) pairs.
/// Returns {case_id: "train" | "valid" | "test"}.
#[pyfunction]
#[pyo3(signature = (cases, seed, ratios = (0.7, 0.15, 0.15)))]
fn split_cases(
    cases: Vec<(String, String)>,
    seed: u64,
    ratios: (f64, f64, f64),
) -> PyResult<HashMap<String, String>> {
    let ratios = SplitRatios::new(ratios.0, ratios.1, ratios.2).map_err(err)?;
    let slides = cases
        .iter()
        .enumerate()
        .map(|(i, (case_id, domain))| SlideRecord {
            slide_id: format!("py-{i}"),
            dataset_id: "py".into(),
            image_path: format!("py-{i}.png"),
            width: 1,
            height: 1,
            scale: MppScale::new(0.25).unwrap(),
            domain_tag: domain.clone(),
            case_id: case_id.clone(),
        })
        .collect();
    let manifest = DatasetManifest { slides, ..Default::default() };
    let assignment = stratified_split(&manifest, ratios, seed).map_err(err)?;
    Ok(assignment
        .assignments
        .into_iter()
        .map(|(case, split)| (case, split.as_str().to_string()))
        .collect())
}

/// Dataset summary for a saved manifest, as a JSON string.
#[pyfunction]
fn manifest_stats_json(path: &str) -> PyResult<String> {
    let manifest = load_manifest(Path::new(path)).map_err(err)?;
    serde_json::to_string(&dataset_stats(&manifest)).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Synthetic tile-and-evaluate run with the noisy oracle detector.
/// Returns (precision, recall, f1).
#[pyfunction]
#[pyo3(signature = (width = 2000, n_annotations = 50, drop_rate = 0.0, fp_rate = 0.0, seed = 0))]
fn synthetic_end_to_end(
    width: u32,
    n_annotations: usize,
    drop_rate: f64,
    fp_rate: f64,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let manifest = synthetic_manifest(width, width, n_annotations, 80.0, 0.25, seed).map_err(err)?;
    let roi = Rect::new(0.0, 0.0, width as f64, width as f64).map_err(err)?;
    let mut plan = mitokit::patchset::plan_tile_grid("synthetic-0", roi, 380, 76).map_err(err)?;
    for tile in &mut plan.tiles {
        tile.attach_annotations(&manifest.annotations);
    }
    let params = OracleParams { jitter_sigma: 0.0, drop_rate, fp_rate, seed };
    let patch_dets = oracle_detector(&plan.tiles, &params).map_err(err)?;
    let lifted = mitokit::merge::lift_to_slide(&patch_dets, &plan.tiles).map_err(err)?;
    let merged = mitokit::merge::radius_suppress(&lifted, 30.0).map_err(err)?;
    let report = mitokit::metrics::evaluate(
        &merged,
        &manifest,
        None,
        &mitokit::metrics::EvalOptions::default(),
    )
    .map_err(err)?;
    let m = report.overall.metrics;
    Ok((m.precision, m.recall, m.f1))
}

#[pymodule]
fn mitokit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(harmonic_f1, m)?)?;
    m.add_function(wrap_pyfunction!(microns_to_pixels, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(plan_tile_grid, m)?)?;
    m.add_function(wrap_pyfunction!(radius_suppress, m)?)?;
    m.add_function(wrap_pyfunction!(match_points, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(split_cases, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_stats_json, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_end_to_end, m)?)?;
    Ok(())
}
