//! Synthetic single-slide fixtures for end-to-end runs without real data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{MppScale, Point2D};
use crate::manifest::{AnnotationLabel, AnnotationRecord, DatasetManifest, SlideRecord};

/// One synthetic slide with seeded planted annotations kept at least
/// `min_separation` pixels apart (rejection sampling).
pub fn synthetic_manifest(
    width: u32,
    height: u32,
    n_annotations: usize,
    min_separation: f64,
    mpp: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let slide = SlideRecord {
        slide_id: "synthetic-0".into(),
        dataset_id: "synthetic".into(),
        image_path: "synthetic-0.png".into(),
        width,
        height,
        scale: MppScale::new(mpp)?,
        domain_tag: "synthetic".into(),
        case_id: "synthetic-case-0".into(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Point2D> = Vec::with_capacity(n_annotations);
    let budget = n_annotations * 1000;
    let mut attempts = 0;
    while centers.len() < n_annotations {
        attempts += 1;
        if attempts > budget {
            return Err(Error::InvalidValue(format!(
                "could not place {n_annotations} points {min_separation} px apart on {width}x{height}"
            )));
        }
        let candidate = Point2D {
            x: rng.gen_range(0.0..width as f64),
            y: rng.gen_range(0.0..height as f64),
        };
        if centers.iter().all(|c| c.distance(&candidate) >= min_separation) {
            centers.push(candidate);
        }
    }
    let annotations = centers
        .into_iter()
        .enumerate()
        .map(|(i, center)| AnnotationRecord {
            ann_id: format!("syn-{i:04}"),
            slide_id: slide.slide_id.clone(),
            center,
            label: AnnotationLabel::MitoticFigure,
            source: "synthetic".into(),
        })
        .collect();
    let manifest = DatasetManifest {
        slides: vec![slide],
        annotations,
        ..Default::default()
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plants_requested_count_with_separation() {
        let m = synthetic_manifest(4000, 4000, 200, 80.0, 0.25, 1).unwrap();
        assert_eq!(m.annotations.len(), 200);
        for (i, a) in m.annotations.iter().enumerate() {
            for b in &m.annotations[i + 1..] {
                assert!(a.center.distance(&b.center) >= 80.0);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthetic_manifest(1000, 1000, 20, 50.0, 0.25, 7).unwrap();
        let b = synthetic_manifest(1000, 1000, 20, 50.0, 0.25, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_packing_rejected() {
        assert!(synthetic_manifest(100, 100, 1000, 50.0, 0.25, 1).is_err());
    }
}
