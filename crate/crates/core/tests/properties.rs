//! Property tests over generated instances.

use proptest::prelude::*;

use mitokit::geometry::{frame_transform, FrameDirection, MppScale, Point2D};
use mitokit::manifest::{
    dataset_stats, load_manifest, save_manifest, AnnotationLabel, AnnotationRecord,
    DatasetManifest, SlideRecord,
};
use mitokit::merge::{radius_suppress, radius_suppress_naive, SlideDetection};
use mitokit::metrics::{greedy_match, optimal_match, threshold_sweep};
use mitokit::patchset::plan_positive_patches;

fn slide(id: usize, domain: usize, w: u32, h: u32) -> SlideRecord {
    SlideRecord {
        slide_id: format!("s{id}"),
        dataset_id: "prop".into(),
        image_path: format!("s{id}.png"),
        width: w,
        height: h,
        scale: MppScale::new(0.25).unwrap(),
        domain_tag: format!("d{domain}"),
        case_id: format!("c{id}"),
    }
}

prop_compose! {
    fn arb_manifest()(
        n_slides in 1usize..4,
        dims in prop::collection::vec((500u32..2000, 500u32..2000), 4),
        anns in prop::collection::vec((0usize..4, 0.0f64..1.0, 0.0f64..1.0, prop::bool::ANY), 0..20),
    ) -> DatasetManifest {
        let slides: Vec<SlideRecord> = (0..n_slides)
            .map(|i| slide(i, i % 2, dims[i].0, dims[i].1))
            .collect();
        let annotations = anns
            .iter()
            .enumerate()
            .filter(|(_, (s, _, _, _))| *s < n_slides)
            .map(|(i, (s, fx, fy, positive))| AnnotationRecord {
                ann_id: format!("a{i}"),
                slide_id: format!("s{s}"),
                center: Point2D {
                    x: fx * (slides[*s].width as f64 - 1.0),
                    y: fy * (slides[*s].height as f64 - 1.0),
                },
                label: if *positive { AnnotationLabel::MitoticFigure } else { AnnotationLabel::Imposter },
                source: "prop".into(),
            })
            .collect();
        DatasetManifest { slides, annotations, ..Default::default() }
    }
}

proptest! {
    #[test]
    fn manifest_round_trip_lossless(m in arb_manifest()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&m, &path).unwrap();
        prop_assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn stats_group_sums_match_totals(m in arb_manifest()) {
        let stats = dataset_stats(&m);
        prop_assert_eq!(stats.per_label.values().sum::<usize>(), stats.n_annotations);
        prop_assert_eq!(stats.per_domain.values().sum::<usize>(), stats.n_annotations);
    }

    #[test]
    fn transform_round_trip(px in -1e6f64..1e6, py in -1e6f64..1e6, ox in -1e6f64..1e6, oy in -1e6f64..1e6) {
        let p = Point2D { x: px.trunc(), y: py.trunc() };
        let o = Point2D { x: ox.trunc(), y: oy.trunc() };
        let back = frame_transform(
            frame_transform(p, o, FrameDirection::ToSlide),
            o,
            FrameDirection::ToPatch,
        );
        prop_assert_eq!(back, p);
    }

    #[test]
    fn positive_patches_respect_bounds(m in arb_manifest(), seed in any::<u64>()) {
        let report = plan_positive_patches(&m, 380, 50, seed).unwrap();
        for patch in &report.patches {
            let slide = m.slide(&patch.slide_id).unwrap();
            prop_assert!(patch.origin.x >= 0.0 && patch.origin.y >= 0.0);
            prop_assert!(patch.origin.x + patch.width as f64 <= slide.width as f64);
            prop_assert!(patch.origin.y + patch.height as f64 <= slide.height as f64);
            for a in &patch.local_annotations {
                prop_assert!(a.center.x >= 0.0 && a.center.x < patch.width as f64);
                prop_assert!(a.center.y >= 0.0 && a.center.y < patch.height as f64);
            }
        }
        // determinism
        let again = plan_positive_patches(&m, 380, 50, seed).unwrap();
        prop_assert_eq!(report.patches, again.patches);
    }
}

fn dets_from(points: &[(f64, f64, f64)]) -> Vec<SlideDetection> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y, score))| SlideDetection {
            slide_id: "s".into(),
            center: Point2D { x, y },
            score,
            label: AnnotationLabel::MitoticFigure,
            provenance: format!("p{i}"),
        })
        .collect()
}

fn anns_from(points: &[(f64, f64)]) -> Vec<AnnotationRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| AnnotationRecord {
            ann_id: format!("a{i}"),
            slide_id: "s".into(),
            center: Point2D { x, y },
            label: AnnotationLabel::MitoticFigure,
            source: "prop".into(),
        })
        .collect()
}

/// Exhaustive maximum bipartite matching by recursion; oracle for optimal_match.
fn brute_force_max_matching(edges: &[Vec<bool>], det: usize, used: &mut Vec<bool>) -> usize {
    if det == edges.len() {
        return 0;
    }
    // skip this detection
    let mut best = brute_force_max_matching(edges, det + 1, used);
    for ann in 0..used.len() {
        if edges[det][ann] && !used[ann] {
            used[ann] = true;
            best = best.max(1 + brute_force_max_matching(edges, det + 1, used));
            used[ann] = false;
        }
    }
    best
}

proptest! {
    #[test]
    fn suppression_invariants(
        points in prop::collection::vec((0.0f64..500.0, 0.0f64..500.0, 0.0f64..1.0), 0..40),
        radius in 5.0f64..100.0,
    ) {
        let dets = dets_from(&points);
        let kept = radius_suppress(&dets, radius).unwrap();
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.center.distance(&b.center) > radius);
            }
        }
        prop_assert_eq!(radius_suppress(&kept, radius).unwrap(), kept.clone());
        prop_assert_eq!(radius_suppress_naive(&dets, radius), kept);
    }

    #[test]
    fn greedy_never_beats_optimal(
        det_points in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0, 0.0f64..1.0), 0..8),
        ann_points in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0), 0..8),
        radius in 10.0f64..120.0,
    ) {
        let dets = dets_from(&det_points);
        let anns = anns_from(&ann_points);
        let greedy = greedy_match(&dets, &anns, radius);
        let optimal = optimal_match(&dets, &anns, radius);
        prop_assert!(greedy.tp <= optimal.tp);

        let edges: Vec<Vec<bool>> = dets
            .iter()
            .map(|d| anns.iter().map(|a| d.center.distance(&a.center) <= radius).collect())
            .collect();
        let mut used = vec![false; anns.len()];
        let brute = brute_force_max_matching(&edges, 0, &mut used);
        prop_assert_eq!(optimal.tp, brute);

        // isolated-detection case: greedy achieves the optimum
        let isolated = edges.iter().all(|row| row.iter().filter(|&&e| e).count() <= 1);
        if isolated {
            prop_assert_eq!(greedy.tp, optimal.tp);
        }
    }

    #[test]
    fn sweep_recall_monotone(
        det_points in prop::collection::vec((0.0f64..900.0, 0.0f64..900.0, 0.0f64..1.0), 0..30),
    ) {
        let m = DatasetManifest {
            slides: vec![slide(0, 0, 1000, 1000)],
            annotations: anns_from(&[(100.0, 100.0), (500.0, 500.0), (800.0, 200.0)])
                .into_iter()
                .map(|mut a| { a.slide_id = "s0".into(); a })
                .collect(),
            ..Default::default()
        };
        let dets: Vec<SlideDetection> = dets_from(&det_points)
            .into_iter()
            .map(|mut d| { d.slide_id = "s0".into(); d })
            .collect();
        let grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let sweep = threshold_sweep(&dets, &m, 7.5, &grid).unwrap();
        for w in sweep.points.windows(2) {
            prop_assert!(w[1].metrics.recall <= w[0].metrics.recall + 1e-12);
        }
    }
}
