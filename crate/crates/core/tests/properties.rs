//! Property tests for the documented invariants of each module.

use std::collections::{BTreeSet, HashSet};

use bitefuse::annotations::{
    filter_dataset, merge_grades, parse_annotation_file, parse_csv, parse_json, to_csv, to_json, write_annotation_file,
    BoxFormat, FilterOptions,
};
use bitefuse::bootstrap::{bca_from_replicates, percentile_interval};
use bitefuse::fusion::{fuse_annotation_set, fuse_group, FusionConfig};
use bitefuse::metrics::{evaluate, EvalConfig};
use bitefuse::splits::{make_folds, rotation_ids};
use bitefuse::{Annotation, AnnotationSet, BoundingBox, CariesClass, FileFormat, ImageInfo, LabelSpace};
use proptest::prelude::*;

const RAW: [CariesClass; 7] = [
    CariesClass::Grade1,
    CariesClass::Grade2,
    CariesClass::Grade3,
    CariesClass::Grade4,
    CariesClass::Grade5,
    CariesClass::SecondaryLesion,
    CariesClass::UnknownGrade,
];

fn image_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("im{i}")).collect()
}

prop_compose! {
    fn arb_box(limit: f64)(x in 0.0..limit * 0.7, y in 0.0..limit * 0.7, w in 1.0..limit * 0.3, h in 1.0..limit * 0.3) -> BoundingBox {
        BoundingBox::new(x, y, x + w, y + h).unwrap()
    }
}

prop_compose! {
    fn arb_raw_set()(
        n_images in 1usize..4,
        rows in prop::collection::vec((0usize..4, 0usize..3, 0usize..7, arb_box(200.0), 0.0f64..=1.0), 0..25),
        rejected in prop::collection::vec(any::<bool>(), 4),
        patients in prop::collection::vec(prop::option::of(0u8..3), 4),
    ) -> AnnotationSet {
        let images: Vec<ImageInfo> = (0..n_images)
            .map(|i| {
                let mut img = ImageInfo::new(format!("im{i}"), 200, 200);
                if rejected[i] {
                    img = img.rejected();
                }
                img.patient_id = patients[i].map(|p| format!("p{p}"));
                img
            })
            .collect();
        let mut seen = HashSet::new();
        let annotations = rows
            .into_iter()
            .filter(|(img, ..)| *img < n_images)
            .map(|(img, src, lab, bbox, conf)| {
                Annotation::new(format!("im{img}"), format!("s{src}"), RAW[lab], bbox).with_confidence(conf)
            })
            .filter(|a| seen.insert((a.image_id.clone(), a.source_id.clone(), a.label, a.bbox.to_array().map(f64::to_bits))))
            .collect();
        AnnotationSet::new(images, annotations, LabelSpace::Raw).unwrap()
    }
}

// A group of one box per source, scattered around a common lesion.
prop_compose! {
    fn arb_group(max: usize)(
        cx in 50.0..450.0f64, cy in 50.0..450.0f64, w in 12.0..80.0f64, h in 12.0..80.0f64,
        offsets in prop::collection::vec((-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64), 1..=max),
    ) -> Vec<Annotation> {
        offsets
            .into_iter()
            .enumerate()
            .map(|(k, (a, b, c, d))| {
                let bbox = BoundingBox::new(cx - w / 2.0 + a, cy - h / 2.0 + b, cx + w / 2.0 + c, cy + h / 2.0 + d).unwrap();
                Annotation::new("im", format!("s{k}"), CariesClass::EnamelCaries, bbox)
            })
            .collect()
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn json_round_trip(set in arb_raw_set()) {
        let again = parse_json(&to_json(&set), "mem").unwrap();
        prop_assert_eq!(&again, &set);
    }

    #[test]
    fn csv_round_trip(set in arb_raw_set()) {
        let again = parse_csv(&to_csv(&set), "mem", BoxFormat::Xyxy).unwrap();
        prop_assert_eq!(&again, &set);
    }

    #[test]
    fn file_round_trip(set in arb_raw_set(), json in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let (name, format) = if json { ("a.json", FileFormat::Json) } else { ("a.csv", FileFormat::Csv) };
        let path = dir.path().join(name);
        write_annotation_file(&path, &set, format).unwrap();
        prop_assert_eq!(parse_annotation_file(&path, FileFormat::from_path(&path)).unwrap(), set);
    }

    #[test]
    fn merge_changes_labels_only(set in arb_raw_set()) {
        let (clean, _) = filter_dataset(&set, &FilterOptions { drop_unknown_grade_images: true, ..Default::default() });
        let merged = merge_grades(&clean).unwrap();
        prop_assert_eq!(merged.images(), clean.images());
        prop_assert_eq!(merged.annotations().len(), clean.annotations().len());
        for (m, c) in merged.annotations().iter().zip(clean.annotations()) {
            prop_assert_eq!((&m.image_id, &m.source_id, m.bbox), (&c.image_id, &c.source_id, c.bbox));
            prop_assert!(LabelSpace::Merged.admits(m.label));
        }
    }

    #[test]
    fn filter_yields_subset(set in arb_raw_set(), rej in any::<bool>(), unk in any::<bool>(), excl in prop::collection::vec(0usize..5, 0..3)) {
        let opts = FilterOptions {
            drop_rejected: rej,
            drop_unknown_grade_images: unk,
            exclude_ids: excl.iter().map(|i| format!("im{i}")).collect(),
        };
        let (out, report) = filter_dataset(&set, &opts);
        let before: HashSet<&str> = set.images().iter().map(|i| i.id.as_str()).collect();
        let after: HashSet<&str> = out.images().iter().map(|i| i.id.as_str()).collect();
        prop_assert!(after.is_subset(&before));
        prop_assert_eq!(report.remaining, after.len());
        prop_assert!(out.annotations().iter().all(|a| after.contains(a.image_id.as_str())));
        let kept = set.annotations().iter().filter(|a| after.contains(a.image_id.as_str())).count();
        prop_assert_eq!(out.annotations().len(), kept);
    }

    #[test]
    fn fusion_translation_equivariant(group in arb_group(6), dx in -40.0..40.0f64, dy in -40.0..40.0f64) {
        let cfg = FusionConfig::default();
        let refs: Vec<&Annotation> = group.iter().collect();
        let moved: Vec<Annotation> = group
            .iter()
            .map(|a| Annotation { bbox: a.bbox.translate(dx, dy), ..a.clone() })
            .collect();
        let moved_refs: Vec<&Annotation> = moved.iter().collect();
        let (base, _) = fuse_group(&refs, &cfg).unwrap();
        let (shifted, _) = fuse_group(&moved_refs, &cfg).unwrap();
        for (s, b) in shifted.to_array().iter().zip(base.translate(dx, dy).to_array()) {
            prop_assert!(close(*s, b, 1e-6), "{} vs {}", s, b);
        }
    }

    #[test]
    fn fusion_scale_equivariant(group in arb_group(6), s in 0.2..5.0f64) {
        let cfg = FusionConfig::default();
        let refs: Vec<&Annotation> = group.iter().collect();
        let scaled: Vec<Annotation> = group.iter().map(|a| Annotation { bbox: a.bbox.scale(s), ..a.clone() }).collect();
        let scaled_refs: Vec<&Annotation> = scaled.iter().collect();
        let (base, _) = fuse_group(&refs, &cfg).unwrap();
        let (big, _) = fuse_group(&scaled_refs, &cfg).unwrap();
        for (g, b) in big.to_array().iter().zip(base.scale(s).to_array()) {
            prop_assert!(close(*g, b, 1e-6), "{} vs {}", g, b);
        }
    }

    #[test]
    fn fusion_permutation_invariant(group in arb_group(6).prop_shuffle()) {
        let cfg = FusionConfig::default();
        let refs: Vec<&Annotation> = group.iter().collect();
        let mut sorted = refs.clone();
        sorted.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        prop_assert_eq!(fuse_group(&refs, &cfg).unwrap().0, fuse_group(&sorted, &cfg).unwrap().0);
    }

    #[test]
    fn fusion_nests_in_mass(group in arb_group(6), p1 in 0.05..0.95f64, dp in 0.01..0.04f64) {
        let refs: Vec<&Annotation> = group.iter().collect();
        let inner = fuse_group(&refs, &FusionConfig { mass_p: p1, ..Default::default() }).unwrap().0;
        let outer = fuse_group(&refs, &FusionConfig { mass_p: p1 + dp, ..Default::default() }).unwrap().0;
        prop_assert!(outer.contains(&inner));
    }

    #[test]
    fn fusion_idempotent(group in arb_group(6)) {
        let set = AnnotationSet::new(vec![ImageInfo::new("im", 500, 500)], group, LabelSpace::Merged).unwrap();
        let once = fuse_annotation_set(&set, &FusionConfig::default()).unwrap().set;
        let twice = fuse_annotation_set(&once, &FusionConfig::default()).unwrap().set;
        prop_assert_eq!(once.annotations().len(), twice.annotations().len());
        for (a, b) in once.annotations().iter().zip(twice.annotations()) {
            for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                prop_assert!((x - y).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn votes_sum_to_support(set in arb_raw_set()) {
        let (clean, _) = filter_dataset(&set, &FilterOptions { drop_unknown_grade_images: true, ..Default::default() });
        let merged = merge_grades(&clean).unwrap();
        let out = fuse_annotation_set(&merged, &FusionConfig::default()).unwrap();
        for img in &out.diagnostics.images {
            for g in &img.groups {
                prop_assert_eq!(g.vote_tally.values().sum::<usize>(), g.support);
                prop_assert!(g.support <= img.sources);
                let top = *g.vote_tally.values().max().unwrap();
                prop_assert_eq!(g.vote_tally[&g.consensus_label], top);
            }
        }
    }
}

// Predictions with distinct confidences plus matching truth over three images.
prop_compose! {
    fn arb_detections()(
        preds in prop::collection::vec((0usize..3, 0usize..3, arb_box(100.0)), 0..12),
        truth in prop::collection::vec((0usize..3, 0usize..3, arb_box(100.0)), 0..8),
    ) -> (Vec<(usize, usize, BoundingBox, f64)>, Vec<(usize, usize, BoundingBox)>) {
        let n = preds.len();
        let preds = preds.into_iter().enumerate().map(|(k, (i, c, b))| (i, c, b, (k + 1) as f64 / (n + 1) as f64)).collect();
        (preds, truth)
    }
}

fn detection_sets(
    preds: &[(usize, usize, BoundingBox, f64)],
    truth: &[(usize, usize, BoundingBox)],
    copies: usize,
    conf: impl Fn(f64) -> f64,
) -> (AnnotationSet, AnnotationSet) {
    let suffix = |k: usize| if k == 0 { String::new() } else { format!("_copy{k}") };
    let images: Vec<ImageInfo> = (0..copies)
        .flat_map(|k| (0..3).map(move |i| ImageInfo::new(format!("im{i}{}", suffix(k)), 100, 100)))
        .collect();
    let dedupe = |v: Vec<Annotation>| {
        let mut seen = HashSet::new();
        v.into_iter()
            .filter(|a| seen.insert((a.image_id.clone(), a.label, a.bbox.to_array().map(f64::to_bits))))
            .collect::<Vec<_>>()
    };
    let p = dedupe(
        (0..copies)
            .flat_map(|k| {
                preds.iter().map(move |&(i, c, b, s)| (format!("im{i}{}", suffix(k)), c, b, s))
            })
            .map(|(img, c, b, s)| Annotation::new(img, "model", CariesClass::MERGED[c], b).with_confidence(conf(s)))
            .collect(),
    );
    let g = dedupe(
        (0..copies)
            .flat_map(|k| truth.iter().map(move |&(i, c, b)| (format!("im{i}{}", suffix(k)), c, b)))
            .map(|(img, c, b)| Annotation::new(img, "gt", CariesClass::MERGED[c], b))
            .collect(),
    );
    (
        AnnotationSet::new(images.clone(), p, LabelSpace::Merged).unwrap(),
        AnnotationSet::new(images, g, LabelSpace::Merged).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_bounded_and_fnr_is_miss_rate((preds, truth) in arb_detections(), thr in 0.0..1.0f64) {
        let (p, g) = detection_sets(&preds, &truth, 1, |c| c);
        let cfg = EvalConfig { confidence_threshold: thr, ..Default::default() };
        let r = evaluate(&p, &g, &cfg).unwrap();
        for c in &r.classes {
            for v in [c.ap, c.f1, c.fnr] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(c.tp + c.fn_, c.gt_count);
            if c.gt_count > 0 {
                let recall = c.tp as f64 / c.gt_count as f64;
                prop_assert!((c.fnr - (1.0 - recall)).abs() < 1e-15);
            }
        }
        for v in [r.macro_avg.map, r.macro_avg.mf1, r.macro_avg.mfnr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ap_depends_on_rank_only((preds, truth) in arb_detections(), pow in 0.2..4.0f64) {
        let (p, g) = detection_sets(&preds, &truth, 1, |c| c);
        let (q, _) = detection_sets(&preds, &truth, 1, |c| c.powf(pow) * 0.5);
        let a = evaluate(&p, &g, &EvalConfig::default()).unwrap();
        let b = evaluate(&q, &g, &EvalConfig::default()).unwrap();
        for (x, y) in a.classes.iter().zip(&b.classes) {
            prop_assert_eq!(x.ap, y.ap);
        }
    }

    #[test]
    fn duplicated_images_keep_ap((preds, truth) in arb_detections()) {
        let (p, g) = detection_sets(&preds, &truth, 1, |c| c);
        let (p2, g2) = detection_sets(&preds, &truth, 2, |c| c);
        let a = evaluate(&p, &g, &EvalConfig::default()).unwrap();
        let b = evaluate(&p2, &g2, &EvalConfig::default()).unwrap();
        for (x, y) in a.classes.iter().zip(&b.classes) {
            prop_assert!((x.ap - y.ap).abs() < 1e-12, "{:?}: {} vs {}", x.class, x.ap, y.ap);
        }
    }

    #[test]
    fn wider_confidence_never_narrows(reps in prop::collection::vec(-10.0..10.0f64, 20..200), a in -0.2..0.2f64, point in -5.0..5.0f64) {
        let narrow = bca_from_replicates(point, &reps, a, 0.8);
        let wide = bca_from_replicates(point, &reps, a, 0.95);
        prop_assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
        let (pl, pu) = percentile_interval(&reps, 0.95);
        prop_assert!(pl <= pu);
    }

    #[test]
    fn folds_partition(n in 3usize..400, k in 3usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let ids = image_ids(n);
        let a = make_folds(&ids, k, seed).unwrap();
        let sizes = a.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut tested = BTreeSet::new();
        for i in 0..k {
            let (train, val, test) = rotation_ids(&a, i).unwrap();
            prop_assert_eq!(train.len() + val.len() + test.len(), n);
            let all: HashSet<&String> = train.iter().chain(&val).chain(&test).collect();
            prop_assert_eq!(all.len(), n);
            for id in test {
                prop_assert!(tested.insert(id));
            }
        }
        prop_assert_eq!(tested.len(), n);
    }
}

#[test]
fn seeds_change_assignment() {
    let ids = image_ids(100);
    for s in 0..10u64 {
        let a = make_folds(&ids, 5, s * 7919 + 1).unwrap();
        let b = make_folds(&ids, 5, s * 7919 + 2).unwrap();
        assert_ne!(a, b);
    }
}
