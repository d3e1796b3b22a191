//! Hand-built fixtures with hand-counted expectations.

use std::path::PathBuf;

use bitefuse::annotations::{filter_dataset, merge_grades, parse_annotation_file, FilterOptions};
use bitefuse::bootstrap::{resample_statistic, MetricName};
use bitefuse::fusion::{fuse_annotation_set, nms_fuse, FusionConfig, Strategy};
use bitefuse::metrics::{EvalConfig, EvalIndex};
use bitefuse::{Annotation, AnnotationSet, BoundingBox, CariesClass, FileFormat, ImageInfo, LabelSpace};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn six_annotators() -> AnnotationSet {
    parse_annotation_file(&fixture("six_annotators.json"), FileFormat::Json).unwrap()
}

#[test]
fn six_annotator_file_counts() {
    let set = six_annotators();
    assert_eq!(set.images().len(), 3);
    assert_eq!(set.annotations().len(), 36);
    assert_eq!(set.sources().len(), 6);
}

#[test]
fn six_annotator_consensus() {
    let merged = merge_grades(&six_annotators()).unwrap();
    let out = fuse_annotation_set(&merged, &FusionConfig::default()).unwrap();
    assert_eq!(out.set.annotations().len(), 6);
    for img in &out.diagnostics.images {
        assert_eq!(img.sources, 6);
        assert_eq!(img.groups.len(), 2);
        assert!(img.groups.iter().all(|g| g.support == 6));
    }
    let label_of = |image: &str, x: f64| {
        out.set
            .annotations()
            .iter()
            .find(|a| a.image_id == image && (a.bbox.x_min - x).abs() < 5.0)
            .unwrap()
            .label
    };
    // 4 dentine votes vs 2 enamel
    assert_eq!(label_of("bw_001", 40.0), CariesClass::DentineCaries);
    assert_eq!(label_of("bw_001", 200.0), CariesClass::EnamelCaries);
    // 4 secondary vs one enamel and one dentine
    assert_eq!(label_of("bw_002", 100.0), CariesClass::SecondaryLesion);
    // 3 enamel vs 3 dentine: the severer class wins
    assert_eq!(label_of("bw_002", 300.0), CariesClass::DentineCaries);
    assert!(out.set.annotations().iter().all(|a| a.confidence == 1.0));
}

#[test]
fn nms_and_gmm_differ_on_fixture() {
    let merged = merge_grades(&six_annotators()).unwrap();
    let gmm = fuse_annotation_set(&merged, &FusionConfig::default()).unwrap();
    let nms = fuse_annotation_set(&merged, &FusionConfig { strategy: Strategy::Nms, ..Default::default() }).unwrap();
    assert_eq!(gmm.set.annotations().len(), nms.set.annotations().len());
    assert_ne!(gmm.set, nms.set);
    // every NMS box is one of the members' boxes: the first in canonical order
    for img in &nms.diagnostics.images {
        for g in &img.groups {
            let members: Vec<Annotation> = g
                .members
                .iter()
                .map(|m| {
                    let [a, b, c, d] = m.bbox;
                    Annotation::new(img.image_id.clone(), m.source_id.clone(), m.label, BoundingBox::new(a, b, c, d).unwrap())
                })
                .collect();
            let refs: Vec<&Annotation> = members.iter().collect();
            assert_eq!(nms_fuse(&refs), Some(g.consensus_box));
            assert_eq!(g.consensus_box.to_array(), g.members[0].bbox);
        }
    }
}

#[test]
fn ten_image_filter() {
    let images: Vec<ImageInfo> = (0..10)
        .map(|i| {
            let img = ImageInfo::new(format!("im{i}"), 100, 100);
            if i < 2 {
                img.rejected()
            } else {
                img
            }
        })
        .collect();
    let b = BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
    let c = BoundingBox::new(30.0, 30.0, 50.0, 50.0).unwrap();
    let annotations = vec![
        Annotation::new("im2", "a", CariesClass::UnknownGrade, b),
        Annotation::new("im2", "a", CariesClass::Grade3, c),
        Annotation::new("im2", "b", CariesClass::Grade3, c),
        Annotation::new("im4", "a", CariesClass::Grade1, b),
        Annotation::new("im5", "a", CariesClass::Grade5, c),
    ];
    let set = AnnotationSet::new(images, annotations, LabelSpace::Raw).unwrap();
    let opts = FilterOptions {
        drop_rejected: true,
        drop_unknown_grade_images: true,
        exclude_ids: vec!["im3".into()],
    };
    let (out, report) = filter_dataset(&set, &opts);
    assert_eq!(report.remaining, 6);
    assert_eq!((report.rejected, report.unknown_grade, report.excluded), (2, 1, 1));
    assert_eq!(out.images().len(), 6);
    assert_eq!(out.annotations().len(), 2);
    assert!(merge_grades(&out).is_ok());
}

/// Three images with one lesion each: a hit on the first, misses on the others.
fn resample_fixture() -> EvalIndex {
    let images: Vec<ImageInfo> = (1..=3).map(|i| ImageInfo::new(format!("img{i}"), 100, 100)).collect();
    let lesion = BoundingBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
    let far = BoundingBox::new(60.0, 60.0, 80.0, 80.0).unwrap();
    let gt: Vec<Annotation> = (1..=3)
        .map(|i| Annotation::new(format!("img{i}"), "gt", CariesClass::EnamelCaries, lesion))
        .collect();
    let pred = vec![
        Annotation::new("img1", "m", CariesClass::EnamelCaries, lesion).with_confidence(0.9),
        Annotation::new("img2", "m", CariesClass::EnamelCaries, far).with_confidence(0.8),
        Annotation::new("img3", "m", CariesClass::EnamelCaries, far).with_confidence(0.7),
    ];
    let gt = AnnotationSet::new(images.clone(), gt, LabelSpace::Merged).unwrap();
    let pred = AnnotationSet::new(images, pred, LabelSpace::Merged).unwrap();
    EvalIndex::build(&pred, &gt, &EvalConfig::default()).unwrap()
}

#[test]
fn resample_with_duplicates() {
    let index = resample_fixture();
    assert_eq!(index.image_ids(), ["img1", "img2", "img3"]);
    let enamel = CariesClass::EnamelCaries;
    // {1,1,3}: ranked TP, TP, FP against 3 lesions
    let ids = [0, 0, 2];
    assert!((resample_statistic(&index, &ids, MetricName::Ap(enamel)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((resample_statistic(&index, &ids, MetricName::F1(enamel)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((resample_statistic(&index, &ids, MetricName::Fnr(enamel)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((resample_statistic(&index, &ids, MetricName::Map).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    // identity resample equals the point estimate
    let full = index.full_report();
    assert_eq!(resample_statistic(&index, &[0, 1, 2], MetricName::Map), Some(full.macro_avg.map));
    assert!((full.macro_avg.map - 1.0 / 3.0).abs() < 1e-15);
    // a single image alone
    assert_eq!(resample_statistic(&index, &[1, 1, 1], MetricName::Ap(enamel)), Some(0.0));
    assert_eq!(resample_statistic(&index, &[0, 0, 0], MetricName::Ap(enamel)), Some(1.0));
}
