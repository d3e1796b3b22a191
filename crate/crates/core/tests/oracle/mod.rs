//! Independent reference implementations used to cross-check the library.
//!
//! Nothing here calls into the code under test beyond plain data types, so a shared
//! mistake would have to be made twice.
#![allow(dead_code)]

use std::collections::BTreeMap;

use bitefuse::{Annotation, AnnotationSet, BoundingBox, CariesClass, ImageInfo, LabelSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Overlap of two boxes, written from scratch.
pub fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleClass {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub gt: usize,
    pub ap: f64,
    pub f1: f64,
    pub fnr: f64,
}

/// Reference per-class metrics. Ranking is confidence descending, then image id, then
/// box corners; a prediction claims the unmatched same-image truth box with the
/// largest IoU at or above the threshold (first listed on exact ties).
pub fn brute_force_metrics(
    preds: &[Annotation],
    gt: &[Annotation],
    class: CariesClass,
    iou_thr: f64,
    conf_thr: f64,
) -> OracleClass {
    let mut ranked: Vec<&Annotation> = preds.iter().filter(|p| p.label == class).collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.bbox.x_min.partial_cmp(&b.bbox.x_min).unwrap())
            .then(a.bbox.y_min.partial_cmp(&b.bbox.y_min).unwrap())
            .then(a.bbox.x_max.partial_cmp(&b.bbox.x_max).unwrap())
            .then(a.bbox.y_max.partial_cmp(&b.bbox.y_max).unwrap())
    });
    let truth: Vec<&Annotation> = gt.iter().filter(|g| g.label == class).collect();
    let mut used = vec![false; truth.len()];
    let mut hits = Vec::with_capacity(ranked.len());
    for p in &ranked {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (k, g) in truth.iter().enumerate() {
            if used[k] || g.image_id != p.image_id {
                continue;
            }
            let v = overlap(&p.bbox, &g.bbox);
            if v >= iou_thr && v > best_iou {
                best = Some(k);
                best_iou = v;
            }
        }
        if let Some(k) = best {
            used[k] = true;
        }
        hits.push(best.is_some());
    }

    let n_gt = truth.len();
    // AP as Σ over recall steps of (Δrecall × best precision at any rank reaching
    // at least that recall), evaluated by direct search at each rank
    let mut ap = 0.0;
    if n_gt > 0 {
        let prefix: Vec<(usize, usize)> = (1..=hits.len())
            .map(|r| (hits[..r].iter().filter(|&&h| h).count(), r))
            .collect();
        let mut prev_tp = 0;
        for &(tp, _) in &prefix {
            if tp > prev_tp {
                let best = prefix
                    .iter()
                    .filter(|(t, _)| *t >= tp)
                    .map(|&(t, r)| t as f64 / r as f64)
                    .fold(0.0, f64::max);
                ap += (tp - prev_tp) as f64 / n_gt as f64 * best;
                prev_tp = tp;
            }
        }
    }

    let mut tp = 0;
    let mut fp = 0;
    for (p, &h) in ranked.iter().zip(&hits) {
        if p.confidence >= conf_thr {
            if h {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_ = n_gt - tp;
    let f1 = if 2 * tp + fp + fn_ == 0 || tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let fnr = if n_gt == 0 { 0.0 } else { fn_ as f64 / n_gt as f64 };
    OracleClass {
        tp,
        fp,
        fn_,
        gt: n_gt,
        ap,
        f1,
        fnr,
    }
}

/// A small random detection instance: up to `max_pred` predictions and `max_gt`
/// truth boxes over two classes and up to three images, on a coarse grid so that
/// IoU and confidence ties actually occur.
pub fn random_instance(rng: &mut ChaCha8Rng, max_pred: usize, max_gt: usize) -> (AnnotationSet, AnnotationSet) {
    let classes = [CariesClass::EnamelCaries, CariesClass::DentineCaries];
    let n_images = rng.random_range(1..=3);
    let images: Vec<ImageInfo> = (0..n_images).map(|i| ImageInfo::new(format!("im{i}"), 64, 64)).collect();
    let draw = |rng: &mut ChaCha8Rng, n: usize, source: &str, scored: bool| {
        let mut out: Vec<Annotation> = Vec::new();
        while out.len() < n {
            let x = rng.random_range(0..6) as f64 * 4.0;
            let y = rng.random_range(0..6) as f64 * 4.0;
            let w = rng.random_range(2..6) as f64 * 4.0;
            let h = rng.random_range(2..6) as f64 * 4.0;
            let bbox = BoundingBox::new(x, y, x + w, y + h).unwrap();
            let image = format!("im{}", rng.random_range(0..n_images));
            let label = classes[rng.random_range(0..2)];
            let mut a = Annotation::new(image, source, label, bbox);
            if scored {
                a = a.with_confidence(rng.random_range(1..=9) as f64 / 10.0);
            }
            if !out.iter().any(|o| o.image_id == a.image_id && o.label == a.label && o.bbox == a.bbox) {
                out.push(a);
            }
        }
        out
    };
    let n_pred = rng.random_range(0..=max_pred);
    let n_gt = rng.random_range(0..=max_gt);
    let preds = draw(rng, n_pred, "model", true);
    let truth = draw(rng, n_gt, "gt", false);
    (
        AnnotationSet::new(images.clone(), preds, LabelSpace::Merged).unwrap(),
        AnnotationSet::new(images, truth, LabelSpace::Merged).unwrap(),
    )
}

pub fn instance_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Φ by Marsaglia's Taylor series `Φ(x) = ½ + φ(x)·Σ x^(2n+1)/(2n+1)!!`, absolute
/// error near 1e-16 for |x| < 8.
pub fn phi(x: f64) -> f64 {
    if x < -8.0 {
        return 0.0;
    }
    if x > 8.0 {
        return 1.0;
    }
    let (mut term, mut sum, mut k) = (x, x, 1.0);
    while sum + term != sum {
        k += 2.0;
        term *= x * x / k;
        sum += term;
    }
    0.5 + sum * (-0.5 * x * x - 0.918_938_533_204_672_8).exp()
}

/// Φ⁻¹ from statrs, polished by Newton steps against [`phi`].
pub fn phi_inv(p: f64) -> f64 {
    let mut z = Normal::standard().inverse_cdf(p);
    for _ in 0..3 {
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        z -= (phi(z) - p) / density;
    }
    z
}

/// Textbook BCa (Efron & Tibshirani ch. 14) from replicates, the point estimate and
/// the leave-one-out values, with the type-7 sample quantile. `z0` counts ties at
/// the point estimate as half below.
pub fn textbook_bca(point: f64, replicates: &[f64], jack: &[f64], confidence: f64) -> (f64, f64) {
    let b = replicates.len() as f64;
    let below = replicates.iter().filter(|&&r| r < point).count() as f64;
    let equal = replicates.iter().filter(|&&r| r == point).count() as f64;
    let z0 = phi_inv((below + equal / 2.0) / b);

    let m = jack.iter().sum::<f64>() / jack.len() as f64;
    let num: f64 = jack.iter().map(|t| (m - t).powi(3)).sum();
    let den: f64 = jack.iter().map(|t| (m - t).powi(2)).sum();
    let a = if den == 0.0 { 0.0 } else { num / (6.0 * den.powi(3).sqrt()) };

    let level = |tail: f64| {
        let z = phi_inv(tail);
        phi(z0 + (z0 + z) / (1.0 - a * (z0 + z)))
    };
    let alpha = 1.0 - confidence;
    let mut sorted = replicates.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    (type7(&sorted, level(alpha / 2.0)), type7(&sorted, level(1.0 - alpha / 2.0)))
}

/// Hyndman-Fan type 7 quantile of sorted data.
pub fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let j = h.floor() as usize;
    if j + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[j] + (h - j as f64) * (sorted[j + 1] - sorted[j])
}

/// Per-class summary of a set, for equality checks that ignore ordering.
pub fn label_counts(set: &AnnotationSet) -> BTreeMap<CariesClass, usize> {
    let mut m = BTreeMap::new();
    for a in set.annotations() {
        *m.entry(a.label).or_insert(0) += 1;
    }
    m
}
