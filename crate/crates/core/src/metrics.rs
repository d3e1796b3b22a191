//! Detection metrics against a ground-truth set: per-class average precision
//! (all-points interpolation), F1 and false-negative rate, plus macro averages and
//! mean ± std aggregation over cross-validation folds.
//!
//! Precision/recall is accumulated over the whole test set per class (pooled across
//! images). Matching is per image: predictions are visited by descending confidence
//! and each takes the unmatched ground-truth box of the same class with the highest
//! IoU, provided that IoU reaches the threshold.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{iou, Annotation, AnnotationSet, BoundingBox, CariesClass};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// A prediction after matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub image_id: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
    pub is_tp: bool,
    /// Index of the matched box within the image's ground truth of this class.
    pub matched_gt: Option<usize>,
}

/// Matching result for one class. Predictions are kept in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub class: CariesClass,
    pub predictions: Vec<ScoredPrediction>,
    pub gt_count: usize,
}

impl MatchOutcome {
    pub fn tp_count(&self) -> usize {
        self.predictions.iter().filter(|p| p.is_tp).count()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_count - self.tp_count()
    }
}

/// Rank order: confidence descending, then image id, then box corners.
fn rank_cmp(a: (&str, f64, &BoundingBox), b: (&str, f64, &BoundingBox)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| a.0.cmp(b.0))
        .then_with(|| a.2.lex_cmp(b.2))
}

/// Matches one image's predictions of one class against its ground truth.
/// Returns `(confidence, box, matched gt index)` per prediction in rank order.
fn match_image(
    predictions: &[&Annotation],
    ground_truth: &[&Annotation],
    iou_threshold: f64,
) -> Vec<(f64, BoundingBox, Option<usize>)> {
    let mut order: Vec<&Annotation> = predictions.to_vec();
    order.sort_by(|a, b| rank_cmp(("", a.confidence, &a.bbox), ("", b.confidence, &b.bbox)));
    let mut taken = vec![false; ground_truth.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in ground_truth.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = iou(&p.bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            (p.confidence, p.bbox, best.map(|(gi, _)| gi))
        })
        .collect()
}

/// Matches all predictions of `class` against ground truth of the same class,
/// image by image.
pub fn match_detections(
    predictions: &[Annotation],
    ground_truth: &[Annotation],
    class: CariesClass,
    iou_threshold: f64,
) -> MatchOutcome {
    let mut per_image: HashMap<&str, (Vec<&Annotation>, Vec<&Annotation>)> = HashMap::new();
    for p in predictions.iter().filter(|a| a.label == class) {
        per_image.entry(&p.image_id).or_default().0.push(p);
    }
    let mut gt_count = 0;
    for g in ground_truth.iter().filter(|a| a.label == class) {
        per_image.entry(&g.image_id).or_default().1.push(g);
        gt_count += 1;
    }
    let mut scored = Vec::new();
    for (image_id, (preds, gts)) in per_image {
        for (confidence, bbox, matched) in match_image(&preds, &gts, iou_threshold) {
            scored.push(ScoredPrediction {
                image_id: image_id.to_owned(),
                confidence,
                bbox,
                is_tp: matched.is_some(),
                matched_gt: matched,
            });
        }
    }
    scored.sort_by(|a, b| {
        rank_cmp(
            (&a.image_id, a.confidence, &a.bbox),
            (&b.image_id, b.confidence, &b.bbox),
        )
    });
    MatchOutcome {
        class,
        predictions: scored,
        gt_count,
    }
}

/// Precision/recall after each ranked prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

pub fn pr_curve(ranked_tp: impl IntoIterator<Item = bool>, gt_count: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut seen = 0usize;
    let points = ranked_tp
        .into_iter()
        .map(|is_tp| {
            seen += 1;
            tp += is_tp as usize;
            let recall = if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 };
            (recall, tp as f64 / seen as f64)
        })
        .collect();
    PrCurve { points }
}

/// All-points interpolated AP from a ranked TP/FP sequence. Zero when there is no
/// ground truth.
pub fn average_precision_ranked(ranked_tp: impl IntoIterator<Item = bool>, gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let curve = pr_curve(ranked_tp, gt_count);
    let mut recall = Vec::with_capacity(curve.points.len() + 2);
    let mut precision = Vec::with_capacity(curve.points.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    for &(r, p) in &curve.points {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);

    // precision envelope, right to left
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    ap
}

pub fn average_precision(outcome: &MatchOutcome) -> f64 {
    average_precision_ranked(outcome.predictions.iter().map(|p| p.is_tp), outcome.gt_count)
}

/// Counts at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Tally {
    /// `(f1, fnr)`. F1 is 0 when precision + recall is 0; FNR is 0 without ground truth.
    pub fn f1_fnr(&self) -> (f64, f64) {
        let gt = self.tp + self.fn_;
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, gt);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (f1, ratio(self.fn_, gt))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn tally_at(outcome: &MatchOutcome, confidence_threshold: f64) -> Tally {
    let kept = outcome
        .predictions
        .iter()
        .filter(|p| p.confidence >= confidence_threshold);
    let (mut tp, mut fp) = (0, 0);
    for p in kept {
        if p.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    Tally {
        tp,
        fp,
        fn_: outcome.gt_count - tp,
    }
}

/// F1 and FNR over predictions with confidence ≥ `confidence_threshold`.
pub fn f1_fnr(outcome: &MatchOutcome, confidence_threshold: f64) -> (f64, f64) {
    tally_at(outcome, confidence_threshold).f1_fnr()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub classes: Vec<CariesClass>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            confidence_threshold: 0.0,
            classes: CariesClass::MERGED.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no classes to evaluate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: CariesClass,
    pub ap: f64,
    pub f1: f64,
    pub fnr: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    /// No ground truth for this class: metrics are placeholders and the class is
    /// left out of the macro averages.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub map: f64,
    pub mf1: f64,
    pub mfnr: f64,
    pub included_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: EvalConfig,
    pub classes: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

impl EvaluationReport {
    pub fn class(&self, class: CariesClass) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Per-class metrics from a set of outcomes (one per configured class).
pub fn report_from_outcomes(config: &EvalConfig, outcomes: &[MatchOutcome]) -> EvaluationReport {
    let classes: Vec<ClassMetrics> = outcomes
        .iter()
        .map(|o| {
            let tally = tally_at(o, config.confidence_threshold);
            let (f1, fnr) = tally.f1_fnr();
            ClassMetrics {
                class: o.class,
                ap: average_precision(o),
                f1,
                fnr,
                tp: tally.tp,
                fp: tally.fp,
                fn_: tally.fn_,
                gt_count: o.gt_count,
                excluded: o.gt_count == 0,
            }
        })
        .collect();
    let included: Vec<&ClassMetrics> = classes.iter().filter(|c| !c.excluded).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if included.is_empty() {
            0.0
        } else {
            included.iter().map(|c| f(c)).sum::<f64>() / included.len() as f64
        }
    };
    let macro_avg = MacroMetrics {
        map: mean(|c| c.ap),
        mf1: mean(|c| c.f1),
        mfnr: mean(|c| c.fnr),
        included_classes: included.len(),
    };
    EvaluationReport {
        config: config.clone(),
        classes,
        macro_avg,
    }
}

/// Precomputed per-image matching, so that any multiset of test images can be
/// scored without re-matching. Predictions only compete with predictions on the
/// same image, so per-image matches stay valid under image resampling.
#[derive(Debug, Clone)]
pub struct EvalIndex {
    config: EvalConfig,
    image_ids: Vec<String>,
    /// `[image][class]` → ranked `(confidence, box, is_tp)` and ground-truth count.
    cells: Vec<Vec<ImageClassCell>>,
}

#[derive(Debug, Clone, Default)]
struct ImageClassCell {
    predictions: Vec<(f64, BoundingBox, bool)>,
    gt_count: usize,
}

impl EvalIndex {
    /// Indexes `predictions` against `ground_truth`. The ground truth's image list
    /// defines the test set; predictions on other images are ignored.
    pub fn build(predictions: &AnnotationSet, ground_truth: &AnnotationSet, config: &EvalConfig) -> Result<Self> {
        config.validate()?;
        if predictions.label_space() != ground_truth.label_space() {
            return Err(Error::Validation(format!(
                "class space mismatch: predictions are {}, ground truth is {}",
                predictions.label_space().as_str(),
                ground_truth.label_space().as_str()
            )));
        }
        if let Some(c) = config
            .classes
            .iter()
            .find(|&&c| !ground_truth.label_space().admits(c))
        {
            return Err(Error::Config(format!(
                "class {c} is not part of the {} label space",
                ground_truth.label_space().as_str()
            )));
        }

        let image_ids: Vec<String> = ground_truth.images().iter().map(|i| i.id.clone()).collect();
        let index: HashMap<&str, usize> = image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let class_slot: HashMap<CariesClass, usize> =
            config.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        type Bucket<'a> = (Vec<&'a Annotation>, Vec<&'a Annotation>);
        let mut buckets: Vec<Vec<Bucket>> =
            vec![vec![(Vec::new(), Vec::new()); config.classes.len()]; image_ids.len()];
        let mut ignored = 0usize;
        for p in predictions.annotations() {
            match (index.get(p.image_id.as_str()), class_slot.get(&p.label)) {
                (Some(&i), Some(&c)) => buckets[i][c].0.push(p),
                (None, _) => ignored += 1,
                _ => {}
            }
        }
        if ignored > 0 {
            log::warn!("{ignored} predictions fall on images outside the ground-truth set and are ignored");
        }
        for g in ground_truth.annotations() {
            if let Some(&c) = class_slot.get(&g.label) {
                buckets[index[g.image_id.as_str()]][c].1.push(g);
            }
        }

        let iou_threshold = config.iou_threshold;
        let cells = buckets
            .par_iter()
            .map(|per_class| {
                per_class
                    .iter()
                    .map(|(preds, gts)| ImageClassCell {
                        predictions: match_image(preds, gts, iou_threshold)
                            .into_iter()
                            .map(|(c, b, m)| (c, b, m.is_some()))
                            .collect(),
                        gt_count: gts.len(),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            image_ids,
            cells,
        })
    }

    pub fn config(&self) -> &EvalConfig {
        &self.config
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Outcomes over a multiset of image indices; repeated indices count their
    /// predictions and ground truth with multiplicity.
    pub fn outcomes(&self, images: &[usize]) -> Vec<MatchOutcome> {
        self.config
            .classes
            .iter()
            .enumerate()
            .map(|(slot, &class)| {
                let mut predictions = Vec::new();
                let mut gt_count = 0;
                for &i in images {
                    let cell = &self.cells[i][slot];
                    gt_count += cell.gt_count;
                    predictions.extend(cell.predictions.iter().map(|&(confidence, bbox, is_tp)| {
                        ScoredPrediction {
                            image_id: self.image_ids[i].clone(),
                            confidence,
                            bbox,
                            is_tp,
                            matched_gt: None,
                        }
                    }));
                }
                predictions.sort_by(|a, b| {
                    rank_cmp(
                        (&a.image_id, a.confidence, &a.bbox),
                        (&b.image_id, b.confidence, &b.bbox),
                    )
                });
                MatchOutcome {
                    class,
                    predictions,
                    gt_count,
                }
            })
            .collect()
    }

    pub fn report(&self, images: &[usize]) -> EvaluationReport {
        report_from_outcomes(&self.config, &self.outcomes(images))
    }

    pub fn full_report(&self) -> EvaluationReport {
        let all: Vec<usize> = (0..self.len()).collect();
        self.report(&all)
    }
}

/// Evaluates `predictions` against `ground_truth` over the ground truth's images.
pub fn evaluate(
    predictions: &AnnotationSet,
    ground_truth: &AnnotationSet,
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    Ok(EvalIndex::build(predictions, ground_truth, config)?.full_report())
}

// ---------------------------------------------------------------------------
// Fold aggregation

/// Mean and sample standard deviation (n - 1 denominator) over `n` values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }

    /// `"m ± s"` with three decimals.
    pub fn cell(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: CariesClass,
    pub ap: MeanStd,
    pub f1: MeanStd,
    pub fnr: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroSummary {
    pub map: MeanStd,
    pub mf1: MeanStd,
    pub mfnr: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub classes: Vec<ClassSummary>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroSummary,
}

/// Mean ± std of every metric across fold reports. A class is averaged only over the
/// folds where it had ground truth.
pub fn aggregate_folds(reports: &[EvaluationReport]) -> Result<FoldSummary> {
    if reports.len() < 2 {
        return Err(Error::Validation(format!(
            "fold aggregation needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let classes: Vec<CariesClass> = reports[0].classes.iter().map(|c| c.class).collect();
    for r in &reports[1..] {
        if r.classes.iter().map(|c| c.class).ne(classes.iter().copied()) {
            return Err(Error::Validation("fold reports have different class lists".into()));
        }
    }
    let class_summaries = classes
        .iter()
        .enumerate()
        .map(|(k, &class)| {
            let rows: Vec<&ClassMetrics> = reports
                .iter()
                .map(|r| &r.classes[k])
                .filter(|c| !c.excluded)
                .collect();
            let col = |f: fn(&ClassMetrics) -> f64| MeanStd::of(&rows.iter().map(|c| f(c)).collect::<Vec<_>>());
            ClassSummary {
                class,
                ap: col(|c| c.ap),
                f1: col(|c| c.f1),
                fnr: col(|c| c.fnr),
            }
        })
        .collect();
    let col = |f: fn(&MacroMetrics) -> f64| {
        MeanStd::of(
            &reports
                .iter()
                .filter(|r| r.macro_avg.included_classes > 0)
                .map(|r| f(&r.macro_avg))
                .collect::<Vec<_>>(),
        )
    };
    Ok(FoldSummary {
        folds: reports.len(),
        classes: class_summaries,
        macro_avg: MacroSummary {
            map: col(|m| m.map),
            mf1: col(|m| m.mf1),
            mfnr: col(|m| m.mfnr),
        },
    })
}

// ---------------------------------------------------------------------------
// CSV tables

const METRICS: [(&str, &str); 3] = [("ap", "map"), ("f1", "mf1"), ("fnr", "mfnr")];

fn table_header(classes: &[CariesClass], macro_name: &str) -> Vec<String> {
    let mut h = vec!["source".to_owned(), "metric".to_owned()];
    h.extend(classes.iter().map(|c| c.as_str().to_owned()));
    h.push(macro_name.to_owned());
    h
}

/// One row per (source, metric), columns per class plus the macro value.
pub fn reports_csv(rows: &[(String, EvaluationReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let classes: Vec<CariesClass> = rows
        .first()
        .map(|(_, r)| r.config.classes.clone())
        .unwrap_or_default();
    w.write_record(table_header(&classes, "macro")).expect("csv");
    for (source, report) in rows {
        for (metric, macro_name) in METRICS {
            let mut rec = vec![source.clone(), metric.to_owned()];
            for c in &report.classes {
                let v = match metric {
                    "ap" => c.ap,
                    "f1" => c.f1,
                    _ => c.fnr,
                };
                rec.push(if c.excluded { "n/a".into() } else { format!("{v:.3}") });
            }
            let m = match macro_name {
                "map" => report.macro_avg.map,
                "mf1" => report.macro_avg.mf1,
                _ => report.macro_avg.mfnr,
            };
            rec.push(format!("{m:.3}"));
            w.write_record(rec).expect("csv");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Same layout as [`reports_csv`] with `"m ± s"` cells.
pub fn summaries_csv(rows: &[(String, FoldSummary)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let classes: Vec<CariesClass> = rows
        .first()
        .map(|(_, s)| s.classes.iter().map(|c| c.class).collect())
        .unwrap_or_default();
    w.write_record(table_header(&classes, "macro")).expect("csv");
    for (source, summary) in rows {
        for (metric, _) in METRICS {
            let mut rec = vec![source.clone(), metric.to_owned()];
            for c in &summary.classes {
                let ms = match metric {
                    "ap" => c.ap,
                    "f1" => c.f1,
                    _ => c.fnr,
                };
                rec.push(if ms.n == 0 { "n/a".into() } else { ms.cell() });
            }
            let m = match metric {
                "ap" => summary.macro_avg.map,
                "f1" => summary.macro_avg.mf1,
                _ => summary.macro_avg.mfnr,
            };
            rec.push(m.cell());
            w.write_record(rec).expect("csv");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
