//! Multi-annotator box fusion.
//!
//! Boxes drawn on one image by different sources are first grouped by IoU against
//! the running mean box of each group. Every member box is then modelled along each
//! axis as a Gaussian centred on the box with `σ = extent / sigma_divisor`; the group's
//! consensus interval on that axis is the central `mass_p` interval of the
//! equal-weight mixture of those Gaussians. The consensus label is the plurality
//! vote, ties going to the most severe class.
//!
//! With the defaults (`sigma_divisor = 4`, `mass_p = 0.9545`) a single box maps onto
//! itself, so unanimous input passes through unchanged.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{iou, Annotation, AnnotationSet, BoundingBox, CariesClass, SeverityOrder};
use crate::error::{Error, Result};
use crate::normal;

/// Source id given to fused annotations.
pub const CONSENSUS_SOURCE: &str = "consensus";

/// Absolute tolerance of the mixture quantile solver, in pixels.
pub const QUANTILE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Gmm,
    Nms,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gmm" => Ok(Strategy::Gmm),
            "nms" => Ok(Strategy::Nms),
            other => Err(format!("unknown fusion strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Minimum IoU with a group's running mean box for a box to join it.
    pub grouping_iou: f64,
    /// Probability mass of the central consensus interval.
    pub mass_p: f64,
    /// Box extent divided by this gives the per-axis σ.
    pub sigma_divisor: f64,
    /// Groups supported by fewer distinct sources are dropped.
    pub min_votes: usize,
    pub strategy: Strategy,
    /// Tie-break order for label votes; `None` uses the label space default.
    pub severity: Option<SeverityOrder>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            grouping_iou: 0.3,
            mass_p: 0.954500,
            sigma_divisor: 4.0,
            min_votes: 1,
            strategy: Strategy::Gmm,
            severity: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grouping_iou > 0.0 && self.grouping_iou <= 1.0) {
            return Err(Error::Config(format!(
                "grouping_iou must lie in (0, 1], got {}",
                self.grouping_iou
            )));
        }
        if !(self.mass_p > 0.0 && self.mass_p < 1.0) {
            return Err(Error::Config(format!("mass_p must lie in (0, 1), got {}", self.mass_p)));
        }
        if !(self.sigma_divisor > 0.0 && self.sigma_divisor.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_divisor must be positive, got {}",
                self.sigma_divisor
            )));
        }
        if self.min_votes == 0 {
            return Err(Error::Config("min_votes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianComponent {
    pub mean: f64,
    pub sigma: f64,
}

/// Gaussian whose mean is the interval midpoint and whose σ is `(hi - lo) / sigma_divisor`.
pub fn fit_axis_gaussian(lo: f64, hi: f64, sigma_divisor: f64) -> Result<GaussianComponent> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Validation(format!("degenerate interval [{lo}, {hi}]")));
    }
    if !(sigma_divisor > 0.0) {
        return Err(Error::Config(format!("sigma_divisor must be positive, got {sigma_divisor}")));
    }
    Ok(GaussianComponent {
        mean: (lo + hi) / 2.0,
        sigma: (hi - lo) / sigma_divisor,
    })
}

/// Equal-weight Gaussian mixture along one axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisMixture {
    components: Vec<GaussianComponent>,
}

impl AxisMixture {
    /// Components are stored sorted so the mixture does not depend on input order.
    pub fn new(mut components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        if components
            .iter()
            .any(|c| !(c.sigma > 0.0) || !c.sigma.is_finite() || !c.mean.is_finite())
        {
            return Err(Error::Validation("mixture components need finite mean and σ > 0".into()));
        }
        components.sort_by(|a, b| a.mean.total_cmp(&b.mean).then(a.sigma.total_cmp(&b.sigma)));
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.components.len() as f64
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let sum: f64 = self
            .components
            .iter()
            .map(|c| normal::cdf((x - c.mean) / c.sigma))
            .sum();
        sum * self.weight()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let sum: f64 = self
            .components
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.sigma;
                (-0.5 * z * z).exp() / (c.sigma * norm)
            })
            .sum();
        sum * self.weight()
    }
}

/// The `x` with mixture CDF equal to `q`, by bisection over
/// `[min(μ - 10σ), max(μ + 10σ)]` to [`QUANTILE_TOLERANCE`].
pub fn mixture_quantile(mix: &AxisMixture, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Validation(format!("quantile level must lie in (0, 1), got {q}")));
    }
    let mut lo = mix
        .components
        .iter()
        .map(|c| c.mean - 10.0 * c.sigma)
        .fold(f64::INFINITY, f64::min);
    let mut hi = mix
        .components
        .iter()
        .map(|c| c.mean + 10.0 * c.sigma)
        .fold(f64::NEG_INFINITY, f64::max);
    while hi - lo > QUANTILE_TOLERANCE {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if mix.cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + (hi - lo) / 2.0)
}

/// Deterministic processing order for grouping and NMS: larger area first, then
/// corner coordinates, then source id.
pub fn canonical_cmp(a: &Annotation, b: &Annotation) -> Ordering {
    b.bbox
        .area()
        .total_cmp(&a.bbox.area())
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then_with(|| a.source_id.cmp(&b.source_id))
        .then_with(|| a.label.cmp(&b.label))
}

struct Group<'a> {
    members: Vec<&'a Annotation>,
    sums: [f64; 4],
}

impl<'a> Group<'a> {
    fn seed(ann: &'a Annotation) -> Self {
        Self {
            members: vec![ann],
            sums: ann.bbox.to_array(),
        }
    }

    fn mean_box(&self) -> BoundingBox {
        let n = self.members.len() as f64;
        let [a, b, c, d] = self.sums.map(|s| s / n);
        BoundingBox::unchecked(a, b, c, d)
    }

    fn add(&mut self, ann: &'a Annotation) {
        self.members.push(ann);
        for (s, v) in self.sums.iter_mut().zip(ann.bbox.to_array()) {
            *s += v;
        }
    }

    fn replace(&mut self, pos: usize, ann: &'a Annotation) -> &'a Annotation {
        let old = std::mem::replace(&mut self.members[pos], ann);
        for ((s, new), old) in self.sums.iter_mut().zip(ann.bbox.to_array()).zip(old.bbox.to_array()) {
            *s += new - old;
        }
        old
    }
}

/// Partitions one image's annotations into overlap groups.
///
/// Annotations are visited in [`canonical_cmp`] order. Each one is tested against the
/// first group whose running mean box reaches `grouping_iou`. It joins that group
/// unless the group already holds a box from the same source: then the box closer
/// to the mean (by IoU) keeps the slot and the other one starts a new group.
pub fn group_boxes<'a>(annotations: &[&'a Annotation], grouping_iou: f64) -> Vec<Vec<&'a Annotation>> {
    let mut sorted = annotations.to_vec();
    sorted.sort_by(|a, b| canonical_cmp(a, b));

    let mut groups: Vec<Group<'a>> = Vec::new();
    for ann in sorted {
        let candidate = groups
            .iter()
            .position(|g| iou(&ann.bbox, &g.mean_box()) >= grouping_iou);
        let Some(gi) = candidate else {
            groups.push(Group::seed(ann));
            continue;
        };
        let group = &mut groups[gi];
        let mean = group.mean_box();
        match group.members.iter().position(|m| m.source_id == ann.source_id) {
            None => group.add(ann),
            Some(pos) => {
                let held = iou(&group.members[pos].bbox, &mean);
                let incoming = iou(&ann.bbox, &mean);
                let loser = if incoming > held { group.replace(pos, ann) } else { ann };
                groups.push(Group::seed(loser));
            }
        }
    }
    groups.into_iter().map(|g| g.members).collect()
}

/// Per-axis mixtures and the quantile levels used to read the consensus box.
#[derive(Debug, Clone, Serialize)]
pub struct FuseDiagnostics {
    pub x: AxisMixture,
    pub y: AxisMixture,
    pub lower_level: f64,
    pub upper_level: f64,
}

/// Consensus box of a group by the Gaussian-mixture rule. The result is not clamped
/// to any image.
pub fn fuse_group(members: &[&Annotation], config: &FusionConfig) -> Result<(BoundingBox, FuseDiagnostics)> {
    if members.is_empty() {
        return Err(Error::Validation("cannot fuse an empty group".into()));
    }
    let axis = |lo: fn(&BoundingBox) -> f64, hi: fn(&BoundingBox) -> f64| -> Result<AxisMixture> {
        let comps = members
            .iter()
            .map(|m| fit_axis_gaussian(lo(&m.bbox), hi(&m.bbox), config.sigma_divisor))
            .collect::<Result<Vec<_>>>()?;
        AxisMixture::new(comps)
    };
    let x = axis(|b| b.x_min, |b| b.x_max)?;
    let y = axis(|b| b.y_min, |b| b.y_max)?;
    let lower_level = (1.0 - config.mass_p) / 2.0;
    let upper_level = (1.0 + config.mass_p) / 2.0;
    let bbox = BoundingBox::unchecked(
        mixture_quantile(&x, lower_level)?,
        mixture_quantile(&y, lower_level)?,
        mixture_quantile(&x, upper_level)?,
        mixture_quantile(&y, upper_level)?,
    );
    Ok((
        bbox,
        FuseDiagnostics {
            x,
            y,
            lower_level,
            upper_level,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vote {
    Accepted {
        label: CariesClass,
        tally: BTreeMap<CariesClass, usize>,
        support: usize,
    },
    /// Fewer than `min_votes` distinct sources supported the group.
    Dropped {
        tally: BTreeMap<CariesClass, usize>,
        support: usize,
    },
}

/// Plurality label of a group, ties broken towards the most severe class.
pub fn vote_label(members: &[&Annotation], severity: &SeverityOrder, min_votes: usize) -> Vote {
    let mut tally: BTreeMap<CariesClass, usize> = BTreeMap::new();
    for m in members {
        *tally.entry(m.label).or_default() += 1;
    }
    let support = members
        .iter()
        .map(|m| m.source_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    if support < min_votes || members.is_empty() {
        return Vote::Dropped { tally, support };
    }
    let top = tally.values().copied().max().unwrap_or(0);
    let label = severity
        .most_severe(tally.iter().filter(|(_, &n)| n == top).map(|(&c, _)| c))
        .expect("non-empty tally");
    Vote::Accepted { label, tally, support }
}

/// NMS over equally confident boxes: the first box in canonical order wins.
pub fn nms_fuse(members: &[&Annotation]) -> Option<BoundingBox> {
    members.iter().min_by(|a, b| canonical_cmp(a, b)).map(|a| a.bbox)
}

/// Greedy non-maximum suppression. Boxes are ranked by confidence (descending), then
/// [`canonical_cmp`]; returns indices of kept boxes in rank order.
pub fn nms(annotations: &[&Annotation], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..annotations.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (annotations[i], annotations[j]);
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| canonical_cmp(a, b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&annotations[k].bbox, &annotations[i].bbox) < iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupMember {
    pub source_id: String,
    pub label: CariesClass,
    pub bbox: [f64; 4],
}

impl From<&Annotation> for GroupMember {
    fn from(a: &Annotation) -> Self {
        Self {
            source_id: a.source_id.clone(),
            label: a.label,
            bbox: a.bbox.to_array(),
        }
    }
}

/// A fused group: its members, consensus box and label.
#[derive(Debug, Clone, Serialize)]
pub struct FusedGroup {
    pub members: Vec<GroupMember>,
    pub consensus_box: BoundingBox,
    pub consensus_label: CariesClass,
    pub vote_tally: BTreeMap<CariesClass, usize>,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DroppedGroup {
    pub members: Vec<GroupMember>,
    pub vote_tally: BTreeMap<CariesClass, usize>,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageFusion {
    pub image_id: String,
    /// Distinct sources with at least one box on the image.
    pub sources: usize,
    pub groups: Vec<FusedGroup>,
    pub dropped: Vec<DroppedGroup>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FusionDiagnostics {
    pub config: FusionConfig,
    pub images: Vec<ImageFusion>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub set: AnnotationSet,
    pub diagnostics: FusionDiagnostics,
}

/// Fuses every image of `set` independently (in parallel) into consensus annotations
/// with source id [`CONSENSUS_SOURCE`] and confidence equal to the fraction of the
/// image's sources that support the group.
pub fn fuse_annotation_set(set: &AnnotationSet, config: &FusionConfig) -> Result<FusionOutput> {
    config.validate()?;
    let severity = config
        .severity
        .clone()
        .unwrap_or_else(|| SeverityOrder::default_for(set.label_space()));

    let per_image = set.by_image();
    let fused: Vec<(Vec<Annotation>, ImageFusion)> = per_image
        .par_iter()
        .map(|(img, anns)| fuse_image(img, anns, config, &severity))
        .collect::<Result<_>>()?;

    let mut annotations = Vec::new();
    let mut images = Vec::with_capacity(fused.len());
    for (anns, diag) in fused {
        annotations.extend(anns);
        images.push(diag);
    }
    let set = AnnotationSet::new(set.images().to_vec(), annotations, set.label_space())?;
    Ok(FusionOutput {
        set,
        diagnostics: FusionDiagnostics {
            config: config.clone(),
            images,
        },
    })
}

fn fuse_image(
    img: &crate::annotations::ImageInfo,
    anns: &[&Annotation],
    config: &FusionConfig,
    severity: &SeverityOrder,
) -> Result<(Vec<Annotation>, ImageFusion)> {
    let sources = anns
        .iter()
        .map(|a| a.source_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    let mut out = Vec::new();
    let mut diag = ImageFusion {
        image_id: img.id.clone(),
        sources,
        groups: Vec::new(),
        dropped: Vec::new(),
    };
    let mut emitted: HashSet<([u64; 4], CariesClass)> = HashSet::new();

    for members in group_boxes(anns, config.grouping_iou) {
        let summary = members.iter().map(|&m| GroupMember::from(m)).collect();
        let (label, tally, support) = match vote_label(&members, severity, config.min_votes) {
            Vote::Accepted { label, tally, support } => (label, tally, support),
            Vote::Dropped { tally, support } => {
                diag.dropped.push(DroppedGroup {
                    members: summary,
                    vote_tally: tally,
                    support,
                });
                continue;
            }
        };
        let raw = match config.strategy {
            Strategy::Gmm => fuse_group(&members, config)?.0,
            Strategy::Nms => nms_fuse(&members).expect("non-empty group"),
        };
        let (w, h) = (img.width as f64, img.height as f64);
        let bbox = BoundingBox::unchecked(
            raw.x_min.clamp(0.0, w),
            raw.y_min.clamp(0.0, h),
            raw.x_max.clamp(0.0, w),
            raw.y_max.clamp(0.0, h),
        );
        if !emitted.insert((bbox.to_array().map(f64::to_bits), label)) {
            log::debug!("image {}: dropping duplicate consensus box {:?}", img.id, bbox.to_array());
            continue;
        }
        out.push(Annotation {
            image_id: img.id.clone(),
            source_id: CONSENSUS_SOURCE.to_owned(),
            label,
            bbox,
            confidence: support as f64 / sources as f64,
        });
        diag.groups.push(FusedGroup {
            members: summary,
            consensus_box: bbox,
            consensus_label: label,
            vote_tally: tally,
            support,
        });
    }
    Ok((out, diag))
}
