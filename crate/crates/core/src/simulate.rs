//! Synthetic multi-annotator scenes with known ground truth.
//!
//! Ground-truth lesions are placed without overlap; each simulated annotator then
//! misses boxes, jitters the corners, confuses labels and adds spurious boxes
//! according to its [`AnnotatorProfile`]. Every image draws from its own RNG stream,
//! so output is fixed by `(config, seed)` alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{iou, Annotation, AnnotationSet, BoundingBox, CariesClass, ImageInfo, LabelSpace};
use crate::error::{Error, Result};

pub const GT_SOURCE: &str = "gt";

/// Placement attempts per box before giving up.
const MAX_ATTEMPTS: usize = 1000;

/// Classes simulated, in confusion-matrix order.
pub const SIM_CLASSES: [CariesClass; 3] = CariesClass::MERGED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub name: String,
    /// σ of the independent Gaussian noise on each corner coordinate, px.
    pub jitter_sigma: f64,
    pub miss_rate: f64,
    /// Expected number of spurious boxes per image.
    pub spurious_rate: f64,
    /// Row-stochastic; `label_confusion[i][j]` = P(report class j | true class i).
    pub label_confusion: [[f64; 3]; 3],
}

impl AnnotatorProfile {
    pub fn new(name: impl Into<String>, jitter_sigma: f64) -> Self {
        Self {
            name: name.into(),
            jitter_sigma,
            miss_rate: 0.0,
            spurious_rate: 0.0,
            label_confusion: IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!("{}: jitter_sigma must be >= 0", self.name)));
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::Config(format!("{}: miss_rate must lie in [0, 1]", self.name)));
        }
        if !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite()) {
            return Err(Error::Config(format!("{}: spurious_rate must be >= 0", self.name)));
        }
        for row in &self.label_confusion {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{}: confusion rows must be probability vectors",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

pub const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub box_min: f64,
    pub box_max: f64,
    /// Minimum gap between ground-truth boxes, px.
    pub separation: f64,
    /// Prior over enamel, dentine and secondary lesions.
    pub class_prior: [f64; 3],
    pub profiles: Vec<AnnotatorProfile>,
    pub seed: u64,
}

impl SimulationConfig {
    /// `annotators` identical annotators with corner jitter `jitter` px and nothing else.
    pub fn with_annotators(n_images: usize, annotators: usize, jitter: f64, seed: u64) -> Self {
        Self {
            n_images,
            width: 800,
            height: 600,
            lesions_min: 1,
            lesions_max: 4,
            box_min: 20.0,
            box_max: 80.0,
            separation: 10.0,
            class_prior: [0.4, 0.4, 0.2],
            profiles: (1..=annotators)
                .map(|k| AnnotatorProfile::new(format!("annotator_{k}"), jitter))
                .collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lesions_min > self.lesions_max {
            return Err(Error::Config("lesions_min exceeds lesions_max".into()));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max) {
            return Err(Error::Config("need 0 < box_min <= box_max".into()));
        }
        if self.box_max > self.width as f64 || self.box_max > self.height as f64 {
            return Err(Error::Config("box_max exceeds the image size".into()));
        }
        if self.separation < 0.0 {
            return Err(Error::Config("separation must be >= 0".into()));
        }
        if self.class_prior.iter().any(|&p| p < 0.0) || (self.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("class prior must sum to 1".into()));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        Ok(())
    }

    fn images(&self) -> Vec<ImageInfo> {
        (0..self.n_images)
            .map(|i| ImageInfo::new(image_id(i), self.width, self.height))
            .collect()
    }
}

pub fn image_id(i: usize) -> String {
    format!("sim_{i:06}")
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for image `image` in stream `stream` (0 = ground truth, k = annotator k).
fn image_rng(seed: u64, stream: u64, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream)));
    rng.set_stream(image as u64);
    rng
}

fn draw_class(rng: &mut impl Rng, probs: &[f64; 3]) -> CariesClass {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return SIM_CLASSES[k];
        }
    }
    // rounding slack: last class with positive mass
    let k = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    SIM_CLASSES[k]
}

fn class_slot(c: CariesClass) -> usize {
    SIM_CLASSES.iter().position(|&s| s == c).expect("simulated class")
}

fn random_box(rng: &mut impl Rng, cfg: &SimulationConfig) -> BoundingBox {
    let w = rng.random_range(cfg.box_min..=cfg.box_max);
    let h = rng.random_range(cfg.box_min..=cfg.box_max);
    let x = rng.random_range(0.0..=(cfg.width as f64 - w));
    let y = rng.random_range(0.0..=(cfg.height as f64 - h));
    BoundingBox::unchecked(x, y, x + w, y + h)
}

fn separated(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    a.x_max + gap <= b.x_min || b.x_max + gap <= a.x_min || a.y_max + gap <= b.y_min || b.y_max + gap <= a.y_min
}

/// Ground truth: per image, a uniform number of non-overlapping lesions with labels
/// drawn from the class prior.
pub fn generate_ground_truth(cfg: &SimulationConfig) -> Result<AnnotationSet> {
    cfg.validate()?;
    let per_image: Vec<Vec<Annotation>> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = image_rng(cfg.seed, 0, i);
            let count = rng.random_range(cfg.lesions_min..=cfg.lesions_max);
            let mut boxes: Vec<BoundingBox> = Vec::with_capacity(count);
            for _ in 0..count {
                let placed = (0..MAX_ATTEMPTS)
                    .map(|_| random_box(&mut rng, cfg))
                    .find(|b| boxes.iter().all(|o| separated(b, o, cfg.separation)));
                match placed {
                    Some(b) => boxes.push(b),
                    None => {
                        return Err(Error::Config(format!(
                            "could not place {count} separated lesions in a {}x{} image",
                            cfg.width, cfg.height
                        )))
                    }
                }
            }
            Ok(boxes
                .into_iter()
                .map(|b| Annotation::new(image_id(i), GT_SOURCE, draw_class(&mut rng, &cfg.class_prior), b))
                .collect())
        })
        .collect::<Result<_>>()?;
    AnnotationSet::new(cfg.images(), per_image.concat(), LabelSpace::Merged)
}

/// One annotator's view of the ground truth. `stream` distinguishes annotators that
/// share a profile.
pub fn render_annotator(gt: &AnnotationSet, profile: &AnnotatorProfile, seed: u64, stream: u64) -> Result<AnnotationSet> {
    profile.validate()?;
    let jitter = Normal::new(0.0, profile.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let spurious = (profile.spurious_rate > 0.0)
        .then(|| Poisson::new(profile.spurious_rate).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;

    let per_image: Vec<Vec<Annotation>> = gt
        .by_image()
        .par_iter()
        .enumerate()
        .map(|(i, (img, anns))| {
            let mut rng = image_rng(seed, stream, i);
            let (w, h) = (img.width as f64, img.height as f64);
            let mut out = Vec::new();
            for a in anns {
                // draws happen in a fixed order so profiles differing only in one
                // rate still share the rest of the stream
                let missed = rng.random::<f64>() < profile.miss_rate;
                let noise: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
                let label = draw_class(&mut rng, &profile.label_confusion[class_slot(a.label)]);
                if missed {
                    continue;
                }
                let [x0, y0, x1, y1] = a.bbox.to_array();
                let (xa, xb) = ((x0 + noise[0]).clamp(0.0, w), (x1 + noise[2]).clamp(0.0, w));
                let (ya, yb) = ((y0 + noise[1]).clamp(0.0, h), (y1 + noise[3]).clamp(0.0, h));
                let Ok(bbox) = BoundingBox::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)) else {
                    continue;
                };
                out.push(Annotation::new(img.id.clone(), profile.name.clone(), label, bbox));
            }
            if let Some(dist) = &spurious {
                let count = dist.sample(&mut rng) as usize;
                for _ in 0..count {
                    let b = (0..MAX_ATTEMPTS).map(|_| {
                        let bw = rng.random_range(10.0..=w.min(60.0));
                        let bh = rng.random_range(10.0..=h.min(60.0));
                        let x = rng.random_range(0.0..=(w - bw));
                        let y = rng.random_range(0.0..=(h - bh));
                        BoundingBox::unchecked(x, y, x + bw, y + bh)
                    })
                    .find(|b| anns.iter().all(|g| iou(b, &g.bbox) <= 0.1));
                    if let Some(b) = b {
                        let label = SIM_CLASSES[rng.random_range(0..SIM_CLASSES.len())];
                        out.push(Annotation::new(img.id.clone(), profile.name.clone(), label, b));
                    }
                }
            }
            out
        })
        .collect();

    let mut annotations = per_image.concat();
    // jitter can collapse two boxes onto identical coordinates only with σ = 0 and
    // identical ground truth, which placement rules out; spurious boxes may collide
    let mut seen = std::collections::HashSet::new();
    annotations.retain(|a| seen.insert((a.image_id.clone(), a.bbox.to_array().map(f64::to_bits), a.label)));
    AnnotationSet::new(gt.images().to_vec(), annotations, gt.label_space())
}

/// Ground truth plus one rendered view per configured profile.
pub fn simulate(cfg: &SimulationConfig) -> Result<(AnnotationSet, Vec<AnnotationSet>)> {
    let gt = generate_ground_truth(cfg)?;
    let views = cfg
        .profiles
        .iter()
        .enumerate()
        .map(|(k, p)| render_annotator(&gt, p, cfg.seed, k as u64 + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok((gt, views))
}

/// How well a fused set recovers the simulator's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub gt_boxes: usize,
    pub fused_boxes: usize,
    pub matched: usize,
    /// Root mean squared distance between matched box centres, px.
    pub center_rmse: f64,
    /// Mean absolute edge error over matched boxes, px.
    pub edge_mae: f64,
    pub label_accuracy: f64,
    pub missed_fraction: f64,
    pub spurious_fraction: f64,
}

/// Matches fused boxes to ground truth one-to-one at IoU ≥ 0.5 (greedy by IoU) and
/// reports recovery errors.
pub fn score_fusion_against_truth(fused: &AnnotationSet, gt: &AnnotationSet) -> RecoveryReport {
    let fused_by_image: std::collections::HashMap<&str, Vec<&Annotation>> =
        fused.by_image().into_iter().map(|(img, a)| (img.id.as_str(), a)).collect();
    let (mut matched, mut sq_center, mut abs_edge, mut correct) = (0usize, 0.0, 0.0, 0usize);
    for (img, truth) in gt.by_image() {
        let cands = fused_by_image.get(img.id.as_str()).cloned().unwrap_or_default();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in truth.iter().enumerate() {
            for (fi, f) in cands.iter().enumerate() {
                let v = iou(&t.bbox, &f.bbox);
                if v >= 0.5 {
                    pairs.push((v, ti, fi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut t_used = vec![false; truth.len()];
        let mut f_used = vec![false; cands.len()];
        for (_, ti, fi) in pairs {
            if t_used[ti] || f_used[fi] {
                continue;
            }
            t_used[ti] = true;
            f_used[fi] = true;
            let (t, f) = (truth[ti], cands[fi]);
            let (tcx, tcy) = t.bbox.center();
            let (fcx, fcy) = f.bbox.center();
            sq_center += (tcx - fcx).powi(2) + (tcy - fcy).powi(2);
            abs_edge += t
                .bbox
                .to_array()
                .iter()
                .zip(f.bbox.to_array())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 4.0;
            correct += (t.label == f.label) as usize;
            matched += 1;
        }
    }
    let gt_boxes = gt.annotations().len();
    let fused_boxes = fused.annotations().len();
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    RecoveryReport {
        gt_boxes,
        fused_boxes,
        matched,
        center_rmse: if matched == 0 { 0.0 } else { (sq_center / matched as f64).sqrt() },
        edge_mae: if matched == 0 { 0.0 } else { abs_edge / matched as f64 },
        label_accuracy: if matched == 0 { 1.0 } else { correct as f64 / matched as f64 },
        missed_fraction: frac(gt_boxes - matched, gt_boxes),
        spurious_fraction: frac(fused_boxes - matched, fused_boxes),
    }
}
