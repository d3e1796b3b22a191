//! Bias-corrected and accelerated (BCa) bootstrap intervals.
//!
//! The resampling unit is the test image: every replicate draws `n` image indices
//! with replacement and re-scores the statistic on that multiset. Replicate `b` uses
//! its own ChaCha stream `(seed, b)`, so results do not depend on the number of
//! worker threads. Acceleration comes from the leave-one-image-out jackknife.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::CariesClass;
use crate::error::{Error, Result};
use crate::metrics::{EvalIndex, EvaluationReport};
use crate::normal;

/// Redraws allowed for a replicate on which the statistic is undefined.
pub const MAX_REDRAWS: usize = 10;

/// |z0| is clamped to this when every replicate falls on one side of the estimate.
pub const Z0_CLAMP: f64 = 4.0;

/// A statistic over a sample of `n` units, evaluated on multisets of unit indices.
pub trait Statistic: Sync {
    fn sample_size(&self) -> usize;

    /// `None` when the statistic is undefined on this multiset.
    fn evaluate(&self, indices: &[usize]) -> Option<f64>;
}

/// Arithmetic mean of a slice of observations.
pub struct SampleMean<'a>(pub &'a [f64]);

impl Statistic for SampleMean<'_> {
    fn sample_size(&self) -> usize {
        self.0.len()
    }

    fn evaluate(&self, indices: &[usize]) -> Option<f64> {
        if indices.is_empty() {
            return None;
        }
        Some(indices.iter().map(|&i| self.0[i]).sum::<f64>() / indices.len() as f64)
    }
}

/// Which evaluation number a detection bootstrap tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricName {
    Map,
    Mf1,
    Mfnr,
    Ap(CariesClass),
    F1(CariesClass),
    Fnr(CariesClass),
}

impl MetricName {
    /// Reads the metric from a report; `None` if it is undefined there (no ground
    /// truth for the class, or for every class in the macro case).
    pub fn value(&self, report: &EvaluationReport) -> Option<f64> {
        let per_class = |c: CariesClass| report.class(c).filter(|m| !m.excluded);
        let macro_defined = report.macro_avg.included_classes > 0;
        match *self {
            MetricName::Map => macro_defined.then_some(report.macro_avg.map),
            MetricName::Mf1 => macro_defined.then_some(report.macro_avg.mf1),
            MetricName::Mfnr => macro_defined.then_some(report.macro_avg.mfnr),
            MetricName::Ap(c) => per_class(c).map(|m| m.ap),
            MetricName::F1(c) => per_class(c).map(|m| m.f1),
            MetricName::Fnr(c) => per_class(c).map(|m| m.fnr),
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricName::Map => f.write_str("map"),
            MetricName::Mf1 => f.write_str("mf1"),
            MetricName::Mfnr => f.write_str("mfnr"),
            MetricName::Ap(c) => write!(f, "ap:{c}"),
            MetricName::F1(c) => write!(f, "f1:{c}"),
            MetricName::Fnr(c) => write!(f, "fnr:{c}"),
        }
    }
}

impl FromStr for MetricName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "map" => return Ok(MetricName::Map),
            "mf1" => return Ok(MetricName::Mf1),
            "mfnr" => return Ok(MetricName::Mfnr),
            _ => {}
        }
        let (kind, class) = s
            .split_once(':')
            .ok_or_else(|| format!("unknown statistic {s:?} (expected map, mf1, mfnr or <ap|f1|fnr>:<class>)"))?;
        let class: CariesClass = class.parse()?;
        match kind {
            "ap" => Ok(MetricName::Ap(class)),
            "f1" => Ok(MetricName::F1(class)),
            "fnr" => Ok(MetricName::Fnr(class)),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl Serialize for MetricName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A detection metric over the images of an [`EvalIndex`].
pub struct DetectionStatistic<'a> {
    pub index: &'a EvalIndex,
    pub metric: MetricName,
}

impl Statistic for DetectionStatistic<'_> {
    fn sample_size(&self) -> usize {
        self.index.len()
    }

    fn evaluate(&self, indices: &[usize]) -> Option<f64> {
        self.metric.value(&self.index.report(indices))
    }
}

/// The metric evaluated on a resampled multiset of test images.
pub fn resample_statistic(index: &EvalIndex, images: &[usize], metric: MetricName) -> Option<f64> {
    DetectionStatistic { index, metric }.evaluate(images)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            iterations: 1000,
            confidence: 0.95,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("bootstrap needs at least one iteration".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "confidence level must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// RNG for replicate `replicate` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// `config.iterations` bootstrap replicates of `stat`, in replicate order.
pub fn bootstrap_replicates<S: Statistic + ?Sized>(stat: &S, config: &BootstrapConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = stat.sample_size();
    if n == 0 {
        return Err(Error::Validation("cannot bootstrap an empty sample".into()));
    }
    (0..config.iterations as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(config.seed, b);
            let mut draw = vec![0usize; n];
            for _ in 0..=MAX_REDRAWS {
                for slot in draw.iter_mut() {
                    *slot = rng.random_range(0..n);
                }
                if let Some(v) = stat.evaluate(&draw) {
                    return Ok(v);
                }
            }
            Err(Error::Validation(format!(
                "statistic undefined on replicate {b} after {MAX_REDRAWS} redraws"
            )))
        })
        .collect()
}

/// Leave-one-out values and the acceleration they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct Jackknife {
    /// `values[i]` is the statistic without unit `i`; `None` where undefined.
    pub values: Vec<Option<f64>>,
    pub acceleration: f64,
}

pub fn jackknife<S: Statistic + ?Sized>(stat: &S) -> Result<Jackknife> {
    let n = stat.sample_size();
    if n < 2 {
        return Err(Error::Validation(format!("jackknife needs at least 2 units, got {n}")));
    }
    let values: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|skip| {
            let rest: Vec<usize> = (0..n).filter(|&i| i != skip).collect();
            stat.evaluate(&rest)
        })
        .collect();
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    Ok(Jackknife {
        acceleration: acceleration(&defined),
        values,
    })
}

/// `a = Σ(θ̄ - θᵢ)³ / (6 [Σ(θ̄ - θᵢ)²]^{3/2})`, or 0 when the denominator vanishes.
pub fn acceleration(jack: &[f64]) -> f64 {
    if jack.is_empty() {
        return 0.0;
    }
    let mean = jack.iter().sum::<f64>() / jack.len() as f64;
    let (mut s2, mut s3) = (0.0, 0.0);
    for &v in jack {
        let d = mean - v;
        s2 += d * d;
        s3 += d * d * d;
    }
    let den = 6.0 * s2.powf(1.5);
    if den == 0.0 || !den.is_finite() {
        0.0
    } else {
        s3 / den
    }
}

/// Linear interpolation between order statistics of sorted data at level `q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Plain percentile interval of the replicates.
pub fn percentile_interval(replicates: &[f64], confidence: f64) -> (f64, f64) {
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - confidence;
    (
        quantile_sorted(&sorted, alpha / 2.0),
        quantile_sorted(&sorted, 1.0 - alpha / 2.0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcaInterval {
    pub statistic: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub z0: f64,
    pub acceleration: f64,
    pub iterations: usize,
    pub confidence: f64,
    pub seed: u64,
    pub degenerate: bool,
}

impl BcaInterval {
    /// `"x.xxx [l.lll, u.uuu]"`.
    pub fn cell(&self) -> String {
        format!("{:.3} [{:.3}, {:.3}]", self.point, self.lower, self.upper)
    }
}

/// Endpoints and diagnostics of a BCa interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcaEndpoints {
    pub lower: f64,
    pub upper: f64,
    pub z0: f64,
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub degenerate: bool,
}

/// BCa endpoints from a point estimate, its replicates and the acceleration.
pub fn bca_from_replicates(point: f64, replicates: &[f64], acceleration: f64, confidence: f64) -> BcaEndpoints {
    assert!(!replicates.is_empty(), "no bootstrap replicates");
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);

    if sorted[0] == sorted[sorted.len() - 1] {
        return BcaEndpoints {
            lower: point,
            upper: point,
            z0: 0.0,
            alpha_lower: 0.5,
            alpha_upper: 0.5,
            degenerate: true,
        };
    }

    let below = sorted.iter().filter(|&&v| v < point).count() as f64;
    let ties = sorted.iter().filter(|&&v| v == point).count() as f64;
    let share = (below + 0.5 * ties) / sorted.len() as f64;
    let mut degenerate = false;
    let raw_z0 = normal::quantile(share);
    let z0 = if raw_z0.abs() > Z0_CLAMP {
        degenerate = true;
        raw_z0.clamp(-Z0_CLAMP, Z0_CLAMP)
    } else {
        raw_z0
    };

    let alpha = 1.0 - confidence;
    let (alpha_lower, alpha_upper) = if z0 == 0.0 && acceleration == 0.0 {
        (alpha / 2.0, 1.0 - alpha / 2.0)
    } else {
        let adjust = |z: f64, fallback: f64, degenerate: &mut bool| {
            let shifted = z0 + z;
            let den = 1.0 - acceleration * shifted;
            if den <= 0.0 {
                *degenerate = true;
                fallback
            } else {
                normal::cdf(z0 + shifted / den)
            }
        };
        (
            adjust(normal::quantile(alpha / 2.0), 0.0, &mut degenerate),
            adjust(normal::quantile(1.0 - alpha / 2.0), 1.0, &mut degenerate),
        )
    };

    let lower = quantile_sorted(&sorted, alpha_lower);
    let upper = quantile_sorted(&sorted, alpha_upper);
    if !(lower <= point && point <= upper) {
        degenerate = true;
    }
    BcaEndpoints {
        lower,
        upper,
        z0,
        alpha_lower,
        alpha_upper,
        degenerate,
    }
}

/// Full BCa interval for `stat`: point estimate on the whole sample, bootstrap
/// replicates and jackknife acceleration.
pub fn bca_interval<S: Statistic + ?Sized>(stat: &S, name: &str, config: &BootstrapConfig) -> Result<BcaInterval> {
    config.validate()?;
    let n = stat.sample_size();
    let all: Vec<usize> = (0..n).collect();
    let point = stat
        .evaluate(&all)
        .ok_or_else(|| Error::Validation(format!("statistic {name} is undefined on the full sample")))?;
    let replicates = bootstrap_replicates(stat, config)?;
    let acceleration = if n >= 2 { jackknife(stat)?.acceleration } else { 0.0 };
    let ends = bca_from_replicates(point, &replicates, acceleration, config.confidence);
    Ok(BcaInterval {
        statistic: name.to_owned(),
        point,
        lower: ends.lower,
        upper: ends.upper,
        z0: ends.z0,
        acceleration,
        iterations: config.iterations,
        confidence: config.confidence,
        seed: config.seed,
        degenerate: ends.degenerate,
    })
}

/// BCa interval of a detection metric over the test images of `index`.
pub fn detection_bca(index: &EvalIndex, metric: MetricName, config: &BootstrapConfig) -> Result<BcaInterval> {
    let stat = DetectionStatistic { index, metric };
    bca_interval(&stat, &metric.to_string(), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    AHigher,
    BHigher,
    NotSignificant,
}

/// Significance by interval overlap: closed intervals that share any point are not
/// significantly different.
pub fn compare_by_overlap(a: &BcaInterval, b: &BcaInterval) -> Result<Significance> {
    if a.statistic != b.statistic {
        return Err(Error::Validation(format!(
            "cannot compare intervals of {} and {}",
            a.statistic, b.statistic
        )));
    }
    if a.confidence != b.confidence {
        return Err(Error::Validation("intervals have different confidence levels".into()));
    }
    Ok(if a.lower > b.upper {
        Significance::AHigher
    } else if b.lower > a.upper {
        Significance::BHigher
    } else {
        Significance::NotSignificant
    })
}
