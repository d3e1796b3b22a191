//! Annotation data model, file formats and dataset-level transforms.
//!
//! An [`AnnotationSet`] holds the images of a dataset and the labeled boxes drawn on
//! them by one or more sources (annotators or detectors). Sets are validated on
//! construction and immutable afterwards, so they can be shared freely between
//! worker threads.
//!
//! Two on-disk encodings are supported: a JSON document and a flat CSV table. Both
//! carry boxes as absolute `[x_min, y_min, x_max, y_max]` pixel coordinates.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lesion label. Raw grades and merged groups share one enum; [`LabelSpace`] says
/// which of them a dataset may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CariesClass {
    #[serde(rename = "grade_1")]
    Grade1,
    #[serde(rename = "grade_2")]
    Grade2,
    #[serde(rename = "grade_3")]
    Grade3,
    #[serde(rename = "grade_4")]
    Grade4,
    #[serde(rename = "grade_5")]
    Grade5,
    #[serde(rename = "secondary_lesion")]
    SecondaryLesion,
    #[serde(rename = "unknown_grade")]
    UnknownGrade,
    #[serde(rename = "enamel_caries")]
    EnamelCaries,
    #[serde(rename = "dentine_caries")]
    DentineCaries,
}

impl CariesClass {
    pub const ALL: [CariesClass; 9] = [
        CariesClass::Grade1,
        CariesClass::Grade2,
        CariesClass::Grade3,
        CariesClass::Grade4,
        CariesClass::Grade5,
        CariesClass::SecondaryLesion,
        CariesClass::UnknownGrade,
        CariesClass::EnamelCaries,
        CariesClass::DentineCaries,
    ];

    /// The three evaluation classes of the merged label space.
    pub const MERGED: [CariesClass; 3] = [
        CariesClass::EnamelCaries,
        CariesClass::DentineCaries,
        CariesClass::SecondaryLesion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CariesClass::Grade1 => "grade_1",
            CariesClass::Grade2 => "grade_2",
            CariesClass::Grade3 => "grade_3",
            CariesClass::Grade4 => "grade_4",
            CariesClass::Grade5 => "grade_5",
            CariesClass::SecondaryLesion => "secondary_lesion",
            CariesClass::UnknownGrade => "unknown_grade",
            CariesClass::EnamelCaries => "enamel_caries",
            CariesClass::DentineCaries => "dentine_caries",
        }
    }
}

impl fmt::Display for CariesClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CariesClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CariesClass::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown label {s:?}"))
    }
}

/// Which label namespace a dataset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSpace {
    Raw,
    Merged,
}

impl LabelSpace {
    pub fn admits(self, class: CariesClass) -> bool {
        use CariesClass::*;
        match self {
            LabelSpace::Raw => !matches!(class, EnamelCaries | DentineCaries),
            LabelSpace::Merged => matches!(class, EnamelCaries | DentineCaries | SecondaryLesion),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSpace::Raw => "raw",
            LabelSpace::Merged => "merged",
        }
    }
}

impl FromStr for LabelSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(LabelSpace::Raw),
            "merged" => Ok(LabelSpace::Merged),
            other => Err(format!("unknown label space {other:?}")),
        }
    }
}

/// Total severity order used to break label-vote ties.
///
/// Classes are listed from least to most severe. Classes not in the list rank below
/// every listed class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityOrder {
    ascending: Vec<CariesClass>,
}

impl SeverityOrder {
    pub fn new(ascending: Vec<CariesClass>) -> Result<Self> {
        let unique: HashSet<_> = ascending.iter().collect();
        if unique.len() != ascending.len() {
            return Err(Error::Config("severity order lists a class twice".into()));
        }
        Ok(Self { ascending })
    }

    /// Grade1 < Grade2 < SecondaryLesion < Grade3 < Grade4 < Grade5.
    pub fn default_raw() -> Self {
        use CariesClass::*;
        Self {
            ascending: vec![UnknownGrade, Grade1, Grade2, SecondaryLesion, Grade3, Grade4, Grade5],
        }
    }

    /// EnamelCaries < SecondaryLesion < DentineCaries.
    pub fn default_merged() -> Self {
        use CariesClass::*;
        Self {
            ascending: vec![EnamelCaries, SecondaryLesion, DentineCaries],
        }
    }

    pub fn default_for(space: LabelSpace) -> Self {
        match space {
            LabelSpace::Raw => Self::default_raw(),
            LabelSpace::Merged => Self::default_merged(),
        }
    }

    /// Rank of `class`; higher is more severe. Unlisted classes rank 0.
    pub fn rank(&self, class: CariesClass) -> usize {
        self.ascending
            .iter()
            .position(|&c| c == class)
            .map_or(0, |i| i + 1)
    }

    pub fn most_severe<I: IntoIterator<Item = CariesClass>>(&self, classes: I) -> Option<CariesClass> {
        classes.into_iter().max_by_key(|&c| (self.rank(c), c))
    }

    pub fn classes(&self) -> &[CariesClass] {
        &self.ascending
    }
}

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Checked constructor: finite, non-negative and with strictly positive extent.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self::unchecked(x_min, y_min, x_max, y_max);
        b.check()?;
        Ok(b)
    }

    /// Constructs a box without validation. Geometry helpers work on any box; only
    /// sets built through [`AnnotationSet::new`] are guaranteed valid.
    pub const fn unchecked(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    fn check(&self) -> Result<()> {
        let coords = self.to_array();
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {coords:?}")));
        }
        if coords.iter().any(|&c| c < 0.0) {
            return Err(Error::Validation(format!("negative coordinate in box {coords:?}")));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Validation(format!("degenerate box {coords:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::unchecked(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::unchecked(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Lexicographic comparison on `(x_min, y_min, x_max, y_max)`.
    pub fn lex_cmp(&self, other: &BoundingBox) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }

    fn key_bits(&self) -> [u64; 4] {
        self.to_array().map(f64::to_bits)
    }
}

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Box encoding used by an input file. Everything is converted to corner form at
/// parse time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    #[default]
    Xyxy,
    Xywh,
    Cxcywh,
}

impl BoxFormat {
    fn to_box(self, v: [f64; 4]) -> Result<BoundingBox> {
        match self {
            BoxFormat::Xyxy => BoundingBox::new(v[0], v[1], v[2], v[3]),
            BoxFormat::Xywh => BoundingBox::from_xywh(v[0], v[1], v[2], v[3]),
            BoxFormat::Cxcywh => BoundingBox::from_cxcywh(v[0], v[1], v[2], v[3]),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    #[default]
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

impl ImageInfo {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            status: ImageStatus::Accepted,
            patient_id: None,
        }
    }

    pub fn rejected(mut self) -> Self {
        self.status = ImageStatus::Rejected;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub source_id: String,
    pub label: CariesClass,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Annotation {
    /// Human annotation: confidence fixed at 1.0.
    pub fn new(
        image_id: impl Into<String>,
        source_id: impl Into<String>,
        label: CariesClass,
        bbox: BoundingBox,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            source_id: source_id.into(),
            label,
            bbox,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }
}

/// A validated collection of images and annotations in one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    images: Vec<ImageInfo>,
    annotations: Vec<Annotation>,
    label_space: LabelSpace,
}

impl AnnotationSet {
    pub fn new(
        images: Vec<ImageInfo>,
        annotations: Vec<Annotation>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        let mut dims: HashMap<&str, (u32, u32)> = HashMap::with_capacity(images.len());
        for img in &images {
            if dims.insert(img.id.as_str(), (img.width, img.height)).is_some() {
                return Err(Error::Validation(format!("duplicate image id {:?}", img.id)));
            }
        }

        let mut seen = HashSet::with_capacity(annotations.len());
        for (i, ann) in annotations.iter().enumerate() {
            let at = |msg: String| Error::Validation(format!("annotation #{i}: {msg}"));
            let &(w, h) = dims
                .get(ann.image_id.as_str())
                .ok_or_else(|| at(format!("unknown image_id {:?}", ann.image_id)))?;
            ann.bbox.check().map_err(|e| at(strip_validation(e)))?;
            if ann.bbox.x_max > w as f64 || ann.bbox.y_max > h as f64 {
                return Err(at(format!(
                    "box {:?} outside image {:?} ({w}x{h})",
                    ann.bbox.to_array(),
                    ann.image_id
                )));
            }
            if !(0.0..=1.0).contains(&ann.confidence) {
                return Err(at(format!("confidence {} outside [0,1]", ann.confidence)));
            }
            if !label_space.admits(ann.label) {
                return Err(at(format!(
                    "label {} not allowed in {} label space",
                    ann.label,
                    label_space.as_str()
                )));
            }
            let key = (
                ann.image_id.as_str(),
                ann.source_id.as_str(),
                ann.bbox.key_bits(),
                ann.label,
            );
            if !seen.insert(key) {
                return Err(at("duplicate (image_id, source_id, box, label)".into()));
            }
        }

        Ok(Self {
            images,
            annotations,
            label_space,
        })
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn into_parts(self) -> (Vec<ImageInfo>, Vec<Annotation>, LabelSpace) {
        (self.images, self.annotations, self.label_space)
    }

    pub fn image(&self, id: &str) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Distinct source ids, sorted.
    pub fn sources(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.annotations.iter().map(|a| a.source_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Annotations grouped per image, in image order. Images without annotations get
    /// an empty slot.
    pub fn by_image(&self) -> Vec<(&ImageInfo, Vec<&Annotation>)> {
        let index: HashMap<&str, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.id.as_str(), i))
            .collect();
        let mut out: Vec<(&ImageInfo, Vec<&Annotation>)> =
            self.images.iter().map(|img| (img, Vec::new())).collect();
        for ann in &self.annotations {
            out[index[ann.image_id.as_str()]].1.push(ann);
        }
        out
    }

    /// Keeps only annotations from `source`; the image list is unchanged.
    pub fn only_source(&self, source: &str) -> AnnotationSet {
        AnnotationSet {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| a.source_id == source)
                .cloned()
                .collect(),
            label_space: self.label_space,
        }
    }

    /// Keeps only the listed images (and their annotations), in the set's own order.
    pub fn restrict_to_images<S: AsRef<str>>(&self, ids: &[S]) -> AnnotationSet {
        let keep: HashSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        AnnotationSet {
            images: self
                .images
                .iter()
                .filter(|i| keep.contains(i.id.as_str()))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep.contains(a.image_id.as_str()))
                .cloned()
                .collect(),
            label_space: self.label_space,
        }
    }

    /// Combines several files of the same dataset (e.g. one per annotator).
    ///
    /// Images are matched by id and must agree on dimensions; an image is rejected in
    /// the result if any input flagged it.
    pub fn union(sets: Vec<AnnotationSet>) -> Result<AnnotationSet> {
        let Some(label_space) = sets.first().map(|s| s.label_space) else {
            return Err(Error::Config("no annotation sets to combine".into()));
        };
        let mut images: Vec<ImageInfo> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut annotations = Vec::new();
        for set in sets {
            if set.label_space != label_space {
                return Err(Error::Validation(
                    "cannot combine raw-labeled and merged-labeled files".into(),
                ));
            }
            for img in set.images {
                match index.get(&img.id) {
                    Some(&i) => {
                        let existing = &mut images[i];
                        if (existing.width, existing.height) != (img.width, img.height) {
                            return Err(Error::Validation(format!(
                                "image {:?} has conflicting sizes {}x{} and {}x{}",
                                img.id, existing.width, existing.height, img.width, img.height
                            )));
                        }
                        if img.status == ImageStatus::Rejected {
                            existing.status = ImageStatus::Rejected;
                        }
                        if existing.patient_id.is_none() {
                            existing.patient_id = img.patient_id;
                        }
                    }
                    None => {
                        index.insert(img.id.clone(), images.len());
                        images.push(img);
                    }
                }
            }
            annotations.extend(set.annotations);
        }
        AnnotationSet::new(images, annotations, label_space)
    }
}

fn strip_validation(e: Error) -> String {
    match e {
        Error::Validation(m) => m,
        other => other.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Grade merging and filtering

/// Maps raw grades onto the merged label space: grades 1-2 become enamel caries,
/// grades 3-5 dentine caries; secondary lesions are kept.
pub fn merge_grades(set: &AnnotationSet) -> Result<AnnotationSet> {
    if set.label_space != LabelSpace::Raw {
        return Err(Error::Validation("annotation set is already merged".into()));
    }
    let annotations = set
        .annotations
        .iter()
        .map(|a| {
            let label = merged_label(a.label).ok_or_else(|| {
                Error::Validation(format!(
                    "image {:?} has an unknown_grade annotation; filter it out before merging",
                    a.image_id
                ))
            })?;
            Ok(Annotation { label, ..a.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    AnnotationSet::new(set.images.clone(), annotations, LabelSpace::Merged)
}

fn merged_label(raw: CariesClass) -> Option<CariesClass> {
    use CariesClass::*;
    match raw {
        Grade1 | Grade2 => Some(EnamelCaries),
        Grade3 | Grade4 | Grade5 => Some(DentineCaries),
        SecondaryLesion => Some(SecondaryLesion),
        UnknownGrade | EnamelCaries | DentineCaries => None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOptions {
    pub drop_rejected: bool,
    pub drop_unknown_grade_images: bool,
    pub exclude_ids: Vec<String>,
}

/// Per-category removal counts. Categories can overlap, so the counts need not sum
/// to `input_images - remaining`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub input_images: usize,
    pub rejected: usize,
    pub unknown_grade: usize,
    pub excluded: usize,
    pub remaining: usize,
    /// Entries of `exclude_ids` that matched no image.
    pub unmatched_exclude_ids: Vec<String>,
}

pub fn filter_dataset(set: &AnnotationSet, opts: &FilterOptions) -> (AnnotationSet, FilterReport) {
    let unknown_images: HashSet<&str> = set
        .annotations
        .iter()
        .filter(|a| a.label == CariesClass::UnknownGrade)
        .map(|a| a.image_id.as_str())
        .collect();
    let exclude: HashSet<&str> = opts.exclude_ids.iter().map(String::as_str).collect();
    let known: HashSet<&str> = set.images.iter().map(|i| i.id.as_str()).collect();

    let mut report = FilterReport {
        input_images: set.images.len(),
        unmatched_exclude_ids: opts
            .exclude_ids
            .iter()
            .filter(|id| !known.contains(id.as_str()))
            .cloned()
            .collect(),
        ..Default::default()
    };
    for id in &report.unmatched_exclude_ids {
        log::warn!("exclude list names unknown image {id:?}");
    }

    let mut keep = HashSet::new();
    for img in &set.images {
        let rejected = opts.drop_rejected && img.status == ImageStatus::Rejected;
        let unknown = opts.drop_unknown_grade_images && unknown_images.contains(img.id.as_str());
        let excluded = exclude.contains(img.id.as_str());
        report.rejected += rejected as usize;
        report.unknown_grade += unknown as usize;
        report.excluded += excluded as usize;
        if !(rejected || unknown || excluded) {
            keep.insert(img.id.as_str());
        }
    }
    report.remaining = keep.len();

    let out = AnnotationSet {
        images: set
            .images
            .iter()
            .filter(|i| keep.contains(i.id.as_str()))
            .cloned()
            .collect(),
        annotations: set
            .annotations
            .iter()
            .filter(|a| keep.contains(a.image_id.as_str()))
            .cloned()
            .collect(),
        label_space: set.label_space,
    };
    (out, report)
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Json,
    Csv,
}

impl FileFormat {
    /// Guesses the format from the file extension; anything but `.csv` is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Json,
        }
    }
}

impl FromStr for FileFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(FileFormat::Json),
            "csv" => Ok(FileFormat::Csv),
            other => Err(format!("unknown file format {other:?}")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonDocument {
    images: Vec<ImageInfo>,
    annotations: Vec<JsonAnnotation>,
    label_space: LabelSpace,
    #[serde(default, skip_serializing_if = "is_default_format")]
    bbox_format: BoxFormat,
}

fn is_default_format(f: &BoxFormat) -> bool {
    *f == BoxFormat::Xyxy
}

#[derive(Serialize, Deserialize)]
struct JsonAnnotation {
    image_id: String,
    source_id: String,
    label: String,
    bbox: Vec<f64>,
    #[serde(default = "one")]
    confidence: f64,
}

fn one() -> f64 {
    1.0
}

pub fn parse_annotation_file(path: &Path, format: FileFormat) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    match format {
        FileFormat::Json => parse_json(&text, &origin),
        FileFormat::Csv => parse_csv(&text, &origin, BoxFormat::Xyxy),
    }
}

/// Parses the JSON encoding. `origin` names the input in error messages.
pub fn parse_json(text: &str, origin: &str) -> Result<AnnotationSet> {
    let doc: JsonDocument = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string())
    })?;
    let annotations = doc
        .annotations
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            let loc = || format!("{origin} annotation #{i}");
            let label = raw
                .label
                .parse::<CariesClass>()
                .map_err(|m| Error::parse(loc(), m))?;
            let coords: [f64; 4] = raw.bbox.as_slice().try_into().map_err(|_| {
                Error::parse(loc(), format!("bbox needs 4 numbers, got {}", raw.bbox.len()))
            })?;
            let bbox = doc
                .bbox_format
                .to_box(coords)
                .map_err(|e| Error::Validation(format!("{}: {}", loc(), strip_validation(e))))?;
            Ok(Annotation {
                image_id: raw.image_id,
                source_id: raw.source_id,
                label,
                bbox,
                confidence: raw.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AnnotationSet::new(doc.images, annotations, doc.label_space)
        .map_err(|e| Error::Validation(format!("{origin}: {}", strip_validation(e))))
}

pub fn to_json(set: &AnnotationSet) -> String {
    let doc = JsonDocument {
        images: set.images.clone(),
        annotations: set
            .annotations
            .iter()
            .map(|a| JsonAnnotation {
                image_id: a.image_id.clone(),
                source_id: a.source_id.clone(),
                label: a.label.as_str().to_owned(),
                bbox: a.bbox.to_array().to_vec(),
                confidence: a.confidence,
            })
            .collect(),
        label_space: set.label_space,
        bbox_format: BoxFormat::Xyxy,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("annotation set serializes");
    s.push('\n');
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_id: String,
    width: u32,
    height: u32,
    #[serde(default)]
    status: ImageStatus,
    #[serde(default)]
    patient_id: Option<String>,
    #[serde(default)]
    label_space: Option<LabelSpace>,
    #[serde(default)]
    source_id: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    x_min: Option<f64>,
    #[serde(default)]
    y_min: Option<f64>,
    #[serde(default)]
    x_max: Option<f64>,
    #[serde(default)]
    y_max: Option<f64>,
    #[serde(default)]
    confidence: Option<f64>,
}

/// Parses the CSV encoding: one annotation per row, with image columns repeated.
/// A row with an empty `label` only declares its image.
pub fn parse_csv(text: &str, origin: &str, box_format: BoxFormat) -> Result<AnnotationSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut images: Vec<ImageInfo> = Vec::new();
    let mut image_index: HashMap<String, usize> = HashMap::new();
    let mut annotations = Vec::new();
    let mut label_space: Option<LabelSpace> = None;

    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let loc = || format!("{origin} line {}", i + 2);
        let row = row.map_err(|e| Error::parse(loc(), e.to_string()))?;

        if let Some(space) = row.label_space {
            match label_space {
                Some(prev) if prev != space => {
                    return Err(Error::parse(loc(), "mixed label_space values"));
                }
                _ => label_space = Some(space),
            }
        }

        match image_index.get(&row.image_id) {
            Some(&idx) => {
                let img = &images[idx];
                if (img.width, img.height, img.status) != (row.width, row.height, row.status) {
                    return Err(Error::parse(
                        loc(),
                        format!("image {:?} attributes differ from an earlier row", row.image_id),
                    ));
                }
            }
            None => {
                image_index.insert(row.image_id.clone(), images.len());
                images.push(ImageInfo {
                    id: row.image_id.clone(),
                    width: row.width,
                    height: row.height,
                    status: row.status,
                    patient_id: row.patient_id.clone(),
                });
            }
        }

        let Some(label) = row.label.filter(|l| !l.is_empty()) else {
            continue;
        };
        let label = label.parse::<CariesClass>().map_err(|m| Error::parse(loc(), m))?;
        let coords = match (row.x_min, row.y_min, row.x_max, row.y_max) {
            (Some(a), Some(b), Some(c), Some(d)) => [a, b, c, d],
            _ => return Err(Error::parse(loc(), "annotation row needs all four bbox columns")),
        };
        let bbox = box_format
            .to_box(coords)
            .map_err(|e| Error::Validation(format!("{}: {}", loc(), strip_validation(e))))?;
        annotations.push(Annotation {
            image_id: row.image_id,
            source_id: row.source_id.unwrap_or_default(),
            label,
            bbox,
            confidence: row.confidence.unwrap_or(1.0),
        });
    }

    let label_space = label_space.unwrap_or_else(|| {
        if annotations.iter().any(|a| !LabelSpace::Merged.admits(a.label)) {
            LabelSpace::Raw
        } else {
            LabelSpace::Merged
        }
    });
    AnnotationSet::new(images, annotations, label_space)
        .map_err(|e| Error::Validation(format!("{origin}: {}", strip_validation(e))))
}

/// CSV encoding: one image-only row per image, then one row per annotation.
pub fn to_csv(set: &AnnotationSet) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let dims: HashMap<&str, &ImageInfo> = set.images.iter().map(|i| (i.id.as_str(), i)).collect();
    let space = Some(set.label_space);
    for img in &set.images {
        writer
            .serialize(CsvRow {
                image_id: img.id.clone(),
                width: img.width,
                height: img.height,
                status: img.status,
                patient_id: img.patient_id.clone(),
                label_space: space,
                source_id: None,
                label: None,
                x_min: None,
                y_min: None,
                x_max: None,
                y_max: None,
                confidence: None,
            })
            .expect("in-memory csv write");
    }
    for a in &set.annotations {
        let img = dims[a.image_id.as_str()];
        writer
            .serialize(CsvRow {
                image_id: a.image_id.clone(),
                width: img.width,
                height: img.height,
                status: img.status,
                patient_id: img.patient_id.clone(),
                label_space: space,
                source_id: Some(a.source_id.clone()),
                label: Some(a.label.as_str().to_owned()),
                x_min: Some(a.bbox.x_min),
                y_min: Some(a.bbox.y_min),
                x_max: Some(a.bbox.x_max),
                y_max: Some(a.bbox.y_max),
                confidence: Some(a.confidence),
            })
            .expect("in-memory csv write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8 csv")
}

pub fn serialize(set: &AnnotationSet, format: FileFormat) -> String {
    match format {
        FileFormat::Json => to_json(set),
        FileFormat::Csv => to_csv(set),
    }
}

pub fn write_annotation_file(path: &Path, set: &AnnotationSet, format: FileFormat) -> Result<()> {
    fs::write(path, serialize(set, format)).map_err(|e| Error::io(path, e))
}
