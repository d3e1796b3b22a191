//! Consensus ground truth from multiple bounding-box annotators, and evaluation of
//! detectors and raters against it.
//!
//! - [`annotations`]: data model, JSON/CSV I/O, grade merging and dataset filtering
//! - [`fusion`]: IoU grouping, Gaussian-mixture box fusion, label voting, NMS baseline
//! - [`metrics`]: VOC-style AP, F1, FNR and fold aggregation
//! - [`bootstrap`]: BCa confidence intervals and overlap significance
//! - [`splits`]: seeded k-fold assignment and three-way rotation
//! - [`simulate`]: synthetic annotator scenes with known truth

pub mod annotations;
pub mod bootstrap;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod normal;
pub mod simulate;
pub mod splits;

pub use annotations::{
    iou, Annotation, AnnotationSet, BoundingBox, CariesClass, FileFormat, ImageInfo, ImageStatus, LabelSpace,
    SeverityOrder,
};
pub use error::{Error, ErrorKind, Result};
