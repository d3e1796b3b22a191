use std::path::PathBuf;

use bitefuse::metrics::{evaluate, reports_csv, EvalConfig, EvaluationReport, DEFAULT_IOU_THRESHOLD};
use bitefuse::{AnnotationSet, CariesClass};
use serde::{Deserialize, Serialize};

use super::{default_row_name, restrict};
use crate::run::{csv_path_for, manifest_path_for, Run};
use crate::validation_error;

/// Options shared by `eval` and `ci`.
#[derive(clap::Args, Debug, Serialize)]
pub struct EvalInputs {
    /// Prediction files (or annotator files with --per-source); pooled.
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth (consensus) file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Restrict scoring to the image ids listed in this file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Score each source id separately.
    #[arg(long)]
    pub per_source: bool,
    /// Row name when scoring the predictions as a whole.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long = "iou", default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    /// Confidence cut-off for F1 and FNR.
    #[arg(long = "conf", default_value_t = 0.0)]
    pub confidence_threshold: f64,
    /// Classes to score, comma separated (default: the three merged classes).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<CariesClass>>,
}

impl EvalInputs {
    pub fn config(&self) -> EvalConfig {
        let mut cfg = EvalConfig {
            iou_threshold: self.iou_threshold,
            confidence_threshold: self.confidence_threshold,
            ..EvalConfig::default()
        };
        if let Some(classes) = &self.classes {
            cfg.classes = classes.clone();
        }
        cfg
    }

    /// Loads the files and returns the named prediction subsets with the ground truth.
    pub fn load(&self, run: &mut Run) -> anyhow::Result<(Vec<(String, AnnotationSet)>, AnnotationSet)> {
        let pred = run.read_annotation_union(&self.pred)?;
        let gt = run.read_annotations(&self.gt)?;
        let (pred, gt) = match &self.images {
            Some(path) => {
                let ids = run.read_id_list(path)?;
                restrict(&pred, &gt, &ids)
            }
            None => (pred, gt),
        };
        if gt.annotations().is_empty() {
            return Err(validation_error(format!("ground truth {} has no boxes", self.gt.display())));
        }
        let rows = if self.per_source {
            pred.sources().into_iter().map(|s| (s.clone(), pred.only_source(&s))).collect()
        } else {
            let name = self.name.clone().unwrap_or_else(|| default_row_name(&pred));
            vec![(name, pred)]
        };
        Ok((rows, gt))
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    inputs: EvalInputs,
    /// Report JSON; a CSV table is written next to it.
    #[arg(long, short)]
    output: PathBuf,
    /// CSV table path (default: the output path with a .csv extension).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: String,
    pub report: EvaluationReport,
}

/// JSON document written by `eval` and read by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
}

pub fn run(args: Args, jobs: usize) -> anyhow::Result<()> {
    let config = args.inputs.config();
    config.validate()?;
    let mut run = Run::new("eval", &args.inputs, jobs)?;
    let (rows, gt) = args.inputs.load(&mut run)?;
    let rows = rows
        .into_iter()
        .map(|(source, pred)| Ok(EvalRow { report: evaluate(&pred, &gt, &config)?, source }))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let table: Vec<(String, EvaluationReport)> = rows.iter().map(|r| (r.source.clone(), r.report.clone())).collect();
    run.write_json(&args.output, &EvalOutput { rows })?;
    run.write_text(&args.csv.unwrap_or_else(|| csv_path_for(&args.output)), &reports_csv(&table))?;
    run.finish(&manifest_path_for(&args.output))
}
