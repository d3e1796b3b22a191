use std::path::PathBuf;

use bitefuse::annotations::{filter_dataset, merge_grades, FilterOptions, FilterReport};
use bitefuse::fusion::{fuse_annotation_set, FusionConfig, FusionDiagnostics, Strategy};
use bitefuse::{CariesClass, LabelSpace, SeverityOrder};
use serde::Serialize;

use crate::run::{manifest_path_for, Run};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Annotation files (JSON or CSV); several files are pooled.
    #[arg(long, short, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Consensus output; format follows the extension.
    #[arg(long, short)]
    output: PathBuf,
    /// Also write group memberships, vote tallies and dropped groups as JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long, default_value = "gmm")]
    strategy: Strategy,
    /// Minimum IoU with a group's running mean box to join it.
    #[arg(long, default_value_t = 0.3)]
    grouping_iou: f64,
    /// Probability mass of the consensus interval on each axis.
    #[arg(long = "p", default_value_t = 0.954500)]
    mass_p: f64,
    #[arg(long, default_value_t = 4.0)]
    sigma_divisor: f64,
    /// Groups supported by fewer annotators are dropped.
    #[arg(long, default_value_t = 1)]
    min_votes: usize,
    /// Vote tie-break order, most severe first, comma separated.
    #[arg(long, value_delimiter = ',')]
    severity: Option<Vec<CariesClass>>,
    /// Keep images flagged as rejected.
    #[arg(long)]
    keep_rejected: bool,
    /// Keep images with unknown-grade boxes (raw labels are then not merged).
    #[arg(long)]
    keep_unknown_grade: bool,
    /// File of image ids to drop, one per line.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Fuse raw grades instead of the merged classes.
    #[arg(long)]
    no_merge: bool,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    inputs: &'a [PathBuf],
    fusion: &'a FusionConfig,
    keep_rejected: bool,
    keep_unknown_grade: bool,
    exclude: &'a Option<PathBuf>,
    merge: bool,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    filter: &'a FilterReport,
    fusion: &'a FusionDiagnostics,
}

pub fn run(args: Args, jobs: usize) -> anyhow::Result<()> {
    let severity = args
        .severity
        .map(|mut most_first| {
            most_first.reverse();
            SeverityOrder::new(most_first)
        })
        .transpose()?;
    let config = FusionConfig {
        grouping_iou: args.grouping_iou,
        mass_p: args.mass_p,
        sigma_divisor: args.sigma_divisor,
        min_votes: args.min_votes,
        strategy: args.strategy,
        severity,
    };
    config.validate()?;
    let mut run = Run::new(
        "fuse",
        &RunConfig {
            inputs: &args.input,
            fusion: &config,
            keep_rejected: args.keep_rejected,
            keep_unknown_grade: args.keep_unknown_grade,
            exclude: &args.exclude,
            merge: !args.no_merge,
        },
        jobs,
    )?;

    let set = run.read_annotation_union(&args.input)?;
    let exclude_ids = match &args.exclude {
        Some(p) => run.read_id_list(p)?,
        None => Vec::new(),
    };
    let (filtered, filter_report) = filter_dataset(
        &set,
        &FilterOptions {
            drop_rejected: !args.keep_rejected,
            drop_unknown_grade_images: !args.keep_unknown_grade,
            exclude_ids,
        },
    );
    log::info!(
        "filter: {} images in, {} rejected, {} with unknown grade, {} excluded, {} remain",
        filter_report.input_images,
        filter_report.rejected,
        filter_report.unknown_grade,
        filter_report.excluded,
        filter_report.remaining
    );
    let prepared = if filtered.label_space() == LabelSpace::Raw && !args.no_merge {
        merge_grades(&filtered)?
    } else {
        filtered
    };
    let out = fuse_annotation_set(&prepared, &config)?;

    run.write_annotations(&args.output, &out.set)?;
    if let Some(path) = &args.diagnostics {
        run.write_json(
            path,
            &Diagnostics {
                filter: &filter_report,
                fusion: &out.diagnostics,
            },
        )?;
    }
    run.finish(&manifest_path_for(&args.output))
}
