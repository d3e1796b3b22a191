use std::path::PathBuf;

use bitefuse::metrics::{aggregate_folds, summaries_csv, EvaluationReport, FoldSummary};
use serde::Serialize;

use super::eval::EvalOutput;
use crate::run::{csv_path_for, manifest_path_for, Run};
use crate::validation_error;

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Per-fold `eval` outputs (at least two).
    #[arg(long, short, required = true, num_args = 2..)]
    input: Vec<PathBuf>,
    /// Summary JSON; a CSV table of "mean ± std" cells is written next to it.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct SummaryRow {
    source: String,
    summary: FoldSummary,
}

pub fn run(args: Args, jobs: usize) -> anyhow::Result<()> {
    let mut run = Run::new("report", &args, jobs)?;
    let mut folds = Vec::with_capacity(args.input.len());
    for path in &args.input {
        let text = run.read_text(path)?;
        let doc: EvalOutput = serde_json::from_str(&text).map_err(|e| bitefuse::Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        folds.push(doc);
    }

    // rows are matched by source name, in the order of the first file
    let mut rows = Vec::new();
    for first in &folds[0].rows {
        let reports = folds
            .iter()
            .zip(&args.input)
            .map(|(fold, path)| {
                fold.rows
                    .iter()
                    .find(|r| r.source == first.source)
                    .map(|r| r.report.clone())
                    .ok_or_else(|| validation_error(format!("{} has no row for {:?}", path.display(), first.source)))
            })
            .collect::<anyhow::Result<Vec<EvaluationReport>>>()?;
        rows.push(SummaryRow {
            source: first.source.clone(),
            summary: aggregate_folds(&reports)?,
        });
    }

    let table: Vec<(String, FoldSummary)> = rows.iter().map(|r| (r.source.clone(), r.summary.clone())).collect();
    run.write_json(&args.output, &rows)?;
    run.write_text(&args.csv.unwrap_or_else(|| csv_path_for(&args.output)), &summaries_csv(&table))?;
    run.finish(&manifest_path_for(&args.output))
}
