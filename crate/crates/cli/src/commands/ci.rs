use std::path::PathBuf;

use bitefuse::bootstrap::{detection_bca, BcaInterval, BootstrapConfig, MetricName};
use bitefuse::metrics::EvalIndex;
use serde::Serialize;

use super::eval::EvalInputs;
use super::require_seed;
use crate::run::{csv_path_for, manifest_path_for, Run};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    inputs: EvalInputs,
    /// map, mf1, mfnr, or ap:<class>, f1:<class>, fnr:<class>.
    #[arg(long, default_value = "map")]
    metric: MetricName,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Interval JSON; a CSV row is written next to it.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    inputs: &'a EvalInputs,
    metric: MetricName,
    bootstrap: &'a BootstrapConfig,
}

#[derive(Serialize)]
struct CiRow {
    source: String,
    #[serde(flatten)]
    interval: BcaInterval,
}

pub fn run(args: Args, jobs: usize) -> anyhow::Result<()> {
    let bootstrap = BootstrapConfig {
        iterations: args.iterations,
        confidence: args.confidence,
        seed: require_seed(args.seed, "ci")?,
    };
    bootstrap.validate()?;
    let eval_config = args.inputs.config();
    eval_config.validate()?;
    let mut run = Run::new(
        "ci",
        &RunConfig {
            inputs: &args.inputs,
            metric: args.metric,
            bootstrap: &bootstrap,
        },
        jobs,
    )?;
    let (rows, gt) = args.inputs.load(&mut run)?;
    let rows = rows
        .into_iter()
        .map(|(source, pred)| {
            let index = EvalIndex::build(&pred, &gt, &eval_config)?;
            Ok(CiRow {
                interval: detection_bca(&index, args.metric, &bootstrap)?,
                source,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    for row in rows.iter().filter(|r| r.interval.degenerate) {
        log::warn!("interval for {} is degenerate", row.source);
    }

    let mut csv = String::from("source,statistic,interval\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.source, r.interval.statistic, r.interval.cell()));
    }
    if args.inputs.per_source {
        run.write_json(&args.output, &rows)?;
    } else {
        run.write_json(&args.output, &rows[0])?;
    }
    run.write_text(&args.csv.unwrap_or_else(|| csv_path_for(&args.output)), &csv)?;
    run.finish(&manifest_path_for(&args.output))
}
