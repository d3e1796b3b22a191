use std::path::PathBuf;

use bitefuse::simulate::{render_annotator, generate_ground_truth, AnnotatorProfile, SimulationConfig};
use serde::Serialize;

use super::require_seed;
use crate::run::Run;

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Full simulation config as JSON (its seed is replaced by --seed).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    images: usize,
    #[arg(long, default_value_t = 6)]
    annotators: usize,
    /// σ of the per-corner jitter, px.
    #[arg(long, default_value_t = 2.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    miss_rate: f64,
    /// Expected spurious boxes per image and annotator.
    #[arg(long, default_value_t = 0.0)]
    spurious_rate: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output format of the annotation files.
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,
    /// Receives gt.<ext>, annotator_<k>.<ext> and sim_config.json.
    #[arg(long, short)]
    output_dir: PathBuf,
}

pub fn run(args: Args, jobs: usize) -> anyhow::Result<()> {
    let seed = require_seed(args.seed, "simulate")?;
    let mut run = Run::new("simulate", &args, jobs)?;
    let config = match &args.config {
        Some(path) => {
            let text = run.read_text(path)?;
            let cfg: SimulationConfig = serde_json::from_str(&text).map_err(|e| bitefuse::Error::Parse {
                location: path.display().to_string(),
                message: e.to_string(),
            })?;
            SimulationConfig { seed, ..cfg }
        }
        None => {
            let mut cfg = SimulationConfig::with_annotators(args.images, 0, args.jitter, seed);
            cfg.profiles = (1..=args.annotators)
                .map(|k| AnnotatorProfile {
                    miss_rate: args.miss_rate,
                    spurious_rate: args.spurious_rate,
                    ..AnnotatorProfile::new(format!("annotator_{k}"), args.jitter)
                })
                .collect();
            cfg
        }
    };
    config.validate()?;

    let gt = generate_ground_truth(&config)?;
    let dir = &args.output_dir;
    let ext = &args.format;
    run.write_annotations(&dir.join(format!("gt.{ext}")), &gt)?;
    for (k, profile) in config.profiles.iter().enumerate() {
        let view = render_annotator(&gt, profile, config.seed, k as u64 + 1)?;
        run.write_annotations(&dir.join(format!("annotator_{}.{ext}", k + 1)), &view)?;
    }
    run.write_json(&dir.join("sim_config.json"), &config)?;
    run.finish(&dir.join("manifest.json"))
}
