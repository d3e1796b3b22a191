use std::collections::HashMap;
use std::path::PathBuf;

use bitefuse::splits::{make_folds, make_patient_folds, rotation_ids};
use serde::Serialize;

use super::require_seed;
use crate::config_error;
use crate::run::Run;

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Annotation file whose images are split.
    #[arg(long, short, conflicts_with = "ids", required_unless_present = "ids")]
    input: Option<PathBuf>,
    /// Plain list of image ids, one per line.
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long, short, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep all images of a patient in one fold (needs patient ids in --input).
    #[arg(long)]
    by_patient: bool,
    /// Receives folds.json and iteration_<i>/{train,val,test}.txt.
    #[arg(long, short)]
    output_dir: PathBuf,
}

pub fn run(args: Args, jobs: usize) -> anyhow::Result<()> {
    let seed = require_seed(args.seed, "split")?;
    let mut run = Run::new("split", &args, jobs)?;

    let (ids, patients): (Vec<String>, HashMap<String, String>) = match (&args.input, &args.ids) {
        (Some(path), _) => {
            let set = run.read_annotations(path)?;
            let ids = set.images().iter().map(|i| i.id.clone()).collect();
            let patients = set
                .images()
                .iter()
                .filter_map(|i| i.patient_id.clone().map(|p| (i.id.clone(), p)))
                .collect();
            (ids, patients)
        }
        (None, Some(path)) => (run.read_id_list(path)?, HashMap::new()),
        (None, None) => return Err(config_error("split needs --input or --ids")),
    };

    let assignment = if args.by_patient {
        if patients.is_empty() {
            return Err(config_error("--by-patient needs patient ids in the input file"));
        }
        make_patient_folds(&ids, &patients, args.k, seed)?
    } else {
        if patients.is_empty() {
            log::warn!("no patient ids available: folds are split by image, so one patient's images may land in several folds");
        }
        make_folds(&ids, args.k, seed)?
    };

    let dir = &args.output_dir;
    run.write_json(&dir.join("folds.json"), &assignment)?;
    for i in 0..assignment.k {
        let (train, val, test) = rotation_ids(&assignment, i)?;
        let sub = dir.join(format!("iteration_{i}"));
        for (name, list) in [("train.txt", train), ("val.txt", val), ("test.txt", test)] {
            let mut text = list.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            run.write_text(&sub.join(name), &text)?;
        }
    }
    run.finish(&dir.join("manifest.json"))
}
