pub mod ci;
pub mod eval;
pub mod fuse;
pub mod report;
pub mod simulate;
pub mod split;

use bitefuse::AnnotationSet;

use crate::config_error;

/// `--seed` is mandatory wherever randomness is involved.
pub fn require_seed(seed: Option<u64>, command: &str) -> anyhow::Result<u64> {
    seed.ok_or_else(|| config_error(format!("`{command}` needs an explicit --seed")))
}

/// Restricts predictions and ground truth to the listed images, warning about ids
/// the ground truth does not contain.
pub fn restrict(pred: &AnnotationSet, gt: &AnnotationSet, ids: &[String]) -> (AnnotationSet, AnnotationSet) {
    let missing = ids.iter().filter(|id| gt.image(id).is_none()).count();
    if missing > 0 {
        log::warn!("{missing} listed image ids are not in the ground truth");
    }
    (pred.restrict_to_images(ids), gt.restrict_to_images(ids))
}

/// Report row name when predictions are scored as a whole: the single source id if
/// there is one, otherwise `all`.
pub fn default_row_name(pred: &AnnotationSet) -> String {
    match pred.sources().as_slice() {
        [only] => only.clone(),
        _ => "all".to_owned(),
    }
}
