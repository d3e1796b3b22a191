//! Seeded k-fold assignment and the train/validation/test rotation.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fold index of every image. Serializes as `folds.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Ids in fold `f`, sorted.
    pub fn fold(&self, f: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &v)| v == f)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

fn check_ids(ids: &[String], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Validation(format!("duplicate image id {dup:?}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!("cannot split {} ids into {k} folds", ids.len())));
    }
    Ok(())
}

/// Shuffles the ids with a seeded RNG and deals them round-robin into `k` folds.
/// Ids are sorted first, so only the id set (not its order) matters.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    check_ids(ids, k)?;
    let mut order: Vec<&str> = ids.iter().map(String::as_str).collect();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_owned(), i % k))
        .collect();
    Ok(FoldAssignment { k, seed, assignment })
}

/// Patient-level variant: all images of a patient land in the same fold. Patients
/// are shuffled and each goes to the currently smallest fold (lowest index on ties),
/// so fold sizes are balanced only as far as patient sizes allow.
pub fn make_patient_folds(ids: &[String], patient_of: &HashMap<String, String>, k: usize, seed: u64) -> Result<FoldAssignment> {
    check_ids(ids, k)?;
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for id in ids {
        let patient = patient_of.get(id).map(String::as_str).unwrap_or(id.as_str());
        by_patient.entry(patient).or_default().push(id);
    }
    if by_patient.len() < k {
        return Err(Error::Config(format!(
            "cannot split {} patients into {k} folds",
            by_patient.len()
        )));
    }
    let mut patients: Vec<(&str, Vec<&str>)> = by_patient.into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sizes = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (_, images) in patients {
        let f = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 2");
        sizes[f] += images.len();
        for id in images {
            assignment.insert(id.to_owned(), f);
        }
    }
    Ok(FoldAssignment { k, seed, assignment })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rotation {
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

/// Iteration `i`: fold `i` tests, fold `(i + 1) mod k` validates, the rest train.
pub fn rotation(k: usize, i: usize) -> Result<Rotation> {
    if k < 3 {
        return Err(Error::Config(format!("a three-way split needs k >= 3, got {k}")));
    }
    if i >= k {
        return Err(Error::Config(format!("iteration {i} out of range for k = {k}")));
    }
    let validation = (i + 1) % k;
    Ok(Rotation {
        train: (0..k).filter(|&f| f != i && f != validation).collect(),
        validation,
        test: i,
    })
}

/// Image ids of one rotation: `(train, validation, test)`, each sorted.
pub fn rotation_ids(assignment: &FoldAssignment, i: usize) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let rot = rotation(assignment.k, i)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (id, &f) in &assignment.assignment {
        if f == rot.test {
            test.push(id.clone());
        } else if f == rot.validation {
            val.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    Ok((train, val, test))
}
