//! Patient-level dataset splitting.

use super::{Sample, SplitSet};
use crate::error::{Error, Result};
use cxrjust_nn::rng::derive_rng;
use rand::seq::SliceRandom;

/// Partition samples into train/validation/test by patient. Every image of
/// one patient lands in exactly one subset; the split is reproducible for a
/// fixed seed.
pub fn split_by_patient(
    samples: Vec<Sample>,
    weights: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSet> {
    let (w0, w1, w2) = weights;
    if (w0 + w1 + w2 - 1.0).abs() > 1e-9 || w0 <= 0.0 || w1 <= 0.0 || w2 <= 0.0 {
        return Err(Error::Corpus(format!(
            "split weights must be positive and sum to 1, got {weights:?}"
        )));
    }
    // unique patients in order of first appearance
    let mut patients: Vec<String> = Vec::new();
    for s in &samples {
        if !patients.contains(&s.patient_id) {
            patients.push(s.patient_id.clone());
        }
    }
    let p = patients.len();
    if p < 3 {
        return Err(Error::Corpus(format!(
            "need at least 3 patients to split, got {p}"
        )));
    }
    let mut rng = derive_rng(seed, "patient-split");
    patients.shuffle(&mut rng);

    let mut n_train = (w0 * p as f64).round() as usize;
    let mut n_val = (w1 * p as f64).round() as usize;
    n_train = n_train.clamp(1, p - 2);
    n_val = n_val.clamp(1, p - n_train - 1);
    let assign = |pid: &str| -> usize {
        let idx = patients.iter().position(|q| q == pid).unwrap();
        if idx < n_train {
            0
        } else if idx < n_train + n_val {
            1
        } else {
            2
        }
    };

    let mut out = SplitSet::default();
    for s in samples {
        match assign(&s.patient_id) {
            0 => out.train.push(s),
            1 => out.validation.push(s),
            _ => out.test.push(s),
        }
    }
    Ok(out)
}
