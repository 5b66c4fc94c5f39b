//! Quantitative evaluation: critic-based Wasserstein and alignment
//! estimates, caption metrics (BLEU, ROUGE-L, CIDEr), diagnosis accuracy and
//! the activation-based saliency baseline.

mod wasserstein;
mod captions;
mod refcnn;
mod stats;

pub use captions::{caption_metrics, CaptionScores};
pub use refcnn::{
    saliency_baseline, train_reference_cnn, RefCnnConfig, ReferenceCnn, SaliencyLayer,
};
pub use stats::{t_test_equal_variance, TTestResult};
pub use wasserstein::{
    alignment_estimate, critic_gap, wasserstein_estimate, CriticConfig, CriticEstimate,
    TrainedCritic,
};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Accuracy with per-class recall (the class prior is heavily skewed, so
/// accuracy alone is not informative).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub per_class_recall: BTreeMap<String, f64>,
    pub n: usize,
}

/// Score an arbitrary classifier on labeled samples.
pub fn diagnosis_accuracy<F>(mut classify: F, samples: &[Sample]) -> Result<AccuracyReport>
where
    F: FnMut(&Sample) -> Result<String>,
{
    if samples.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let pred = classify(s)?;
        let entry = per_class.entry(s.label.clone()).or_insert((0, 0));
        entry.1 += 1;
        if pred == s.label {
            hits += 1;
            entry.0 += 1;
        }
    }
    Ok(AccuracyReport {
        accuracy: hits as f64 / samples.len() as f64,
        per_class_recall: per_class
            .into_iter()
            .map(|(k, (h, n))| (k, h as f64 / n as f64))
            .collect(),
        n: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn samples(labels: &[&str]) -> Vec<Sample> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| Sample {
                patient_id: format!("p{i}"),
                image_id: format!("i{i}"),
                image: Array2::zeros((4, 4)),
                label: l.to_string(),
                descriptions: vec![],
            })
            .collect()
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let s = samples(&["normal", "cardiomegaly", "normal"]);
        let r = diagnosis_accuracy(|s| Ok(s.label.clone()), &s).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class_recall["normal"], 1.0);
    }

    #[test]
    fn majority_classifier_matches_prior() {
        let mut labels = vec!["normal"; 84];
        labels.extend(vec!["cardiomegaly"; 16]);
        let s = samples(&labels);
        let r = diagnosis_accuracy(|_| Ok("normal".to_string()), &s).unwrap();
        assert!((r.accuracy - 0.84).abs() < 1e-12);
        assert_eq!(r.per_class_recall["cardiomegaly"], 0.0);
    }

    #[test]
    fn empty_set_errors() {
        assert!(diagnosis_accuracy(|s: &Sample| Ok(s.label.clone()), &[]).is_err());
    }
}
