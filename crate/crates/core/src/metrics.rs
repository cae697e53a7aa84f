//! Binary classification metrics with depressed as the positive class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::pipeline::{Example, Modality, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(labels: &[Label], predictions: &[Label]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(format!(
                "{} labels for {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (y, p) in labels.iter().zip(predictions) {
            match (y, p) {
                (Label::Depressed, Label::Depressed) => c.tp += 1,
                (Label::NotDepressed, Label::Depressed) => c.fp += 1,
                (Label::Depressed, Label::NotDepressed) => c.fn_ += 1,
                (Label::NotDepressed, Label::NotDepressed) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        (self.tp + self.fp > 0).then(|| self.tp as f64 / (self.tp + self.fp) as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> Result<f64> {
    for (name, v) in [("precision", precision), ("recall", recall)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("{name} {v} outside [0, 1]")));
        }
    }
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when precision, recall or F1 is undefined and reported as 0.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (p, r) = (c.precision(), c.recall());
        let precision = p.unwrap_or(0.0);
        let recall = r.unwrap_or(0.0);
        let f1 = f1_score(precision, recall).expect("ratios lie in [0, 1]");
        Metrics {
            precision,
            recall,
            f1,
            degenerate: p.is_none() || r.is_none() || precision + recall == 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: Modality,
    pub variant: Variant,
    pub n_samples: usize,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub seed: u64,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn model_name(&self) -> String {
        format!("{}-{}", self.modality.model_name(), self.variant.title())
    }
}

/// Hex SHA-256 of the JSON form of a configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialise");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub trait Classifier: Sync {
    /// Class probabilities `[p(not depressed), p(depressed)]`.
    fn probabilities(&self, example: &Example) -> Result<[f64; 2]>;
}

/// Argmax decision; ties go to the negative class.
pub fn decide(probs: [f64; 2]) -> Label {
    if probs[1] > probs[0] {
        Label::Depressed
    } else {
        Label::NotDepressed
    }
}

pub struct RunInfo<'a> {
    pub modality: Modality,
    pub variant: Variant,
    pub seed: u64,
    pub fingerprint: &'a str,
}

pub fn report_from_predictions(
    labels: &[Label],
    predictions: &[Label],
    info: &RunInfo,
) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let counts = ConfusionCounts::from_predictions(labels, predictions)?;
    Ok(EvalReport {
        modality: info.modality,
        variant: info.variant,
        n_samples: labels.len(),
        counts,
        metrics: Metrics::from_counts(&counts),
        seed: info.seed,
        config_fingerprint: info.fingerprint.to_string(),
    })
}

/// Evaluates on a labeled set that must not contain augmented samples.
pub fn evaluate(model: &dyn Classifier, eval_set: &[Example], info: &RunInfo) -> Result<EvalReport> {
    if let Some(e) = eval_set.iter().find(|e| e.augmented) {
        return Err(Error::Data(format!("augmented sample {} in evaluation set", e.id)));
    }
    let preds = eval_set
        .par_iter()
        .map(|e| model.probabilities(e).map(decide))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = eval_set.iter().map(|e| e.label).collect();
    report_from_predictions(&labels, &preds, info)
}
