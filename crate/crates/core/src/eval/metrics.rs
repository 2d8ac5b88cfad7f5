use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};

/// Fraction of `predictions` equal to `y_t`.
pub fn tfr(predictions: &[usize], y_t: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("tfr of an empty prediction set"));
    }
    let hits = predictions.iter().filter(|&&p| p == y_t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of `predictions` equal to the benign label.
pub fn ata(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(shape_err(
            "ata",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(invalid("ata of an empty prediction set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Descriptive columns of one report row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentTags {
    pub experiment_id: String,
    pub attacker_dataset: String,
    pub downstream_dataset: String,
    pub victim_method: String,
    pub criterion: String,
    /// `f64::INFINITY` when the consistency term was removed.
    pub alpha: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// Measured outcome of attacking one victim pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackMetrics {
    pub y_t: usize,
    pub tfr: f64,
    pub ata: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub tags: ExperimentTags,
    pub y_t: usize,
    pub tfr: f64,
    pub ata: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
}

impl MetricsRecord {
    pub fn new(tags: ExperimentTags, m: &AttackMetrics) -> Self {
        MetricsRecord {
            tags,
            y_t: m.y_t,
            tfr: m.tfr,
            ata: m.ata,
            mean_l2: m.mean_l2,
            mean_linf: m.mean_linf,
        }
    }
}

/// Mean of `values`, summed in sorted order so the result does not depend
/// on the order samples were evaluated in.
pub(crate) fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}
