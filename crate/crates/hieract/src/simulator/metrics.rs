//! Segmentation metrics over point label vectors.

use super::SimulatorError;

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// One entry per class; `None` when the class appears in neither the
    /// predictions nor the truth and is skipped by the mean.
    pub per_class: Vec<Option<f64>>,
}

/// IoU per class = TP / (TP + FP + FN) over points, averaged over the
/// classes present in truth or predictions.
pub fn compute_miou(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<MiouReport, SimulatorError> {
    if predictions.len() != truth.len() {
        return Err(SimulatorError::LengthMismatch);
    }
    if predictions.is_empty() {
        return Err(SimulatorError::EmptyInput);
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(SimulatorError::InvalidClass(p.max(t)));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let denom = tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp[c] as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    Ok(MiouReport {
        miou: if present > 0 { sum / present as f64 } else { 0.0 },
        per_class,
    })
}
