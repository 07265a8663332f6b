//! Class-wise intersection over union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::LabelMap;

/// Per-class counts accumulated over frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: Vec<u64>,
    pub false_positive: Vec<u64>,
    pub false_negative: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both predictions and truths.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            true_positive: vec![0; num_classes],
            false_positive: vec![0; num_classes],
            false_negative: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.true_positive.len()
    }

    pub fn add(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if predicted.shape() != truth.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs truth {:?}",
                predicted.shape(),
                truth.shape()
            )));
        }
        let c = self.num_classes();
        for (&p, &t) in predicted.classes.iter().zip(truth.classes.iter()) {
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::invalid(format!("label out of range for {c} classes")));
            }
            if p == t {
                self.true_positive[p] += 1;
            } else {
                self.false_positive[p] += 1;
                self.false_negative[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in [
            (&mut self.true_positive, &other.true_positive),
            (&mut self.false_positive, &other.false_positive),
            (&mut self.false_negative, &other.false_negative),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = (0..self.num_classes())
            .map(|c| {
                let denom = self.true_positive[c] + self.false_positive[c] + self.false_negative[c];
                (denom > 0).then(|| self.true_positive[c] as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, miou }
    }
}

pub fn evaluate_miou(predictions: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<MiouReport> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut counts = ConfusionCounts::new(num_classes);
    for (p, t) in predictions.iter().zip(truths) {
        counts.add(p, t)?;
    }
    Ok(counts.report())
}
