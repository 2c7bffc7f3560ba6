//! Binary segmentation metrics from confusion counts.
//!
//! Seven metrics are reported: Jaccard index, precision, recall, specificity,
//! F1, overall accuracy, and mIoU (mean of foreground and background IoU).
//! Any metric whose denominator is zero is defined as 1.0 — predicting an
//! empty class as empty is a correct outcome. Aggregation over a dataset is
//! either `micro` (metrics of the summed counts) or `macro` (unweighted mean
//! of per-image metrics).

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub overall_accuracy: f64,
    pub miou: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "jaccard,precision,recall,specificity,f1,overall_accuracy,miou";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.jaccard,
            self.precision,
            self.recall,
            self.specificity,
            self.f1,
            self.overall_accuracy,
            self.miou
        )
    }

    fn values(&self) -> [f64; 7] {
        [
            self.jaccard,
            self.precision,
            self.recall,
            self.specificity,
            self.f1,
            self.overall_accuracy,
            self.miou,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Micro,
    Macro,
}

/// Exact pixel counts for a binary prediction against ground truth.
pub fn confusion(pred: &ArrayD<u8>, gt: &ArrayD<u8>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        debug_assert!(p <= 1 && g <= 1, "masks must be binary");
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::parameter("confusion counts cover zero pixels"));
    }
    let fg_iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let bg_iou = ratio(c.tn, c.tn + c.fn_ + c.fp);
    Ok(MetricsReport {
        jaccard: fg_iou,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        overall_accuracy: ratio(c.tp + c.tn, c.total()),
        miou: 0.5 * (fg_iou + bg_iou),
    })
}

pub fn aggregate(counts: &[ConfusionCounts], mode: AggregationMode) -> Result<MetricsReport> {
    if counts.is_empty() {
        return Err(Error::parameter("cannot aggregate an empty set of counts"));
    }
    match mode {
        AggregationMode::Micro => {
            let summed = counts
                .iter()
                .fold(ConfusionCounts::default(), |acc, c| acc.add(c));
            compute_metrics(&summed)
        }
        AggregationMode::Macro => {
            let reports = counts
                .iter()
                .map(compute_metrics)
                .collect::<Result<Vec<_>>>()?;
            let n = reports.len() as f64;
            let mut sums = [0.0f64; 7];
            for r in &reports {
                for (s, v) in sums.iter_mut().zip(r.values()) {
                    *s += v;
                }
            }
            Ok(MetricsReport {
                jaccard: sums[0] / n,
                precision: sums[1] / n,
                recall: sums[2] / n,
                specificity: sums[3] / n,
                f1: sums[4] / n,
                overall_accuracy: sums[5] / n,
                miou: sums[6] / n,
            })
        }
    }
}
