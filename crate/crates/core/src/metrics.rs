//! Confusion matrix, overall accuracy and intersection-over-union.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ScoreStack};

pub const CSV_HEADER: &str = "run_id,iteration,overall_accuracy,iou_building,iou_road,iou_background,mean_iou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[truth][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    pub overall_accuracy: f64,
    pub iou_per_class: Vec<f64>,
    pub mean_iou: f64,
}

/// Scores `pred` against `truth` over `classes` classes. A class absent
/// from both maps has IoU 1.
pub fn evaluate(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<MetricsReport> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    pred.check_classes(classes)?;
    truth.check_classes(classes)?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        confusion[t as usize][p as usize] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let iou_per_class: Vec<f64> = (0..classes)
        .map(|k| {
            let tp = confusion[k][k];
            let fn_: u64 = confusion[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..classes).map(|t| confusion[t][k]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            if denom == 0 {
                1.0
            } else {
                tp as f64 / denom as f64
            }
        })
        .collect();
    let mean_iou = iou_per_class.iter().sum::<f64>() / classes as f64;
    Ok(MetricsReport {
        confusion,
        overall_accuracy: if total == 0 { 1.0 } else { trace as f64 / total as f64 },
        iou_per_class,
        mean_iou,
    })
}

/// Metrics of the argmax of every stack; entry 0 is the un-refined input.
pub fn evaluate_trajectory(trajectory: &[ScoreStack], truth: &LabelMap) -> Result<Vec<MetricsReport>> {
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    trajectory
        .iter()
        .map(|s| evaluate(&s.argmax(), truth, s.classes()))
        .collect()
}

impl MetricsReport {
    /// One CSV row in [`CSV_HEADER`] order (building = 1, road = 2,
    /// background = 0).
    pub fn csv_row(&self, run_id: &str, iteration: usize) -> String {
        let iou = |k: usize| self.iou_per_class.get(k).copied().unwrap_or(f64::NAN);
        let mut row = String::new();
        write!(
            row,
            "{run_id},{iteration},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.overall_accuracy,
            iou(1),
            iou(2),
            iou(0),
            self.mean_iou
        )
        .expect("writing to a String");
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_are_perfect() {
        let m = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let r = evaluate(&m, &m, 3).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.iou_per_class.iter().all(|&v| v == 1.0));
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn empty_class_counts_as_one() {
        let m = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let r = evaluate(&m, &m, 3).unwrap();
        assert_eq!(r.iou_per_class[2], 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = LabelMap::filled(2, 2, 0);
        let b = LabelMap::filled(2, 3, 0);
        assert!(evaluate(&a, &b, 2).is_err());
    }

    #[test]
    fn csv_row_orders_named_classes() {
        let r = MetricsReport {
            confusion: vec![],
            overall_accuracy: 0.5,
            iou_per_class: vec![0.1, 0.2, 0.3],
            mean_iou: 0.2,
        };
        assert_eq!(r.csv_row("x", 3), "x,3,0.500000,0.200000,0.300000,0.100000,0.200000");
    }
}
