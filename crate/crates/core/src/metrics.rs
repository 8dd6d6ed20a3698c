//! Confusion-matrix accumulation and segmentation scores.

use serde::{Deserialize, Serialize};

use crate::datagen::CLASS_NAMES;
use crate::error::{Error, Result};

/// `C×C` counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not `ignore`.
    pub fn update(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion update",
                detail: format!("{} predictions for {} labels", pred.len(), gt.len()),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            for label in [g, p] {
                if label as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label,
                        classes: self.classes,
                    });
                }
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.classes != other.classes {
            return Err(Error::ClassCountMismatch(self.classes, other.classes));
        }
        Ok(ConfusionMatrix {
            classes: self.classes,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn gt_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// `TP / (TP + FP + FN)`, `None` when the class is neither present nor predicted.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.tp(c);
                let denom = self.gt_total(c) + self.pred_total(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class recall `TP / (TP + FN)`, `None` when absent from the ground truth.
    pub fn per_class_acc(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let n = self.gt_total(c);
                (n > 0).then(|| self.tp(c) as f64 / n as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean_present(&self.per_class_iou())
    }

    pub fn mean_acc(&self) -> Option<f64> {
        mean_present(&self.per_class_acc())
    }

    /// Fraction of scored pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|c| self.tp(c)).sum::<u64>() as f64 / total as f64)
    }
}

/// Mean over the defined entries, in index order.
pub fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let classes = (0..cm.classes())
            .map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()))
            .collect();
        Self {
            classes,
            iou: cm.per_class_iou(),
            acc: cm.per_class_acc(),
            miou: cm.mean_iou(),
            macc: cm.mean_acc(),
            pixel_accuracy: cm.pixel_accuracy(),
            pixels: cm.total(),
            confusion: cm.clone(),
        }
    }

    /// Column header matching [`MetricsReport::csv_row`].
    pub fn csv_header(&self) -> String {
        let mut cols = self.classes.clone();
        cols.push("mIoU".into());
        cols.push("mAcc".into());
        cols.join(",")
    }

    /// Per-class IoU, then mIoU and mAcc; absent values are empty fields.
    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.iou.iter().map(|v| fmt_opt(*v)).collect();
        cols.push(fmt_opt(self.miou));
        cols.push(fmt_opt(self.macc));
        cols.join(",")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}
