use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::labels::{LabelMap, NUM_CLASSES};

/// Pixel counts indexed `[ground_truth][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

/// Segmentation quality summary. Class-wise scores are one-vs-rest and are
/// averaged over classes present in either map; absent classes are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub e1: f64,
    pub f1: f64,
    pub acc: f64,
    pub per_class: [Option<f64>; NUM_CLASSES],
}

impl Confusion {
    pub fn from_maps(pred: &LabelMap, truth: &LabelMap) -> Result<Self> {
        let mut c = Self::default();
        c.add(pred, truth)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&truth.data) {
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(tp, fp, fn)` for class `c`.
    fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.counts[c][c];
        let row: u64 = self.counts[c].iter().sum();
        let col: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum();
        (tp, col - tp, row - tp)
    }

    fn present(&self, c: usize) -> bool {
        let (tp, fp, fn_) = self.class_counts(c);
        tp + fp + fn_ > 0
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.class_counts(c);
        self.present(c).then(|| tp as f64 / (tp + fp + fn_) as f64)
    }

    pub fn miou(&self) -> f64 {
        macro_mean((0..NUM_CLASSES).filter_map(|c| self.iou(c)))
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.total().max(1) as f64;
        let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| self.present(c)).collect();
        let f1 = macro_mean(present.iter().map(|&c| {
            let (tp, fp, fn_) = self.class_counts(c);
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }));
        let e1 = macro_mean(present.iter().map(|&c| {
            let (_, fp, fn_) = self.class_counts(c);
            (fp + fn_) as f64 / n
        }));
        let trace: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        let mut per_class = [None; NUM_CLASSES];
        for (c, slot) in per_class.iter_mut().enumerate() {
            *slot = self.iou(c);
        }
        Metrics {
            miou: self.miou(),
            e1,
            f1,
            acc: trace as f64 / n,
            per_class,
        }
    }
}

/// Mean of the values; an empty set (no pixels at all) counts as perfect.
fn macro_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

pub fn metrics(pred: &LabelMap, truth: &LabelMap) -> Result<Metrics> {
    Ok(Confusion::from_maps(pred, truth)?.metrics())
}
