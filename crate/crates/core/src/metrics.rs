//! Confusion matrix and the F1, overall accuracy and IoU scores derived from it.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions; ignored pixels never enter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<f64>,
    /// Average over classes that occur in ground truth or prediction.
    pub mean: f64,
    /// Which classes took part in the mean.
    pub counted: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() || counts.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "confusion matrix must be square and non-empty, got {:?}",
                counts.shape()
            )));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts.row(k).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.column(k).sum()
    }

    /// Adds one prediction/ground-truth pair. `pred` must not contain the ignore index.
    pub fn accumulate(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if pred.data().dim() != truth.data().dim() {
            return Err(Error::ShapeMismatch {
                what: "confusion matrix (prediction vs truth)",
                left: pred.data().shape().to_vec(),
                right: truth.data().shape().to_vec(),
            });
        }
        let m = self.num_classes();
        if truth.num_classes() != m || pred.num_classes() != m {
            return Err(Error::InvalidArgument(format!(
                "class count mismatch: matrix {m}, prediction {}, truth {}",
                pred.num_classes(),
                truth.num_classes()
            )));
        }
        if pred.ignored_count() > 0 {
            return Err(Error::InvalidArgument("prediction contains the ignore index".into()));
        }
        let ignore = truth.ignore_index();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t != ignore {
                self.counts[[t as usize, p as usize]] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.counts.dim() != self.counts.dim() {
            return Err(Error::ShapeMismatch {
                what: "confusion matrix merge",
                left: self.counts.shape().to_vec(),
                right: other.counts.shape().to_vec(),
            });
        }
        self.counts += &other.counts;
        Ok(())
    }

    fn present(&self, k: usize) -> bool {
        self.row_sum(k) + self.col_sum(k) > 0
    }

    fn summarise(&self, per_class: Vec<f64>) -> ClassScores {
        let counted: Vec<bool> = (0..self.num_classes()).map(|k| self.present(k)).collect();
        let n = counted.iter().filter(|&&c| c).count();
        let mean = if n == 0 {
            0.0
        } else {
            per_class
                .iter()
                .zip(&counted)
                .filter(|(_, &c)| c)
                .map(|(v, _)| v)
                .sum::<f64>()
                / n as f64
        };
        ClassScores {
            per_class,
            mean,
            counted,
        }
    }
}

/// Per-class F1 (precision and recall with beta = 1); 0 when P + R = 0.
pub fn f1_scores(cm: &ConfusionMatrix) -> ClassScores {
    let per_class = (0..cm.num_classes())
        .map(|k| {
            let tp = cm.counts[[k, k]] as f64;
            let (col, row) = (cm.col_sum(k) as f64, cm.row_sum(k) as f64);
            let p = if col > 0.0 { tp / col } else { 0.0 };
            let r = if row > 0.0 { tp / row } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .collect();
    cm.summarise(per_class)
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("overall accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.num_classes()).map(|k| cm.counts[[k, k]]).sum();
    Ok(trace as f64 / total as f64)
}

/// Per-class intersection over union; classes with an empty union are left out of the mean.
pub fn mean_iou(cm: &ConfusionMatrix) -> ClassScores {
    let per_class = (0..cm.num_classes())
        .map(|k| {
            let tp = cm.counts[[k, k]];
            let union = cm.row_sum(k) + cm.col_sum(k) - tp;
            if union > 0 {
                tp as f64 / union as f64
            } else {
                0.0
            }
        })
        .collect();
    cm.summarise(per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mask(a: Array2<u8>, k: usize) -> LabelMask {
        LabelMask::new(a, k, 255).unwrap()
    }

    #[test]
    fn two_by_two_with_one_error() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(array![[0, 1], [1, 1]], 2), &mask(array![[0, 0], [1, 1]], 2))
            .unwrap();
        assert_eq!(cm.counts(), &array![[1, 1], [0, 2]]);
        assert_eq!(overall_accuracy(&cm).unwrap(), 0.75);
    }

    #[test]
    fn ignored_truth_is_skipped() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(array![[0, 2]], 3), &mask(array![[255, 255]], 3)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(overall_accuracy(&cm).is_err());
        assert!(cm.accumulate(&mask(array![[255]], 3), &mask(array![[1]], 3)).is_err());
    }

    #[test]
    fn hand_scores() {
        // class 0: P = 1, R = 0.5
        let cm = ConfusionMatrix::from_counts(array![[1, 1], [0, 2]]).unwrap();
        assert!((f1_scores(&cm).per_class[0] - 2.0 / 3.0).abs() < 1e-12);
        let cm = ConfusionMatrix::from_counts(array![[3, 2], [2, 1]]).unwrap();
        assert_eq!(overall_accuracy(&cm).unwrap(), 0.5);
        // truth 10 px, prediction 10 px, overlap 5
        let cm = ConfusionMatrix::from_counts(array![[5, 5, 0], [5, 0, 0], [0, 0, 0]]).unwrap();
        let iou = mean_iou(&cm);
        assert!((iou.per_class[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou.counted, vec![true, true, false]);
        assert!((iou.mean - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_counts(array![[4, 0, 0], [0, 2, 0], [0, 0, 0]]).unwrap();
        assert_eq!(f1_scores(&cm).mean, 1.0);
        assert_eq!(mean_iou(&cm).mean, 1.0);
        assert_eq!(overall_accuracy(&cm).unwrap(), 1.0);
    }
}
