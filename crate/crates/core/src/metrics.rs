//! Confusion matrix and the three segmentation scores derived from it:
//! global pixelwise accuracy, mean classwise accuracy and mean IoU.
//!
//! Classes without ground-truth pixels are left out of the two averages.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask, Tensor, IGNORE};

/// `counts[i * k + j]` = pixels of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Size(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.num_classes..(i + 1) * self.num_classes].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, j)).sum()
    }

    /// Adds one image. Ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        self.accumulate_masked(predicted, truth, None)
    }

    /// Like [`accumulate`](Self::accumulate), also skipping pixels where `valid` is false.
    pub fn accumulate_masked(
        &mut self,
        predicted: &LabelMap,
        truth: &LabelMap,
        valid: Option<&Mask>,
    ) -> Result<()> {
        if (predicted.height(), predicted.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                predicted.height(),
                predicted.width(),
                truth.height(),
                truth.width()
            )));
        }
        if let Some(m) = valid {
            if (m.height(), m.width()) != (truth.height(), truth.width()) {
                return Err(Error::Shape("mask size differs from ground truth".into()));
            }
        }
        let k = self.num_classes;
        for (index, (&p, &t)) in predicted.data().iter().zip(truth.data()).enumerate() {
            if t == IGNORE || valid.is_some_and(|m| !m.data()[index]) {
                continue;
            }
            for label in [t, p] {
                if label as usize >= k {
                    return Err(Error::InvalidLabel {
                        label,
                        index,
                        num_classes: k,
                    });
                }
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::UndefinedMetric("confusion matrix is empty".into()))
        } else {
            Ok(())
        }
    }

    /// `Σ_i c_ii / Σ_ij c_ij`.
    pub fn pixelwise_accuracy(&self) -> Result<f64> {
        self.require_nonempty()?;
        let trace: u64 = (0..self.num_classes).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// Per-class recall `c_ii / Σ_j c_ij`; `None` for classes without support.
    pub fn class_accuracies(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|i| {
                let row = self.row_sum(i);
                (row > 0).then(|| self.get(i, i) as f64 / row as f64)
            })
            .collect()
    }

    /// Per-class `c_ii / (Σ_i c_ij + Σ_j c_ij - c_ii)`; `None` without support.
    pub fn class_ious(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|i| {
                let row = self.row_sum(i);
                let union = row + self.col_sum(i) - self.get(i, i);
                (row > 0).then(|| self.get(i, i) as f64 / union as f64)
            })
            .collect()
    }

    pub fn classwise_accuracy(&self) -> Result<f64> {
        self.require_nonempty()?;
        Ok(mean_defined(&self.class_accuracies()))
    }

    pub fn mean_iou(&self) -> Result<f64> {
        self.require_nonempty()?;
        Ok(mean_defined(&self.class_ious()))
    }

    pub fn scores(&self) -> Result<Scores> {
        Ok(Scores {
            pixelwise: self.pixelwise_accuracy()?,
            classwise: self.classwise_accuracy()?,
            mean_iou: self.mean_iou()?,
        })
    }

    /// Fixed-format table: one IoU line per class, then the three aggregates.
    pub fn report_table(&self) -> Result<String> {
        let scores = self.scores()?;
        let mut out = String::new();
        writeln!(out, "{:<12}{:>10}", "class", "iou").unwrap();
        for (i, iou) in self.class_ious().iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{:<12}{:>10.4}", i, v).unwrap(),
                None => writeln!(out, "{:<12}{:>10}", i, "-").unwrap(),
            }
        }
        writeln!(out, "{:<12}{:>10.4}", "pixelwise", scores.pixelwise).unwrap();
        writeln!(out, "{:<12}{:>10.4}", "classwise", scores.classwise).unwrap();
        writeln!(out, "{:<12}{:>10.4}", "mean_iou", scores.mean_iou).unwrap();
        Ok(out)
    }
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// The three aggregate scores of a confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub pixelwise: f64,
    pub classwise: f64,
    pub mean_iou: f64,
}

/// Per-pixel channel argmax, ties to the lowest class index.
pub fn argmax_labels(t: &Tensor) -> LabelMap {
    let (k, plane) = (t.channels(), t.height() * t.width());
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if t.data()[c * plane + p] > t.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::from_vec(t.height(), t.width(), labels).expect("tensor-sized labels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::softmax;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn labels(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::from_vec(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(2, 2, &[0, 1, 1, 1]), &labels(2, 2, &[0, 0, 1, 1]))
            .unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);

        let mut cm = ConfusionMatrix::new(3);
        let gt = labels(1, 3, &[0, 1, 2]);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 1]);

        let before = cm.clone();
        cm.accumulate(&labels(1, 3, &[0, 1, 2]), &labels(1, 3, &[IGNORE; 3]))
            .unwrap();
        assert_eq!(cm, before);

        assert!(matches!(
            cm.accumulate(&labels(1, 3, &[0, 3, 2]), &gt),
            Err(Error::InvalidLabel { label: 3, .. })
        ));
    }

    #[test]
    fn metric_examples() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(cm.pixelwise_accuracy().unwrap(), 0.75);
        assert_eq!(cm.classwise_accuracy().unwrap(), 0.75);
        assert!((cm.mean_iou().unwrap() - 7.0 / 12.0).abs() < 1e-15);

        let id = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        let s = id.scores().unwrap();
        assert_eq!((s.pixelwise, s.classwise, s.mean_iou), (1.0, 1.0, 1.0));

        assert!(matches!(
            ConfusionMatrix::new(2).pixelwise_accuracy(),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn zero_support_class_is_excluded() {
        // Class 2 has no ground truth but is predicted once.
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 1, 0, 3, 0, 0, 0, 0]).unwrap();
        assert_eq!(cm.class_accuracies()[2], None);
        assert!((cm.classwise_accuracy().unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((cm.mean_iou().unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_examples() {
        let t = Tensor::from_vec(Shape::new(3, 1, 2), vec![0.0, 0.2, 1.0, 0.2, 0.0, 0.2]).unwrap();
        assert_eq!(argmax_labels(&t).data(), &[1, 0]);
        let s = Tensor::from_vec(Shape::new(3, 1, 2), vec![0.3, -2.0, 4.0, 1.0, 0.5, 1.0]).unwrap();
        assert_eq!(argmax_labels(&s), argmax_labels(&softmax(&s)));
    }

    #[test]
    fn table_layout() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        let table = cm.report_table().unwrap();
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[4].starts_with("classwise") && lines[4].ends_with("0.7500"));
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_permutation_invariant(
            pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..60),
            perm in Just([2u8, 0, 3, 1]).prop_shuffle(),
        ) {
            let n = pairs.len();
            let gt = labels(1, n, &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let pr = labels(1, n, &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pr, &gt).unwrap();
            let s = cm.scores().unwrap();
            for v in [s.pixelwise, s.classwise, s.mean_iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let trace: u64 = (0..4).map(|i| cm.get(i, i)).sum();
            prop_assert_eq!(s.pixelwise, trace as f64 / n as f64);

            let map = |l: &LabelMap| labels(1, n, &l.data().iter().map(|&x| perm[x as usize]).collect::<Vec<_>>());
            let mut cm2 = ConfusionMatrix::new(4);
            cm2.accumulate(&map(&pr), &map(&gt)).unwrap();
            let s2 = cm2.scores().unwrap();
            prop_assert!((s.classwise - s2.classwise).abs() < 1e-12);
            prop_assert!((s.mean_iou - s2.mean_iou).abs() < 1e-12);
            prop_assert_eq!(s.pixelwise, s2.pixelwise);
        }

        #[test]
        fn accumulation_order_independent(a in proptest::collection::vec(0u8..3, 8), b in proptest::collection::vec(0u8..3, 8)) {
            let (ga, gb) = (labels(2, 4, &a), labels(2, 4, &b));
            let mut x = ConfusionMatrix::new(3);
            x.accumulate(&ga, &gb).unwrap();
            x.accumulate(&gb, &ga).unwrap();
            let mut y = ConfusionMatrix::new(3);
            y.accumulate(&gb, &ga).unwrap();
            y.accumulate(&ga, &gb).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
