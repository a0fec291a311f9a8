use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::palette::MaskGrid;

/// What to do with a class that appears in neither ground truth nor prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClass {
    /// Leave it out of the mean.
    #[default]
    Exclude,
    /// Report NaN for it, which makes the mean NaN as well.
    Nan,
}

/// K×K pixel counts, rows = ground truth, columns = prediction.
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

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "square matrix");
        Self {
            classes: k,
            counts: rows.concat(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, k)).sum()
    }

    /// Add one pair of id grids. Pixels where either side equals
    /// `ignore_label` are skipped. On error the matrix is left unchanged.
    pub fn accumulate(
        &mut self,
        truth: &[u32],
        pred: &[u32],
        ignore_label: Option<u32>,
    ) -> Result<(), MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::ShapeMismatch);
        }
        let k = self.classes as u32;
        let ignored = |v: u32| ignore_label == Some(v);
        if let Some(&bad) = truth.iter().chain(pred).find(|&&v| v >= k && !ignored(v)) {
            return Err(MetricsError::ClassOutOfRange {
                id: bad,
                classes: self.classes,
            });
        }
        for (&g, &p) in truth.iter().zip(pred) {
            if ignored(g) || ignored(p) {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self, MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::DimensionMismatch {
                expected: self.classes,
                got: other.classes,
            });
        }
        Ok(Self {
            classes: self.classes,
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// IoU per class; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.row_sum(k) + self.col_sum(k) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// F1 (Dice) per class; `None` where the class is absent from both sides.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let denom = self.row_sum(k) + self.col_sum(k);
                (denom > 0).then(|| 2.0 * self.get(k, k) as f64 / denom as f64)
            })
            .collect()
    }
}

/// Functional update over two mask grids.
pub fn update_confusion(
    cm: &ConfusionMatrix,
    truth: &MaskGrid,
    pred: &MaskGrid,
    ignore_label: Option<u32>,
) -> Result<ConfusionMatrix, MetricsError> {
    if (truth.width, truth.height) != (pred.width, pred.height) {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut out = cm.clone();
    out.accumulate(&truth.ids, &pred.ids, ignore_label)?;
    Ok(out)
}

fn mean_over(values: Vec<Option<f64>>, policy: EmptyClass) -> Result<f64, MetricsError> {
    if values.iter().all(Option::is_none) {
        return Err(MetricsError::AllClassesEmpty);
    }
    let included: Vec<f64> = match policy {
        EmptyClass::Exclude => values.into_iter().flatten().collect(),
        EmptyClass::Nan => values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
    };
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

pub fn miou(cm: &ConfusionMatrix, policy: EmptyClass) -> Result<f64, MetricsError> {
    mean_over(cm.per_class_iou(), policy)
}

pub fn mf1(cm: &ConfusionMatrix, policy: EmptyClass) -> Result<f64, MetricsError> {
    mean_over(cm.per_class_f1(), policy)
}
