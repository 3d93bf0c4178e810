//! Confusion-matrix segmentation metrics.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelMap;

/// `K x K` pixel counts, rows indexed by ground-truth class and columns by
/// predicted class. Ignore pixels in the ground truth are never counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    /// Adds one prediction/ground-truth pair. Predictions must be proper
    /// classes wherever the ground truth is not ignored.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::validation(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dims(),
                gt.dims()
            )));
        }
        if gt.num_classes() != self.num_classes {
            return Err(Error::validation(format!(
                "ground truth has {} classes, matrix has {}",
                gt.num_classes(),
                self.num_classes
            )));
        }
        for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
            if g == gt.ignore_index() {
                continue;
            }
            if p as usize >= self.num_classes {
                return Err(Error::validation(format!(
                    "prediction {p} is not a class below {}",
                    self.num_classes
                )));
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::validation("cannot merge confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Ground-truth pixel count per class (row sums).
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|g| (0..self.num_classes).map(|p| self.get(g, p)).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from the
    /// ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let gt = self.gt_counts();
        (0..self.num_classes)
            .map(|k| {
                if gt[k] == 0 {
                    return None;
                }
                let tp = self.get(k, k);
                let fp: u64 = (0..self.num_classes).filter(|&g| g != k).map(|g| self.get(g, k)).sum();
                let fn_ = gt[k] - tp;
                Some(tp as f64 / (tp + fp + fn_) as f64)
            })
            .collect()
    }

    /// Unweighted mean IoU over classes present in the ground truth.
    pub fn mean_iou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.num_classes).map(|k| self.get(k, k)).sum::<u64>() as f64 / total as f64)
    }
}

/// Channel-wise argmax of `(N, K, H, W)` logits as a label map without ignore
/// pixels. Ties go to the lowest class index.
pub fn argmax_labels(logits: &Tensor, ignore_index: u32) -> Result<LabelMap> {
    let (n, k, h, w) = logits.dims4()?;
    let v = logits
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let plane = h * w;
    let mut out = vec![0u32; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = v[b * k * plane + p];
            for c in 1..k {
                let x = v[(b * k + c) * plane + p];
                if x > best_v {
                    best = c;
                    best_v = x;
                }
            }
            out[b * plane + p] = best as u32;
        }
    }
    LabelMap::new(out, (n, h, w), k, ignore_index)
}
