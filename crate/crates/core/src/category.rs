//! Semantic-category treatment: per-class feature centroids over deep encoder
//! features and the cosine-distance penalty that pulls each pixel's feature
//! toward its class centroid.
//!
//! Clusters are given by the ground truth, so the least-squares centre of a
//! class is its masked mean. Centroids are constants for differentiation;
//! only the per-pixel features receive gradients.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_norm_keepdim, scalar_f64};
use crate::types::{FeatureMap, LabelMap};

/// Added to both norms of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    /// `K` vectors of the deep-feature channel length.
    pub centers: Vec<Vec<f64>>,
    /// Whether class `k` had at least one contributing pixel.
    pub present: Vec<bool>,
    /// Pixel counts behind each centre.
    pub counts: Vec<usize>,
}

impl ClassCentroids {
    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn channels(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Sum of squared distances from class-`k` members to `center`.
    pub fn within_class_sse(
        features: &[f64],
        labels: &LabelMap,
        channels: usize,
        k: usize,
        center: &[f64],
    ) -> f64 {
        member_vectors(features, labels, channels)
            .filter(|(c, _)| *c == k)
            .map(|(_, v)| v.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum()
    }
}

/// Iterates `(class, feature vector)` over the non-ignore pixels of an
/// `(N, C, H, W)` buffer.
fn member_vectors<'a>(
    features: &'a [f64],
    labels: &'a LabelMap,
    channels: usize,
) -> impl Iterator<Item = (usize, Vec<f64>)> + 'a {
    let (_, h, w) = labels.dims();
    let plane = h * w;
    labels
        .classes()
        .iter()
        .enumerate()
        .filter(move |(_, &c)| c != labels.ignore_index())
        .map(move |(idx, &c)| {
            let (n, p) = (idx / plane, idx % plane);
            let v = (0..channels)
                .map(|ch| features[(n * channels + ch) * plane + p])
                .collect();
            (c as usize, v)
        })
}

fn check_alignment(deep: &FeatureMap, labels: &LabelMap) -> Result<()> {
    let (n, _, h, w) = deep.dims4();
    if labels.dims() != (n, h, w) {
        return Err(Error::validation(format!(
            "labels {:?} do not match deep features `{}` spatial shape {:?}; downsample them first",
            labels.dims(),
            deep.layer_tag(),
            (n, h, w)
        )));
    }
    Ok(())
}

/// Per-class mean of the labelled deep-feature vectors.
pub fn compute_centroids(deep: &FeatureMap, labels: &LabelMap) -> Result<ClassCentroids> {
    check_alignment(deep, labels)?;
    let (_, c, _, _) = deep.dims4();
    let k = labels.num_classes();
    let feats = deep
        .tensor()
        .detach()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut sums = vec![vec![0.0; c]; k];
    let mut counts = vec![0usize; k];
    for (class, v) in member_vectors(&feats, labels, c) {
        counts[class] += 1;
        for (s, x) in sums[class].iter_mut().zip(v) {
            *s += x;
        }
    }
    let centers = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                s
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect();
    Ok(ClassCentroids {
        centers,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
    })
}

/// Exponential moving average of centroids across batches. Classes missing
/// from a batch keep their remembered centre.
#[derive(Debug, Clone)]
pub struct CentroidMemory {
    decay: f64,
    state: Option<ClassCentroids>,
}

impl CentroidMemory {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("centroid EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { decay, state: None })
    }

    pub fn update(&mut self, batch: &ClassCentroids) -> ClassCentroids {
        let next = match self.state.take() {
            None => batch.clone(),
            Some(mut mem) => {
                for k in 0..batch.num_classes() {
                    if !batch.present[k] {
                        continue;
                    }
                    if mem.present[k] {
                        for (m, b) in mem.centers[k].iter_mut().zip(&batch.centers[k]) {
                            *m = self.decay * *m + (1.0 - self.decay) * b;
                        }
                    } else {
                        mem.centers[k] = batch.centers[k].clone();
                        mem.present[k] = true;
                    }
                    mem.counts[k] += batch.counts[k];
                }
                mem
            }
        };
        self.state = Some(next.clone());
        next
    }
}

#[derive(Debug, Clone)]
pub struct CategoryLossResult {
    /// Mean penalty over contributing pixels; differentiable w.r.t. the deep features.
    pub loss: Tensor,
    pub value: f64,
    /// Mean penalty of each class, `None` for classes without pixels.
    pub per_class: Vec<Option<f64>>,
    /// Penalty of every pixel in `(N, H, W)` order, `None` where excluded.
    pub per_pixel: Vec<Option<f64>>,
    pub contributing_pixels: usize,
}

/// Cosine-distance penalty `1 - cos(C_k, R)` of every labelled pixel against
/// its own class centroid, averaged over contributing pixels.
///
/// Pixels that are ignored, or whose class has no centroid, are excluded. A
/// batch with no contributing pixel yields 0.
pub fn category_loss(
    deep: &FeatureMap,
    centroids: &ClassCentroids,
    labels: &LabelMap,
) -> Result<CategoryLossResult> {
    check_alignment(deep, labels)?;
    let (n, c, h, w) = deep.dims4();
    let k = labels.num_classes();
    if centroids.num_classes() != k || centroids.channels() != c {
        return Err(Error::validation(format!(
            "centroids are {}x{}, expected {k} classes of {c} channels",
            centroids.num_classes(),
            centroids.channels()
        )));
    }
    let plane = h * w;
    let center_norms: Vec<f64> = centroids
        .centers
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();

    // Per-pixel centroid field, the reciprocal centroid norm and the pixel mask.
    let mut gathered = vec![0f64; n * c * plane];
    let mut inv_center_norm = vec![0f64; n * plane];
    let mut mask = vec![0f64; n * plane];
    let mut contributing = 0usize;
    for (idx, &cls) in labels.classes().iter().enumerate() {
        if cls == labels.ignore_index() || !centroids.present[cls as usize] {
            continue;
        }
        let (b, p) = (idx / plane, idx % plane);
        for (ch, &v) in centroids.centers[cls as usize].iter().enumerate() {
            gathered[(b * c + ch) * plane + p] = v;
        }
        inv_center_norm[idx] = 1.0 / (center_norms[cls as usize] + COSINE_EPS);
        mask[idx] = 1.0;
        contributing += 1;
    }

    let features = deep.tensor();
    let dev = features.device();
    let dtype = features.dtype();
    let to_t = |v: Vec<f64>, shape: (usize, usize, usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
    };
    let gathered = to_t(gathered, (n, c, h, w))?;
    let inv_center_norm = to_t(inv_center_norm, (n, 1, h, w))?;
    let mask_t = to_t(mask.clone(), (n, 1, h, w))?;

    let dot = (features * &gathered)?.sum_keepdim(1)?;
    let feat_norm = (l2_norm_keepdim(features, 1)? + COSINE_EPS)?;
    let cosine = (dot / feat_norm)?.mul(&inv_center_norm)?;
    let penalty = cosine.affine(-1.0, 1.0)?.mul(&mask_t)?;

    let loss = if contributing == 0 {
        Tensor::zeros((), dtype, dev)?
    } else {
        (penalty.sum_all()? / contributing as f64)?
    };
    let value = scalar_f64(&loss)?;

    let pen_host = penalty.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let per_pixel: Vec<Option<f64>> = pen_host
        .iter()
        .zip(&mask)
        .map(|(&p, &m)| (m > 0.0).then_some(p))
        .collect();
    let mut class_sum = vec![0.0; k];
    let mut class_n = vec![0usize; k];
    for (pen, &cls) in per_pixel.iter().zip(labels.classes()) {
        if let Some(p) = pen {
            class_sum[cls as usize] += p;
            class_n[cls as usize] += 1;
        }
    }
    let per_class = class_sum
        .iter()
        .zip(&class_n)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();

    Ok(CategoryLossResult {
        loss,
        value,
        per_class,
        per_pixel,
        contributing_pixels: contributing,
    })
}
