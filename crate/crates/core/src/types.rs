//! Shared value types: feature maps, label maps and the label utilities every
//! loss builds on.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Default ignore index, following the VOC ground-truth convention.
pub const IGNORE_INDEX: u32 = 255;

/// A `(batch, channel, height, width)` activation captured at one layer.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Tensor,
    layer_tag: String,
}

impl FeatureMap {
    /// Wraps a rank-4 tensor. Empty axes are validation errors, non-finite
    /// entries numeric failures.
    pub fn new(data: Tensor, layer_tag: impl Into<String>) -> Result<Self> {
        let layer_tag = layer_tag.into();
        let dims = data.dims();
        if dims.len() != 4 {
            return Err(Error::validation(format!(
                "feature map `{layer_tag}` must have 4 axes (N, C, H, W), got shape {:?}",
                dims
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!(
                "feature map `{layer_tag}` has an empty axis: {:?}",
                dims
            )));
        }
        if !all_finite(&data)? {
            return Err(Error::Numeric {
                component: format!("feature map `{layer_tag}`"),
                value: f64::NAN,
            });
        }
        Ok(Self { data, layer_tag })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    /// `(batch, channels, height, width)`.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// `true` when every element is finite. `x * 0` is `0` for finite `x` and NaN
/// otherwise, so one reduction decides it.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let probe = t
        .affine(0.0, 0.0)?
        .to_dtype(DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?;
    Ok(probe.is_finite())
}

/// Integer class grid `(batch, height, width)` with a reserved ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    classes: Vec<u32>,
    batch: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u32,
}

impl LabelMap {
    pub fn new(
        classes: Vec<u32>,
        (batch, height, width): (usize, usize, usize),
        num_classes: usize,
        ignore_index: u32,
    ) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "label map dims must be positive, got ({batch}, {height}, {width})"
            )));
        }
        if num_classes == 0 {
            return Err(Error::validation("label map needs at least one class"));
        }
        if (ignore_index as usize) < num_classes {
            return Err(Error::validation(format!(
                "ignore index {ignore_index} collides with class range 0..{num_classes}"
            )));
        }
        if classes.len() != batch * height * width {
            return Err(Error::validation(format!(
                "label buffer holds {} entries, expected {}",
                classes.len(),
                batch * height * width
            )));
        }
        if let Some(pos) = classes
            .iter()
            .position(|&c| c != ignore_index && c as usize >= num_classes)
        {
            let (b, rem) = (pos / (height * width), pos % (height * width));
            return Err(Error::validation(format!(
                "label {} at (batch {b}, y {}, x {}) is out of range for {num_classes} classes",
                classes[pos],
                rem / width,
                rem % width
            )));
        }
        Ok(Self {
            classes,
            batch,
            height,
            width,
            num_classes,
            ignore_index,
        })
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u32 {
        self.classes[(b * self.height + y) * self.width + x]
    }

    pub fn is_valid_at(&self, idx: usize) -> bool {
        self.classes[idx] != self.ignore_index
    }

    pub fn valid_count(&self) -> usize {
        self.classes
            .iter()
            .filter(|&&c| c != self.ignore_index)
            .count()
    }

    pub fn valid_mask(&self) -> ValidMask {
        ValidMask {
            valid: self
                .classes
                .iter()
                .map(|&c| c != self.ignore_index)
                .collect(),
            dims: self.dims(),
        }
    }

    /// The single image `b` as a batch of one.
    pub fn image(&self, b: usize) -> LabelMap {
        let n = self.height * self.width;
        LabelMap {
            classes: self.classes[b * n..(b + 1) * n].to_vec(),
            batch: 1,
            ..self.clone()
        }
    }

    /// Stacks single-or-multi image label maps along the batch axis.
    pub fn concat(maps: &[LabelMap]) -> Result<LabelMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::validation("cannot concatenate zero label maps"))?;
        let mut classes = Vec::new();
        let mut batch = 0;
        for m in maps {
            if (m.height, m.width, m.num_classes, m.ignore_index)
                != (first.height, first.width, first.num_classes, first.ignore_index)
            {
                return Err(Error::validation(
                    "label maps disagree on shape, class count or ignore index",
                ));
            }
            classes.extend_from_slice(&m.classes);
            batch += m.batch;
        }
        Ok(LabelMap {
            classes,
            batch,
            ..first.clone()
        })
    }
}

/// Per-pixel validity (`false` on ignore pixels), laid out like the label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    valid: Vec<bool>,
    dims: (usize, usize, usize),
}

impl ValidMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(batch, 1, height, width)` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (b, h, w) = self.dims;
        let vals: Vec<f32> = self.valid.iter().map(|&v| v as u8 as f32).collect();
        Ok(Tensor::from_vec(vals, (b, 1, h, w), device)?.to_dtype(dtype)?)
    }
}

/// One-hot encoding with K channels. Ignore pixels map to the zero vector and
/// are flagged invalid in the returned mask.
pub fn one_hot(labels: &LabelMap, dtype: DType, device: &Device) -> Result<(FeatureMap, ValidMask)> {
    let (b, h, w) = labels.dims();
    let k = labels.num_classes();
    let plane = h * w;
    let mut data = vec![0f32; b * k * plane];
    for (idx, &c) in labels.classes().iter().enumerate() {
        if c == labels.ignore_index() {
            continue;
        }
        let (n, p) = (idx / plane, idx % plane);
        data[(n * k + c as usize) * plane + p] = 1.0;
    }
    let t = Tensor::from_vec(data, (b, k, h, w), device)?.to_dtype(dtype)?;
    Ok((FeatureMap::new(t, "one_hot")?, labels.valid_mask()))
}

/// Nearest-neighbour label resize with the corner-anchored rule
/// `src = floor(dst * src_len / dst_len)`.
pub fn downsample_labels(labels: &LabelMap, (th, tw): (usize, usize)) -> Result<LabelMap> {
    if th == 0 || tw == 0 {
        return Err(Error::validation(format!(
            "downsample target must be positive, got {th}x{tw}"
        )));
    }
    let (b, h, w) = labels.dims();
    if th > h || tw > w {
        return Err(Error::validation(format!(
            "downsample target {th}x{tw} exceeds source {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(b * th * tw);
    for n in 0..b {
        for y in 0..th {
            let sy = y * h / th;
            for x in 0..tw {
                out.push(labels.get(n, sy, x * w / tw));
            }
        }
    }
    LabelMap::new(
        out,
        (b, th, tw),
        labels.num_classes(),
        labels.ignore_index(),
    )
}
