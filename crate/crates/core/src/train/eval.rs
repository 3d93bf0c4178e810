//! Confusion-matrix evaluation with the error decomposition alongside.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, Sample};
use crate::diagnosis::{decompose_errors, ErrorDecomposition};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::model::{ReferenceUNet, SegmentationModel};
use crate::types::{LabelMap, IGNORE_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Boundary band for the decomposition and boundary-F.
    pub band: usize,
    /// Keep per-pixel error kinds (needed for overlays).
    pub keep_pixels: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            band: crate::diagnosis::DEFAULT_BAND,
            keep_pixels: false,
        }
    }
}

/// Headline validation numbers as logged per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub boundary_f: f64,
    pub band: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub decomposition: ErrorDecomposition,
    pub metrics: ValMetrics,
}

fn crop_labels(pred: &LabelMap, b: usize, h: usize, w: usize) -> Result<LabelMap> {
    let (_, _, pw) = pred.dims();
    let img = pred.image(b);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&img.classes()[y * pw..y * pw + w]);
    }
    LabelMap::new(out, (1, h, w), pred.num_classes(), pred.ignore_index())
}

/// Runs the model in inference mode over the whole dataset. Images are padded
/// to the model's input multiple and predictions cropped back, so every
/// count refers to original pixels.
pub fn evaluate<M: SegmentationModel>(
    model: &M,
    data: &dyn Dataset,
    options: &EvalOptions,
    dtype: DType,
    device: &Device,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    if options.batch_size == 0 {
        return Err(Error::config("evaluation batch size must be positive"));
    }
    let k = model.num_classes();
    if data.num_classes() != k {
        return Err(Error::data(format!(
            "dataset has {} classes, model predicts {k}",
            data.num_classes()
        )));
    }
    let mut confusion = ConfusionMatrix::new(k);
    let mut decomposition = ErrorDecomposition::empty(options.band, k);
    let multiple = ReferenceUNet::INPUT_MULTIPLE;

    let mut pending: Vec<Sample> = Vec::new();
    let mut flush = |group: &mut Vec<Sample>| -> Result<()> {
        if group.is_empty() {
            return Ok(());
        }
        let padded: Vec<Sample> = group.iter().map(|s| s.pad_to_multiple(multiple)).collect();
        let batch = make_batch(&padded, k, dtype, device)?;
        let logits = model.forward(&batch.images, false)?;
        let pred = argmax_labels(&logits, IGNORE_INDEX)?;
        for (b, s) in group.iter().enumerate() {
            let p = crop_labels(&pred, b, s.height, s.width)?;
            let gt = LabelMap::new(s.labels.clone(), (1, s.height, s.width), k, IGNORE_INDEX)?;
            confusion.accumulate(&p, &gt)?;
            let mut d = decompose_errors(&p, &gt, options.band)?;
            if !options.keep_pixels {
                d.discard_pixels();
            }
            decomposition.extend(d)?;
        }
        group.clear();
        Ok(())
    };
    for idx in 0..data.len() {
        let s = data.sample(idx)?;
        let same = pending
            .first()
            .map_or(true, |f| (f.height, f.width) == (s.height, s.width));
        if !same || pending.len() == options.batch_size {
            flush(&mut pending)?;
        }
        pending.push(s);
    }
    flush(&mut pending)?;

    let miou = confusion
        .mean_iou()
        .ok_or_else(|| Error::data("every evaluation pixel is ignored; mIoU is undefined"))?;
    let metrics = ValMetrics {
        miou,
        per_class_iou: confusion.per_class_iou(),
        pixel_accuracy: confusion.pixel_accuracy().unwrap_or(0.0),
        boundary_f: decomposition.boundary_f(),
        band: options.band,
    };
    Ok(EvalReport {
        confusion,
        decomposition,
        metrics,
    })
}

/// Loads the model of a checkpoint on the CPU in single precision.
pub fn load_model(path: &std::path::Path) -> Result<ReferenceUNet> {
    Ok(crate::model::load_checkpoint(path, DType::F32, &Device::Cpu)?.model)
}
