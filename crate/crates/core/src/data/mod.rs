//! Datasets, augmentation and batch assembly.

mod synth;
mod voc;

pub use synth::{PlacedShape, Shape, ShapeKind, SynthDataset, SynthParams};
pub use voc::VocDataset;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMap, IGNORE_INDEX};

/// One image with its label grid. `image` is channel-major RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Sample {
    pub fn to_rgb(&self) -> RgbImage {
        let plane = self.height * self.width;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let c = |ch: usize| (self.image[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([c(0), c(1), c(2)])
        })
    }

    /// Pads bottom/right to at least `(h, w)`: black image, ignore labels.
    pub fn pad_to(&self, h: usize, w: usize) -> Sample {
        if self.height >= h && self.width >= w {
            return self.clone();
        }
        let (nh, nw) = (self.height.max(h), self.width.max(w));
        let mut image = vec![0f32; 3 * nh * nw];
        let mut labels = vec![IGNORE_INDEX; nh * nw];
        for y in 0..self.height {
            let (src, dst) = (y * self.width, y * nw);
            labels[dst..dst + self.width].copy_from_slice(&self.labels[src..src + self.width]);
            for c in 0..3 {
                let s = c * self.height * self.width + src;
                let d = c * nh * nw + dst;
                image[d..d + self.width].copy_from_slice(&self.image[s..s + self.width]);
            }
        }
        Sample {
            name: self.name.clone(),
            height: nh,
            width: nw,
            image,
            labels,
        }
    }

    /// Pads up to the next multiple of `m` in both directions.
    pub fn pad_to_multiple(&self, m: usize) -> Sample {
        self.pad_to(self.height.div_ceil(m) * m, self.width.div_ceil(m) * m)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Sample {
        let plane = self.height * self.width;
        let mut image = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in y0..y0 + h {
                let s = c * plane + y * self.width + x0;
                image.extend_from_slice(&self.image[s..s + w]);
            }
        }
        let mut labels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..][..w]);
        }
        Sample {
            name: self.name.clone(),
            height: h,
            width: w,
            image,
            labels,
        }
    }

    /// Mirrors left-right (`horizontal`) or top-bottom.
    pub fn flip(&self, horizontal: bool) -> Sample {
        let (h, w) = (self.height, self.width);
        let src = |y: usize, x: usize| if horizontal { y * w + (w - 1 - x) } else { (h - 1 - y) * w + x };
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let (d, s) = (y * w + x, src(y, x));
                out.labels[d] = self.labels[s];
                for c in 0..3 {
                    out.image[c * h * w + d] = self.image[c * h * w + s];
                }
            }
        }
        out
    }
}

/// Indexed collection of samples with a fixed class vocabulary.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn num_classes(&self) -> usize;

    fn sample(&self, index: usize) -> Result<Sample>;
}

/// Training-time augmentation: random crop (padding first when the image is
/// smaller) and independent coin-flip horizontal and vertical mirroring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub crop: Option<(usize, usize)>,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        self.crop.is_none() && !self.hflip && !self.vflip
    }

    /// Deterministic in `(seed, epoch, index)`.
    pub fn apply(&self, sample: &Sample, seed: u64, epoch: usize, index: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        let mut out = match self.crop {
            Some((h, w)) => {
                let padded = sample.pad_to(h, w);
                let y0 = rng.random_range(0..=padded.height - h);
                let x0 = rng.random_range(0..=padded.width - w);
                padded.crop(y0, x0, h, w)
            }
            None => sample.clone(),
        };
        if self.hflip && rng.random_bool(0.5) {
            out = out.flip(true);
        }
        if self.vflip && rng.random_bool(0.5) {
            out = out.flip(false);
        }
        out
    }
}

/// Stacked images `(N, 3, H, W)`, centred to `[-0.5, 0.5]`, with labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: LabelMap,
    pub names: Vec<String>,
}

pub fn make_batch(samples: &[Sample], num_classes: usize, dtype: DType, device: &Device) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::data("cannot build an empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut pixels = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::data(format!(
                "sample `{}` is {}x{} but the batch is {h}x{w}; configure a crop size",
                s.name, s.height, s.width
            )));
        }
        pixels.extend(s.image.iter().map(|v| v - 0.5));
        labels.extend_from_slice(&s.labels);
    }
    Ok(Batch {
        images: Tensor::from_vec(pixels, (samples.len(), 3, h, w), device)?.to_dtype(dtype)?,
        labels: LabelMap::new(labels, (samples.len(), h, w), num_classes, IGNORE_INDEX)
            .map_err(|e| Error::data(e.to_string()))?,
        names: samples.iter().map(|s| s.name.clone()).collect(),
    })
}
