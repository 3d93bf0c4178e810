//! VOC-layout directories:
//!
//! ```text
//! <root>/JPEGImages/<stem>.jpg
//! <root>/SegmentationClass/<stem>.png      (palette or 8-bit grey indices)
//! <root>/ImageSets/Segmentation/<split>.txt
//! ```
//!
//! Mask value 255 marks ignore pixels. Files are read on demand.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::types::IGNORE_INDEX;

#[derive(Debug, Clone)]
pub struct VocDataset {
    root: PathBuf,
    stems: Vec<String>,
    num_classes: usize,
}

impl VocDataset {
    /// Reads the split list and checks that every stem has both files.
    pub fn open(root: &Path, split: &str, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > IGNORE_INDEX as usize {
            return Err(Error::config(format!("class count {num_classes} must be in 1..=255")));
        }
        let list = root.join("ImageSets").join("Segmentation").join(format!("{split}.txt"));
        let text = std::fs::read_to_string(&list)
            .map_err(|e| Error::data(format!("cannot read split list {}: {e}", list.display())))?;
        let stems: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if stems.is_empty() {
            return Err(Error::data(format!("split list {} is empty", list.display())));
        }
        let ds = Self {
            root: root.to_path_buf(),
            stems,
            num_classes,
        };
        let mut problems = Vec::new();
        for stem in &ds.stems {
            let (img, mask) = (ds.image_path(stem), ds.mask_path(stem));
            match (img.is_file(), mask.is_file()) {
                (true, true) => {}
                (false, true) => problems.push(format!("{}: mask without image", mask.display())),
                (true, false) => problems.push(format!("{}: image without mask", img.display())),
                (false, false) => problems.push(format!("{stem}: neither image nor mask found")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::data(format!(
                "{} problem file(s) in {}:\n  {}",
                problems.len(),
                root.display(),
                problems.join("\n  ")
            )));
        }
        Ok(ds)
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    fn image_path(&self, stem: &str) -> PathBuf {
        self.root.join("JPEGImages").join(format!("{stem}.jpg"))
    }

    fn mask_path(&self, stem: &str) -> PathBuf {
        self.root.join("SegmentationClass").join(format!("{stem}.png"))
    }

    /// Loads every sample and collects one message per broken file.
    pub fn validate_all(&self) -> Vec<String> {
        (0..self.stems.len())
            .filter_map(|i| self.sample(i).err().map(|e| e.to_string()))
            .collect()
    }
}

/// Raw mask indices, without palette expansion.
pub fn read_index_png(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let file = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(bad(format!(
            "mask must be 8-bit indexed or greyscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = (0..h)
        .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().map(|&v| v as u32))
        .collect();
    Ok((h, w, values))
}

impl Dataset for VocDataset {
    fn len(&self) -> usize {
        self.stems.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        let stem = self
            .stems
            .get(index)
            .ok_or_else(|| Error::data(format!("index {index} out of range for {} images", self.stems.len())))?;
        let img_path = self.image_path(stem);
        let rgb = image::open(&img_path)
            .map_err(|e| Error::data(format!("{}: {e}", img_path.display())))?
            .to_rgb8();
        let mask_path = self.mask_path(stem);
        let (h, w, labels) = read_index_png(&mask_path)?;
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            return Err(Error::data(format!(
                "{}: mask is {w}x{h} but image is {}x{}",
                mask_path.display(),
                rgb.width(),
                rgb.height()
            )));
        }
        if let Some(pos) = labels
            .iter()
            .position(|&c| c != IGNORE_INDEX && c as usize >= self.num_classes)
        {
            return Err(Error::data(format!(
                "{}: class {} at (y {}, x {}) is out of range for {} classes",
                mask_path.display(),
                labels[pos],
                pos / w,
                pos % w,
                self.num_classes
            )));
        }
        let plane = h * w;
        let mut image = vec![0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                image[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(Sample {
            name: stem.clone(),
            height: h,
            width: w,
            image,
            labels,
        })
    }
}
