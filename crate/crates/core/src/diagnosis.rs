//! Error diagnosis: splits mispredicted pixels into regional-boundary errors
//! (within `d` pixels of a ground-truth class boundary) and semantic-category
//! errors (everything else), and writes overlay images plus a summary.
//!
//! Distances are Chebyshev (8-connected) throughout.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelMap;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BAND: usize = 2;
pub const CATEGORY_TINT: [u8; 3] = [255, 0, 0];
pub const BOUNDARY_TINT: [u8; 3] = [255, 255, 0];

/// Marks every pixel `i` for which `hit(i, j)` holds for some pixel `j` of
/// the same image within Chebyshev distance `d`.
fn window_any(labels: &LabelMap, d: usize, hit: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    let (n, h, w) = labels.dims();
    let plane = h * w;
    let mut out = vec![false; n * plane];
    for b in 0..n {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(d), (y + d).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(d), (x + d).min(w - 1));
                let i = b * plane + y * w + x;
                out[i] = (y0..=y1).any(|yy| (x0..=x1).any(|xx| hit(i, b * plane + yy * w + xx)));
            }
        }
    }
    out
}

/// Pixels within Chebyshev distance `d` of a pixel carrying a different
/// non-ignore class. Ignore pixels are never in the band.
pub fn gt_boundary_mask(labels: &LabelMap, d: usize) -> Result<Vec<bool>> {
    if d == 0 {
        return Err(Error::validation("boundary band width must be at least 1"));
    }
    let c = labels.classes();
    let ignore = labels.ignore_index();
    Ok(window_any(labels, d, |i, j| c[i] != ignore && c[j] != ignore && c[j] != c[i]))
}

/// Dilates a per-pixel flag map of the same layout as `labels` by `d`.
fn dilate(labels: &LabelMap, flags: &[bool], d: usize) -> Vec<bool> {
    window_any(labels, d, |_, j| flags[j])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelKind {
    Correct,
    BoundaryError,
    CategoryError,
    Ignored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub correct: u64,
    pub boundary_error: u64,
    pub category_error: u64,
    pub ignored: u64,
}

impl ErrorCounts {
    pub fn total(&self) -> u64 {
        self.correct + self.boundary_error + self.category_error + self.ignored
    }

    fn add(&mut self, kind: PixelKind) {
        match kind {
            PixelKind::Correct => self.correct += 1,
            PixelKind::BoundaryError => self.boundary_error += 1,
            PixelKind::CategoryError => self.category_error += 1,
            PixelKind::Ignored => self.ignored += 1,
        }
    }

    fn merge(&mut self, other: &ErrorCounts) {
        self.correct += other.correct;
        self.boundary_error += other.boundary_error;
        self.category_error += other.category_error;
        self.ignored += other.ignored;
    }
}

/// Boundary-pixel matching counts behind the boundary F-score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub pred_edges: u64,
    pub pred_matched: u64,
    pub gt_edges: u64,
    pub gt_matched: u64,
}

impl BoundaryCounts {
    fn merge(&mut self, o: &BoundaryCounts) {
        self.pred_edges += o.pred_edges;
        self.pred_matched += o.pred_matched;
        self.gt_edges += o.gt_edges;
        self.gt_matched += o.gt_matched;
    }

    /// Harmonic mean of boundary precision and recall. Two edge-free maps
    /// agree perfectly; one edge-free map against a non-empty one scores 0.
    pub fn f_score(&self) -> f64 {
        if self.pred_edges == 0 && self.gt_edges == 0 {
            return 1.0;
        }
        if self.pred_edges == 0 || self.gt_edges == 0 {
            return 0.0;
        }
        let p = self.pred_matched as f64 / self.pred_edges as f64;
        let r = self.gt_matched as f64 / self.gt_edges as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassErrors {
    pub gt_pixels: u64,
    pub boundary_error: u64,
    pub category_error: u64,
}

/// Decomposition of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDecomposition {
    pub height: usize,
    pub width: usize,
    pub counts: ErrorCounts,
    pub boundary: BoundaryCounts,
    /// Per-pixel classification in row-major order.
    pub kinds: Vec<PixelKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub band: usize,
    pub num_classes: usize,
    pub images: Vec<ImageDecomposition>,
    /// Ground-truth class x predicted class counts of category errors only.
    pub category_confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassErrors>,
    /// Boundary matching pooled over all images.
    pub boundary: BoundaryCounts,
}

impl ErrorDecomposition {
    pub fn empty(band: usize, num_classes: usize) -> Self {
        Self {
            band,
            num_classes,
            images: Vec::new(),
            category_confusion: vec![vec![0; num_classes]; num_classes],
            per_class: vec![ClassErrors::default(); num_classes],
            boundary: BoundaryCounts::default(),
        }
    }

    pub fn totals(&self) -> ErrorCounts {
        let mut t = ErrorCounts::default();
        for img in &self.images {
            t.merge(&img.counts);
        }
        t
    }

    pub fn boundary_f(&self) -> f64 {
        self.boundary.f_score()
    }

    /// Drops the per-pixel maps, keeping every count.
    pub fn discard_pixels(&mut self) {
        for img in &mut self.images {
            img.kinds = Vec::new();
        }
    }

    /// Appends the images of another decomposition at the same band.
    pub fn extend(&mut self, other: ErrorDecomposition) -> Result<()> {
        if (other.band, other.num_classes) != (self.band, self.num_classes) {
            return Err(Error::validation("cannot merge decompositions with different band or classes"));
        }
        self.images.extend(other.images);
        for (row, orow) in self.category_confusion.iter_mut().zip(&other.category_confusion) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.gt_pixels += b.gt_pixels;
            a.boundary_error += b.boundary_error;
            a.category_error += b.category_error;
        }
        self.boundary.merge(&other.boundary);
        Ok(())
    }
}

/// Boundary matching of `pred` against `gt` at tolerance `d`. Prediction
/// pixels sitting on ground-truth ignore pixels are treated as ignored.
fn boundary_counts(pred: &LabelMap, gt: &LabelMap, d: usize) -> Result<Vec<BoundaryCounts>> {
    let ignore = gt.ignore_index();
    let masked: Vec<u32> = pred
        .classes()
        .iter()
        .zip(gt.classes())
        .map(|(&p, &g)| if g == ignore { ignore } else { p })
        .collect();
    let pred = LabelMap::new(masked, pred.dims(), gt.num_classes(), ignore)?;
    let pred_edges = gt_boundary_mask(&pred, 1)?;
    let gt_edges = gt_boundary_mask(gt, 1)?;
    let near_gt = dilate(gt, &gt_edges, d);
    let near_pred = dilate(gt, &pred_edges, d);
    let (n, h, w) = gt.dims();
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let mut c = BoundaryCounts::default();
            for i in b * plane..(b + 1) * plane {
                if pred_edges[i] {
                    c.pred_edges += 1;
                    c.pred_matched += near_gt[i] as u64;
                }
                if gt_edges[i] {
                    c.gt_edges += 1;
                    c.gt_matched += near_pred[i] as u64;
                }
            }
            c
        })
        .collect())
}

/// Classifies every pixel as correct, boundary error, category error or
/// ignored, and scores boundary agreement at the same tolerance.
pub fn decompose_errors(pred: &LabelMap, gt: &LabelMap, d: usize) -> Result<ErrorDecomposition> {
    if pred.dims() != gt.dims() {
        return Err(Error::validation(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let k = gt.num_classes();
    if let Some(&bad) = pred
        .classes()
        .iter()
        .zip(gt.classes())
        .find(|(&p, &g)| g != gt.ignore_index() && p as usize >= k)
        .map(|(p, _)| p)
    {
        return Err(Error::validation(format!("prediction {bad} is not a class below {k}")));
    }
    let band = gt_boundary_mask(gt, d)?;
    let (_, h, w) = gt.dims();
    let plane = h * w;
    let mut out = ErrorDecomposition::empty(d, k);
    let boundary = boundary_counts(pred, gt, d)?;
    for (b, bc) in boundary.into_iter().enumerate() {
        let mut counts = ErrorCounts::default();
        let mut kinds = Vec::with_capacity(plane);
        for i in b * plane..(b + 1) * plane {
            let (p, g) = (pred.classes()[i], gt.classes()[i]);
            let kind = if g == gt.ignore_index() {
                PixelKind::Ignored
            } else if p == g {
                PixelKind::Correct
            } else if band[i] {
                PixelKind::BoundaryError
            } else {
                PixelKind::CategoryError
            };
            if kind != PixelKind::Ignored {
                let pc = &mut out.per_class[g as usize];
                pc.gt_pixels += 1;
                match kind {
                    PixelKind::BoundaryError => pc.boundary_error += 1,
                    PixelKind::CategoryError => {
                        pc.category_error += 1;
                        out.category_confusion[g as usize][p as usize] += 1;
                    }
                    _ => {}
                }
            }
            counts.add(kind);
            kinds.push(kind);
        }
        out.boundary.merge(&bc);
        out.images.push(ImageDecomposition {
            height: h,
            width: w,
            counts,
            boundary: bc,
            kinds,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub index: usize,
    pub overlay: String,
    #[serde(flatten)]
    pub counts: ErrorCounts,
    pub boundary_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub band: usize,
    pub distance: String,
    pub totals: ErrorCounts,
    pub total_pixels: u64,
    pub boundary_f: f64,
    pub boundary: BoundaryCounts,
    pub per_class: Vec<ClassErrors>,
    pub category_confusion: Vec<Vec<u64>>,
    pub images: Vec<ImageSummary>,
}

fn tint(px: &mut Rgb<u8>, color: [u8; 3]) {
    for (c, t) in px.0.iter_mut().zip(color) {
        *c = ((*c as u16 + t as u16 + 1) / 2) as u8;
    }
}

/// Overlay of one image: category errors blended towards red, boundary errors
/// towards yellow, every other pixel untouched.
pub fn overlay(image: &RgbImage, kinds: &[PixelKind]) -> Result<RgbImage> {
    if (image.width() as usize * image.height() as usize) != kinds.len() {
        return Err(Error::validation(format!(
            "image {}x{} does not match {} classified pixels",
            image.width(),
            image.height(),
            kinds.len()
        )));
    }
    let mut out = image.clone();
    for (px, kind) in out.pixels_mut().zip(kinds) {
        match kind {
            PixelKind::CategoryError => tint(px, CATEGORY_TINT),
            PixelKind::BoundaryError => tint(px, BOUNDARY_TINT),
            _ => {}
        }
    }
    Ok(out)
}

/// Writes `overlay_<i>.png` per image and `summary.json` into `out_dir`.
pub fn emit_report(decomp: &ErrorDecomposition, images: &[RgbImage], out_dir: &Path) -> Result<ReportSummary> {
    if images.len() != decomp.images.len() {
        return Err(Error::validation(format!(
            "{} images for {} decomposed images",
            images.len(),
            decomp.images.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summaries = Vec::with_capacity(images.len());
    for (i, (img, dec)) in images.iter().zip(&decomp.images).enumerate() {
        if (img.height() as usize, img.width() as usize) != (dec.height, dec.width) {
            return Err(Error::validation(format!(
                "image {i} is {}x{}, its decomposition {}x{}",
                img.width(),
                img.height(),
                dec.width,
                dec.height
            )));
        }
        let name = format!("overlay_{i:04}.png");
        let path = out_dir.join(&name);
        overlay(img, &dec.kinds)?
            .save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        summaries.push(ImageSummary {
            index: i,
            overlay: name,
            counts: dec.counts,
            boundary_f: dec.boundary.f_score(),
        });
    }
    let totals = decomp.totals();
    let summary = ReportSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        band: decomp.band,
        distance: "chebyshev".into(),
        totals,
        total_pixels: totals.total(),
        boundary_f: decomp.boundary_f(),
        boundary: decomp.boundary,
        per_class: decomp.per_class.clone(),
        category_confusion: decomp.category_confusion.clone(),
        images: summaries,
    };
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
