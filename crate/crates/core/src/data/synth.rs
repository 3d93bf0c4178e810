//! Seeded synthetic shapes: flat-coloured rectangles, disks and triangles on
//! a striped, noisy background. Image and mask are rendered from the same
//! geometry, tested at pixel centres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Half-open box `[x0, x1) x [y0, y1)`.
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// A shape with its class and flat RGB fill, in painting order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub shape: Shape,
    pub class: u32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeKind>,
    #[serde(default = "default_max_shapes")]
    pub max_shapes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_shapes() -> Vec<ShapeKind> {
    vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle]
}

fn default_max_shapes() -> usize {
    4
}

impl SynthParams {
    pub fn new(count: usize, size: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            count,
            size,
            num_classes,
            shapes: default_shapes(),
            max_shapes: default_max_shapes(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.num_classes > 255 {
            return Err(Error::config("synthetic data supports at most 255 classes"));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::config(format!(
                "synthetic image size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        if self.shapes.is_empty() || self.max_shapes == 0 {
            return Err(Error::config("synthetic data needs at least one shape kind and max_shapes >= 1"));
        }
        Ok(())
    }
}

/// Base fill colour of foreground class `k` (1-based), spread around the hue
/// circle.
fn class_color(k: u32, num_classes: usize) -> [f32; 3] {
    let hue = (k - 1) as f32 / (num_classes - 1) as f32;
    let ch = |offset: f32| 0.5 + 0.4 * (std::f32::consts::TAU * (hue + offset)).cos();
    [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    params: SynthParams,
}

impl SynthDataset {
    pub fn new(params: SynthParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    fn rng(&self, index: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(((index as u64) << 1) | stream);
        rng
    }

    /// Shapes of image `index` in painting order.
    pub fn geometry(&self, index: usize) -> Vec<PlacedShape> {
        let p = &self.params;
        let mut rng = self.rng(index, 0);
        let s = p.size as f64;
        let count = rng.random_range(1..=p.max_shapes);
        (0..count)
            .map(|_| {
                let kind = p.shapes[rng.random_range(0..p.shapes.len())];
                let class = rng.random_range(1..p.num_classes as u32);
                let cx = rng.random_range(0.15 * s..0.85 * s);
                let cy = rng.random_range(0.15 * s..0.85 * s);
                let r = rng.random_range(0.1 * s..0.25 * s);
                let shape = match kind {
                    ShapeKind::Rectangle => {
                        let aspect = rng.random_range(0.6..1.6);
                        Shape::Rectangle {
                            x0: cx - r * aspect,
                            y0: cy - r / aspect,
                            x1: cx + r * aspect,
                            y1: cy + r / aspect,
                        }
                    }
                    ShapeKind::Disk => Shape::Disk { cx, cy, r },
                    ShapeKind::Triangle => {
                        let rot = rng.random_range(0.0..std::f64::consts::TAU);
                        let corner = |i: usize| {
                            let a = rot + i as f64 * std::f64::consts::TAU / 3.0;
                            (cx + 1.3 * r * a.cos(), cy + 1.3 * r * a.sin())
                        };
                        Shape::Triangle {
                            pts: [corner(0), corner(1), corner(2)],
                        }
                    }
                };
                let base = class_color(class, p.num_classes);
                let color = base.map(|c| (c + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0));
                PlacedShape { shape, class, color }
            })
            .collect()
    }
}

impl Dataset for SynthDataset {
    fn len(&self) -> usize {
        self.params.count
    }

    fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        if index >= self.params.count {
            return Err(Error::data(format!(
                "synthetic index {index} out of range for {} images",
                self.params.count
            )));
        }
        let n = self.params.size;
        let shapes = self.geometry(index);
        let mut rng = self.rng(index, 1);
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
        let (fx, fy) = (rng.random_range(0.1f32..0.6), rng.random_range(0.1f32..0.6));
        let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
        let plane = n * n;
        let mut image = vec![0f32; 3 * plane];
        let mut labels = vec![0u32; plane];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                match shapes.iter().rev().find(|s| s.shape.contains(px, py)) {
                    Some(s) => {
                        labels[i] = s.class;
                        for c in 0..3 {
                            image[c * plane + i] = s.color[c];
                        }
                    }
                    None => {
                        let stripe = 0.12 * (fx * x as f32 + fy * y as f32 + phase).sin();
                        for c in 0..3 {
                            let noise = rng.random_range(-0.06f32..0.06);
                            image[c * plane + i] = (base[c] + stripe + noise).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Ok(Sample {
            name: format!("synth_{index:05}"),
            height: n,
            width: n,
            image,
            labels,
        })
    }
}
