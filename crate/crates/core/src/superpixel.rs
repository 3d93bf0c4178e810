//! Regional-boundary treatment: a superpixel branch over shallow encoder
//! features.
//!
//! The image is tiled into `s x s` cells. Every pixel softly associates with
//! the 3x3 block of cells around the cell that owns it. Cell centres (pixel
//! coordinates and label vectors) are association-weighted means of the
//! pixels claiming them, and each pixel is then reconstructed from the
//! centres of its nine candidate cells. The loss compares the reconstructed
//! label vector with the pixel's one-hot label (cross-entropy) and the
//! reconstructed position with the true one (compactness).

use std::path::Path;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_norm_keepdim, scalar_f64, softmax, upsample_bilinear, Conv2d, ConvBnRelu, ParamStore};
use crate::types::{one_hot, FeatureMap, LabelMap};

/// Candidate cells per pixel.
pub const NEIGHBORS: usize = 9;
/// Hidden width of the three head stages.
pub const HEAD_HIDDEN: usize = 64;
/// Guard inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-8;
/// Cells (and pixel neighbourhoods) with less total weight than this are
/// treated as empty.
pub const MASS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizationMode {
    /// Softmax across the nine candidate cells.
    #[serde(rename = "softmax-9")]
    Softmax9,
    /// Element-wise sigmoid, then division by the nine-way sum.
    #[serde(rename = "sigmoid-renorm")]
    SigmoidRenorm,
}

/// The `s x s` sampling grid over an `H x W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuperpixelGrid {
    interval: usize,
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
}

impl SuperpixelGrid {
    /// A trailing partial row or column of cells covers what remains when
    /// `interval` does not divide the image.
    pub fn new(interval: usize, height: usize, width: usize) -> Result<Self> {
        if interval == 0 || height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "superpixel grid needs positive interval and size, got s={interval} on {height}x{width}"
            )));
        }
        Ok(Self {
            interval,
            height,
            width,
            grid_h: height.div_ceil(interval),
            grid_w: width.div_ceil(interval),
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Cell counts `(ceil(H/s), ceil(W/s))`.
    pub fn grid_hw(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell_of(&self, y: usize, x: usize) -> (usize, usize) {
        (y / self.interval, x / self.interval)
    }

    /// Flat cell indices of the 3x3 block around the owning cell, row-major
    /// over offsets `(-1..=1, -1..=1)`. Offsets past the border clamp onto the
    /// edge cell, so a border pixel lists some cells more than once.
    pub fn neighbors_of(&self, y: usize, x: usize) -> [usize; NEIGHBORS] {
        let (cy, cx) = self.cell_of(y, x);
        let mut out = [0; NEIGHBORS];
        for (j, slot) in out.iter_mut().enumerate() {
            let ny = (cy as isize + j as isize / 3 - 1).clamp(0, self.grid_h as isize - 1) as usize;
            let nx = (cx as isize + j as isize % 3 - 1).clamp(0, self.grid_w as isize - 1) as usize;
            *slot = ny * self.grid_w + nx;
        }
        out
    }

    /// Cell index for every `(neighbour slot, pixel)` pair, slot-major.
    pub fn slot_cells(&self) -> Vec<u32> {
        let plane = self.height * self.width;
        let mut out = vec![0u32; NEIGHBORS * plane];
        for y in 0..self.height {
            for x in 0..self.width {
                for (j, cell) in self.neighbors_of(y, x).into_iter().enumerate() {
                    out[j * plane + y * self.width + x] = cell as u32;
                }
            }
        }
        out
    }
}

/// Per-pixel weights over the nine candidate cells, `(N, 9, H, W)`.
#[derive(Debug, Clone)]
pub struct AssociationMap {
    weights: Tensor,
}

impl AssociationMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        let dims = weights.dims();
        if dims.len() != 4 || dims[1] != NEIGHBORS {
            return Err(Error::validation(format!(
                "association map must be (N, 9, H, W), got {:?}",
                dims
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Writes the weights and grid geometry to a safetensors file.
    pub fn save(&self, grid: &SuperpixelGrid, path: &Path) -> Result<()> {
        let (gh, gw) = grid.grid_hw();
        let meta = serde_json::json!({
            "interval": grid.interval(),
            "image_hw": grid.image_hw(),
            "grid_hw": [gh, gw],
            "neighbor_order": "row-major offsets (-1..=1, -1..=1), border-clamped",
        });
        crate::checkpoint::save_arrays(
            path,
            &[("associations".to_string(), self.weights.detach())],
            &[("grid".to_string(), meta.to_string())],
        )
    }
}

/// Turns raw association logits into normalised weights.
pub fn normalize_associations(logits: &FeatureMap, mode: NormalizationMode) -> Result<AssociationMap> {
    let (_, c, _, _) = logits.dims4();
    if c != NEIGHBORS {
        return Err(Error::validation(format!(
            "association logits need {NEIGHBORS} channels, `{}` has {c}",
            logits.layer_tag()
        )));
    }
    let x = logits.tensor();
    let weights = match mode {
        NormalizationMode::Softmax9 => softmax(x, 1)?,
        NormalizationMode::SigmoidRenorm => {
            let s = (x.clamp(-60.0, 60.0)?.neg()?.exp()? + 1.0)?.recip()?;
            let floor = Tensor::full(MASS_EPS, (), x.device())?.to_dtype(x.dtype())?;
            let total = s.sum_keepdim(1)?.broadcast_maximum(&floor)?;
            s.broadcast_div(&total)?
        }
    };
    AssociationMap::new(weights)
}

/// `(1, 2, H, W)` pixel coordinates, channel 0 = x (column), channel 1 = y (row).
pub fn coordinate_field(height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let plane = height * width;
    let mut v = vec![0f64; 2 * plane];
    for y in 0..height {
        for x in 0..width {
            v[y * width + x] = x as f64;
            v[plane + y * width + x] = y as f64;
        }
    }
    Ok(Tensor::from_vec(v, (1, 2, height, width), device)?.to_dtype(dtype)?)
}

/// Two-pass reconstruction of an arbitrary `(N, D, H, W)` pixel field.
///
/// Pass one computes each cell's centre as the association-weighted mean of
/// the pixels claiming it (optionally restricted by `pixel_mask`, shape
/// `(N, 1, H, W)`). Pass two rebuilds every pixel as the association-weighted
/// sum of its nine candidate centres. Cells with no claimed weight are
/// dropped and the pixel's remaining weights renormalised.
pub fn reconstruct_field(
    assoc: &AssociationMap,
    grid: &SuperpixelGrid,
    field: &Tensor,
    pixel_mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, _, h, w) = assoc.weights.dims4()?;
    let (fn_, d, fh, fw) = field.dims4()?;
    if (fh, fw) != (h, w) || grid.image_hw() != (h, w) || (fn_ != n && fn_ != 1) {
        return Err(Error::validation(format!(
            "field {:?} / grid {:?} do not match associations {:?}",
            field.dims(),
            grid.image_hw(),
            assoc.weights.dims()
        )));
    }
    let mask = match pixel_mask {
        Some(m) => {
            if m.dims() != [n, 1, h, w] {
                return Err(Error::validation(format!(
                    "pixel mask {:?} does not match associations {:?}",
                    m.dims(),
                    assoc.weights.dims()
                )));
            }
            Some(m.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        }
        None => None,
    };
    let op = ReconstructOp {
        slots: grid.slot_cells(),
        cells: grid.num_cells(),
        mask,
        dims: (n, d, h * w),
        field_batch: fn_,
    };
    let dtype = assoc.weights.dtype();
    let field = field.to_dtype(dtype)?.contiguous()?;
    Ok(assoc.weights.contiguous()?.apply_op2(&field, op)?)
}

/// Both reconstruction passes as one autograd node over `(weights, field)`.
struct ReconstructOp {
    slots: Vec<u32>,
    cells: usize,
    /// `(N, H*W)` claim mask; `None` lets every pixel claim.
    mask: Option<Vec<f64>>,
    /// `(N, D, H*W)`.
    dims: (usize, usize, usize),
    /// Batch size of the field, `N` or 1 (shared across the batch).
    field_batch: usize,
}

/// Intermediate quantities of one image's forward pass.
struct Passes {
    claim: Vec<f64>,
    mass: Vec<f64>,
    centers: Vec<f64>,
    occupied: Vec<bool>,
    /// Pixel weights with empty cells zeroed, slot-major.
    kept: Vec<f64>,
    total: Vec<f64>,
    out: Vec<f64>,
}

impl ReconstructOp {
    fn field_offset(&self, b: usize) -> usize {
        let (_, d, plane) = self.dims;
        if self.field_batch == 1 {
            0
        } else {
            b * d * plane
        }
    }

    fn passes(&self, b: usize, p: &[f64], field: &[f64]) -> Passes {
        let (_, d, plane) = self.dims;
        let p = &p[b * NEIGHBORS * plane..][..NEIGHBORS * plane];
        let f = &field[self.field_offset(b)..][..d * plane];
        let mut claim = p.to_vec();
        if let Some(mask) = &self.mask {
            let m = &mask[b * plane..][..plane];
            for (i, c) in claim.iter_mut().enumerate() {
                *c *= m[i % plane];
            }
        }
        let mut acc = vec![0.0; self.cells * d];
        let mut mass = vec![0.0; self.cells];
        for (i, &c) in claim.iter().enumerate() {
            let (cell, v) = (self.slots[i] as usize, i % plane);
            mass[cell] += c;
            for k in 0..d {
                acc[cell * d + k] += c * f[k * plane + v];
            }
        }
        let occupied: Vec<bool> = mass.iter().map(|&m| m > MASS_EPS).collect();
        let centers: Vec<f64> = acc
            .iter()
            .enumerate()
            .map(|(i, a)| a / mass[i / d].max(MASS_EPS))
            .collect();
        let kept: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, &w)| if occupied[self.slots[i] as usize] { w } else { 0.0 })
            .collect();
        let mut total = vec![0.0; plane];
        let mut out = vec![0.0; d * plane];
        for (i, &q) in kept.iter().enumerate() {
            let (cell, v) = (self.slots[i] as usize, i % plane);
            total[v] += q;
            for k in 0..d {
                out[k * plane + v] += q * centers[cell * d + k];
            }
        }
        for v in 0..plane {
            let t = total[v].max(MASS_EPS);
            for k in 0..d {
                out[k * plane + v] /= t;
            }
        }
        Passes {
            claim,
            mass,
            centers,
            occupied,
            kept,
            total,
            out,
        }
    }

    fn forward(&self, p: &[f64], field: &[f64]) -> Vec<f64> {
        let (n, d, plane) = self.dims;
        let mut out = Vec::with_capacity(n * d * plane);
        for b in 0..n {
            out.extend(self.passes(b, p, field).out);
        }
        out
    }

    fn backward(&self, p: &[f64], field: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, d, plane) = self.dims;
        let mut dp = vec![0.0; p.len()];
        let mut dfield = vec![0.0; field.len()];
        for b in 0..n {
            let pass = self.passes(b, p, field);
            let g = &grad[b * d * plane..][..d * plane];
            let f = &field[self.field_offset(b)..][..d * plane];
            // Pass two: out = sum_j kept * centre / total.
            let mut u = vec![0.0; d * plane];
            let mut dot = vec![0.0; plane];
            for v in 0..plane {
                let t = pass.total[v].max(MASS_EPS);
                let active = pass.total[v] > MASS_EPS;
                for k in 0..d {
                    u[k * plane + v] = g[k * plane + v] / t;
                    if active {
                        dot[v] += g[k * plane + v] * pass.out[k * plane + v] / t;
                    }
                }
            }
            let mut dcenters = vec![0.0; self.cells * d];
            let dpb = &mut dp[b * NEIGHBORS * plane..][..NEIGHBORS * plane];
            for (i, &q) in pass.kept.iter().enumerate() {
                let (cell, v) = (self.slots[i] as usize, i % plane);
                if !pass.occupied[cell] {
                    continue;
                }
                let mut dq = -dot[v];
                for k in 0..d {
                    dq += u[k * plane + v] * pass.centers[cell * d + k];
                    dcenters[cell * d + k] += q * u[k * plane + v];
                }
                dpb[i] += dq;
            }
            // Pass one: centre = acc / max(mass, eps).
            let mut dacc = vec![0.0; self.cells * d];
            let mut dmass = vec![0.0; self.cells];
            for cell in 0..self.cells {
                let m = pass.mass[cell].max(MASS_EPS);
                for k in 0..d {
                    dacc[cell * d + k] = dcenters[cell * d + k] / m;
                    if pass.mass[cell] > MASS_EPS {
                        dmass[cell] -= dcenters[cell * d + k] * pass.centers[cell * d + k] / m;
                    }
                }
            }
            let off = self.field_offset(b);
            for (i, &c) in pass.claim.iter().enumerate() {
                let (cell, v) = (self.slots[i] as usize, i % plane);
                let mut dclaim = dmass[cell];
                for k in 0..d {
                    dclaim += dacc[cell * d + k] * f[k * plane + v];
                    dfield[off + k * plane + v] += c * dacc[cell * d + k];
                }
                let m = self.mask.as_ref().map_or(1.0, |m| m[b * plane + v]);
                dpb[i] += dclaim * m;
            }
        }
        (dp, dfield)
    }
}

fn host_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let range = |l: &Layout| match l.contiguous_offsets() {
        Some(r) => Ok(r),
        None => Err(candle_core::Error::Msg("reconstruction expects contiguous inputs".into())),
    };
    let (a, b) = range(layout)?;
    Ok(match storage {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        other => candle_core::bail!("reconstruction: unsupported dtype {:?}", other.dtype()),
    })
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

impl CustomOp2 for ReconstructOp {
    fn name(&self) -> &'static str {
        "superpixel-reconstruct"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = self.forward(&host_f64(s1, l1)?, &host_f64(s2, l2)?);
        let (n, d, _) = self.dims;
        let dims = l1.dims();
        let shape = Shape::from((n, d, dims[2], dims[3]));
        Ok(match s1 {
            CpuStorage::F32(_) => (CpuStorage::F32(out.into_iter().map(|x| x as f32).collect()), shape),
            _ => (CpuStorage::F64(out), shape),
        })
    }

    fn bwd(
        &self,
        weights: &Tensor,
        field: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (dp, df) = self.backward(&tensor_f64(weights)?, &tensor_f64(field)?, &tensor_f64(grad)?);
        let dev = weights.device();
        let dp = Tensor::from_vec(dp, weights.shape(), dev)?.to_dtype(weights.dtype())?;
        let df = Tensor::from_vec(df, field.shape(), dev)?.to_dtype(field.dtype())?;
        Ok((Some(dp), Some(df)))
    }
}

/// Reconstructed pixel coordinates `v'` and label vectors `f'(v)`.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub coords: Tensor,
    pub features: Tensor,
}

/// Reconstructs coordinates (all pixels claim cells) and per-pixel features
/// (only pixels flagged in `valid` claim cells).
pub fn reconstruct(
    assoc: &AssociationMap,
    grid: &SuperpixelGrid,
    pixel_features: &Tensor,
    pixel_coords: &Tensor,
    valid: Option<&Tensor>,
) -> Result<Reconstruction> {
    Ok(Reconstruction {
        coords: reconstruct_field(assoc, grid, pixel_coords, None)?,
        features: reconstruct_field(assoc, grid, pixel_features, valid)?,
    })
}

#[derive(Debug, Clone)]
pub struct SuperpixelLossResult {
    /// Differentiable loss tensor.
    pub loss: Tensor,
    /// `ce_term + (m / s) * compactness_term`.
    pub value: f64,
    pub ce_term: f64,
    pub compactness_term: f64,
    pub reconstruction: Reconstruction,
}

/// Label cross-entropy of the reconstruction plus `(m / s)`-weighted mean
/// displacement, both averaged over valid pixels.
///
/// `target` is the one-hot field `(N, K, H, W)`, `coords` the true pixel
/// coordinates (broadcastable to `(N, 2, H, W)`), `valid` an `(N, 1, H, W)`
/// 0/1 mask.
pub fn superpixel_loss(
    target: &Tensor,
    reconstruction: Reconstruction,
    coords: &Tensor,
    m: f64,
    s: usize,
    valid: &Tensor,
) -> Result<SuperpixelLossResult> {
    if s == 0 {
        return Err(Error::validation("superpixel interval must be positive"));
    }
    let dtype = reconstruction.features.dtype();
    let valid = valid.to_dtype(dtype)?;
    let count = scalar_f64(&valid.sum_all()?)?;
    let dev = valid.device().clone();
    if count == 0.0 {
        let zero = Tensor::zeros((), dtype, &dev)?;
        return Ok(SuperpixelLossResult {
            loss: zero,
            value: 0.0,
            ce_term: 0.0,
            compactness_term: 0.0,
            reconstruction,
        });
    }
    let target = target.to_dtype(dtype)?;
    let log_rec = (&reconstruction.features + LOG_EPS)?.log()?;
    let ce = (target * log_rec)?
        .sum_keepdim(1)?
        .neg()?
        .mul(&valid)?
        .sum_all()?
        .affine(1.0 / count, 0.0)?;
    let displacement = coords.to_dtype(dtype)?.broadcast_sub(&reconstruction.coords)?;
    let compact = l2_norm_keepdim(&displacement, 1)?
        .mul(&valid)?
        .sum_all()?
        .affine(1.0 / count, 0.0)?;
    let weight = m / s as f64;
    let loss = (&ce + compact.affine(weight, 0.0)?)?;
    let ce_term = scalar_f64(&ce)?;
    let compactness_term = scalar_f64(&compact)?;
    Ok(SuperpixelLossResult {
        loss,
        value: ce_term + weight * compactness_term,
        ce_term,
        compactness_term,
        reconstruction,
    })
}

/// Normalises head logits, reconstructs against the one-hot labels and
/// evaluates the superpixel loss. `labels` must match the logits' spatial size.
pub fn boundary_loss(
    logits: &FeatureMap,
    labels: &LabelMap,
    mode: NormalizationMode,
    m: f64,
    s: usize,
) -> Result<(SuperpixelLossResult, AssociationMap, SuperpixelGrid)> {
    let (n, _, h, w) = logits.dims4();
    if labels.dims() != (n, h, w) {
        return Err(Error::validation(format!(
            "labels {:?} do not match association logits {:?}",
            labels.dims(),
            (n, h, w)
        )));
    }
    let assoc = normalize_associations(logits, mode)?;
    let grid = SuperpixelGrid::new(s, h, w)?;
    let dtype = logits.tensor().dtype();
    let dev = logits.tensor().device();
    let (target, mask) = one_hot(labels, dtype, dev)?;
    let valid = mask.to_tensor(dtype, dev)?;
    let coords = coordinate_field(h, w, dtype, dev)?;
    let rec = reconstruct(&assoc, &grid, target.tensor(), &coords, Some(&valid))?;
    let result = superpixel_loss(target.tensor(), rec, &coords, m, s, &valid)?;
    Ok((result, assoc, grid))
}

/// Auxiliary head: three conv-bn-relu stages at the shallow feature's
/// resolution, a 1x1 projection to nine association logits, and bilinear
/// upsampling to the input resolution.
#[derive(Debug, Clone)]
pub struct SuperpixelHead {
    stages: Vec<ConvBnRelu>,
    project: Conv2d,
    in_channels: usize,
    stride: usize,
}

/// Parameter count of a head, from the layer arithmetic alone.
pub fn head_param_count(in_channels: usize, kernel: usize) -> usize {
    let k2 = kernel * kernel;
    let stage = |cin: usize| cin * HEAD_HIDDEN * k2 + 2 * HEAD_HIDDEN;
    stage(in_channels) + 2 * stage(HEAD_HIDDEN) + HEAD_HIDDEN * NEIGHBORS + NEIGHBORS
}

impl SuperpixelHead {
    pub const KERNEL: usize = 3;

    /// `stride` is the shallow feature's downsampling factor relative to the
    /// input image.
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, stride: usize) -> Result<Self> {
        if in_channels == 0 || stride == 0 {
            return Err(Error::validation("superpixel head needs positive channels and stride"));
        }
        let mut stages = Vec::with_capacity(3);
        let mut cin = in_channels;
        for i in 0..3 {
            stages.push(ConvBnRelu::new(
                store,
                &format!("{name}.stage{i}"),
                cin,
                HEAD_HIDDEN,
                Self::KERNEL,
                1,
            )?);
            cin = HEAD_HIDDEN;
        }
        let project = Conv2d::new(store, &format!("{name}.project"), HEAD_HIDDEN, NEIGHBORS, 1, 1, 0, true)?;
        Ok(Self {
            stages,
            project,
            in_channels,
            stride,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(ConvBnRelu::param_count).sum::<usize>() + self.project.param_count()
    }

    /// Association logits at `stride` times the shallow resolution.
    pub fn forward(&self, shallow: &FeatureMap, train: bool) -> Result<FeatureMap> {
        let (_, c, h, w) = shallow.dims4();
        if c != self.in_channels {
            return Err(Error::validation(format!(
                "superpixel head expects {} channels, `{}` has {c}",
                self.in_channels,
                shallow.layer_tag()
            )));
        }
        let mut x = shallow.tensor().clone();
        for stage in &self.stages {
            x = stage.forward(&x, train)?;
        }
        // The projection is 1x1 and interpolation rows sum to one, so projecting
        // before upsampling gives the same logits at a fraction of the cost.
        let logits = upsample_bilinear(&self.project.forward(&x)?, h * self.stride, w * self.stride)?;
        FeatureMap::new(logits, format!("{}.associations", shallow.layer_tag()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE_INDEX;

    fn dev() -> Device {
        Device::Cpu
    }

    fn to_vec(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = SuperpixelGrid::new(3, 7, 6).unwrap();
        assert_eq!(g.grid_hw(), (3, 2));
        assert_eq!(g.cell_of(6, 5), (2, 1));
        // Top-left pixel: the upper and left offsets clamp onto row/col 0.
        assert_eq!(g.neighbors_of(0, 0), [0, 0, 1, 0, 0, 1, 2, 2, 3]);
        assert!(SuperpixelGrid::new(0, 4, 4).is_err());
    }

    #[test]
    fn cells_partition_pixels() {
        let g = SuperpixelGrid::new(4, 10, 9).unwrap();
        let mut owned = vec![0usize; g.num_cells()];
        for y in 0..10 {
            for x in 0..9 {
                let (cy, cx) = g.cell_of(y, x);
                owned[cy * g.grid_hw().1 + cx] += 1;
            }
        }
        assert_eq!(owned.iter().sum::<usize>(), 90);
        assert!(owned.iter().all(|&c| c > 0));
    }

    #[test]
    fn equal_logits_are_uniform() {
        let logits = FeatureMap::new(Tensor::zeros((1, 9, 2, 3), DType::F64, &dev()).unwrap(), "l").unwrap();
        for mode in [NormalizationMode::Softmax9, NormalizationMode::SigmoidRenorm] {
            let a = normalize_associations(&logits, mode).unwrap();
            assert!(to_vec(a.weights()).iter().all(|w| (w - 1.0 / 9.0).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_saturates() {
        let mut v = vec![0f64; 9];
        v[4] = 1e4;
        let logits = FeatureMap::new(Tensor::from_vec(v, (1, 9, 1, 1), &dev()).unwrap(), "l").unwrap();
        let a = normalize_associations(&logits, NormalizationMode::Softmax9).unwrap();
        let w = to_vec(a.weights());
        assert!((w[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let logits = FeatureMap::new(Tensor::zeros((1, 8, 2, 2), DType::F32, &dev()).unwrap(), "l").unwrap();
        assert!(normalize_associations(&logits, NormalizationMode::Softmax9).is_err());
    }

    #[test]
    fn single_cell_reconstructs_mean_coordinate() {
        let grid = SuperpixelGrid::new(2, 2, 2).unwrap();
        // Only one cell exists; every slot clamps onto it, so any normalised
        // weights put all mass there.
        let assoc = AssociationMap::new(Tensor::full(1.0 / 9.0, (1, 9, 2, 2), &dev()).unwrap()).unwrap();
        let coords = coordinate_field(2, 2, DType::F64, &dev()).unwrap();
        let v = to_vec(&reconstruct_field(&assoc, &grid, &coords, None).unwrap());
        assert!(v.iter().all(|x| (x - 0.5).abs() < 1e-12), "{v:?}");
    }

    #[test]
    fn uniform_class_reconstructs_exactly() {
        let labels = LabelMap::new(vec![0; 36], (1, 6, 6), 3, IGNORE_INDEX).unwrap();
        let logits = FeatureMap::new(Tensor::randn(0f64, 1.0, (1, 9, 6, 6), &dev()).unwrap(), "l").unwrap();
        let (res, _, _) = boundary_loss(&logits, &labels, NormalizationMode::Softmax9, 0.0, 3).unwrap();
        let f = to_vec(&res.reconstruction.features);
        for p in 0..36 {
            assert!((f[p] - 1.0).abs() < 1e-12);
            assert!(f[36 + p].abs() < 1e-12 && f[72 + p].abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let f = Tensor::from_vec(vec![1f64, 0.0], (1, 2, 1, 1), &dev()).unwrap();
        let v = Tensor::from_vec(vec![3f64, 4.0], (1, 2, 1, 1), &dev()).unwrap();
        let valid = Tensor::ones((1, 1, 1, 1), DType::F64, &dev()).unwrap();
        let rec = Reconstruction {
            coords: v.clone(),
            features: f.clone(),
        };
        let r = superpixel_loss(&f, rec, &v, 0.003, 3, &valid).unwrap();
        assert!(r.value.abs() < 1e-7);
    }

    #[test]
    fn half_split_cross_entropy_is_ln2() {
        let f = Tensor::from_vec(vec![1f64, 0.0], (1, 2, 1, 1), &dev()).unwrap();
        let rec_f = Tensor::from_vec(vec![0.5f64, 0.5], (1, 2, 1, 1), &dev()).unwrap();
        let v = Tensor::zeros((1, 2, 1, 1), DType::F64, &dev()).unwrap();
        let valid = Tensor::ones((1, 1, 1, 1), DType::F64, &dev()).unwrap();
        let rec = Reconstruction {
            coords: v.clone(),
            features: rec_f,
        };
        let r = superpixel_loss(&f, rec, &v, 0.003, 3, &valid).unwrap();
        assert!((r.ce_term - std::f64::consts::LN_2).abs() < 1e-7);
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn corner_displacement_term() {
        let f = Tensor::from_vec(vec![1f64, 0.0], (1, 2, 1, 1), &dev()).unwrap();
        let v = Tensor::zeros((1, 2, 1, 1), DType::F64, &dev()).unwrap();
        let v_rec = Tensor::from_vec(vec![0.5f64, 0.5], (1, 2, 1, 1), &dev()).unwrap();
        let valid = Tensor::ones((1, 1, 1, 1), DType::F64, &dev()).unwrap();
        let rec = Reconstruction {
            coords: v_rec,
            features: f.clone(),
        };
        let r = superpixel_loss(&f, rec, &v, 0.003, 3, &valid).unwrap();
        // 0.003 / 3 * sqrt(0.5), plus the log guard's -ln(1 + 1e-8).
        assert!((r.value - 7.0710678e-4).abs() < 1e-7, "{}", r.value);
        assert_eq!(r.value, r.ce_term + 0.001 * r.compactness_term);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let labels = LabelMap::new(vec![IGNORE_INDEX; 4], (1, 2, 2), 2, IGNORE_INDEX).unwrap();
        let logits = FeatureMap::new(Tensor::zeros((1, 9, 2, 2), DType::F64, &dev()).unwrap(), "l").unwrap();
        let (res, _, _) = boundary_loss(&logits, &labels, NormalizationMode::Softmax9, 0.003, 2).unwrap();
        assert_eq!(res.value, 0.0);
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        let (n, d, h, w) = (2, 3, 5, 6);
        let grid = SuperpixelGrid::new(2, h, w).unwrap();
        let p0 = softmax(&Tensor::randn(0f64, 1.0, (n, 9, h, w), &dev()).unwrap(), 1).unwrap();
        let f0 = Tensor::randn(0f64, 1.0, (n, d, h, w), &dev()).unwrap();
        let mask = Tensor::from_vec(
            (0..n * h * w).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect::<Vec<f64>>(),
            (n, 1, h, w),
            &dev(),
        )
        .unwrap();
        let wts = Tensor::randn(0f64, 1.0, (n, d, h, w), &dev()).unwrap();
        let loss = |p: &Tensor, f: &Tensor| {
            let assoc = AssociationMap::new(p.clone()).unwrap();
            reconstruct_field(&assoc, &grid, f, Some(&mask)).unwrap().mul(&wts).unwrap().sum_all().unwrap()
        };
        let pv = candle_core::Var::from_tensor(&p0).unwrap();
        let fv = candle_core::Var::from_tensor(&f0).unwrap();
        let grads = loss(pv.as_tensor(), fv.as_tensor()).backward().unwrap();
        let step = 1e-6;
        for (which, base, g) in [
            (0, &p0, grads.get(pv.as_tensor()).unwrap()),
            (1, &f0, grads.get(fv.as_tensor()).unwrap()),
        ] {
            let analytic = to_vec(g);
            let flat = to_vec(base);
            for i in (0..flat.len()).step_by(3) {
                let eval = |delta: f64| {
                    let mut v = flat.clone();
                    v[i] += delta;
                    let t = Tensor::from_vec(v, base.dims(), &dev()).unwrap();
                    let l = if which == 0 { loss(&t, &f0) } else { loss(&p0, &t) };
                    l.to_scalar::<f64>().unwrap()
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                assert!(
                    (fd - analytic[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {which} [{i}]: fd {fd} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn head_output_shape_and_param_count() {
        let mut store = ParamStore::new(DType::F32, dev(), 0);
        let head = SuperpixelHead::new(&mut store, "head", 64, 4).unwrap();
        let x = FeatureMap::new(Tensor::randn(0f32, 1.0, (2, 64, 32, 32), &dev()).unwrap(), "enc1").unwrap();
        let logits = head.forward(&x, true).unwrap();
        assert_eq!(logits.dims4(), (2, 9, 128, 128));
        assert_eq!(head.param_count(), head_param_count(64, 3));
        assert_eq!(store.trainable_count(), head_param_count(64, 3));
    }

    #[test]
    fn head_param_count_small_input() {
        let mut store = ParamStore::new(DType::F32, dev(), 0);
        let head = SuperpixelHead::new(&mut store, "head", 3, 2).unwrap();
        // 3*64*9 + 128 + 2 * (64*64*9 + 128) + 64*9 + 9
        let by_hand = 1728 + 128 + 2 * (36864 + 128) + 576 + 9;
        assert_eq!(head.param_count(), by_hand);
        assert_eq!(store.trainable_count(), by_hand);
    }

    #[test]
    fn head_init_is_seeded() {
        let build = |seed| {
            let mut store = ParamStore::new(DType::F32, dev(), seed);
            SuperpixelHead::new(&mut store, "head", 16, 2).unwrap();
            store
                .iter()
                .map(|(_, p)| p.var.flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }
}
