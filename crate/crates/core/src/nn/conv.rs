//! 2-D convolution lowered to `im2col` + matrix multiply.
//!
//! The whole convolution is a single autograd node: both passes unfold the
//! input into columns and run the backend's GEMM, and the column buffers are
//! dropped as soon as the node is done with them.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, Var};

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

fn dims4(layout: &Layout, op: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    match layout.dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => candle_core::bail!("{op} expects a rank-4 input, got {other:?}"),
    }
}

/// Output columns `[ox_lo, ox_hi)` whose input column `ox * stride + kx - pad`
/// lies inside `0..w`.
fn valid_cols(g: Geometry, kx: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(ow);
    let hi = if w + g.pad > kx {
        ((w + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `(N, C, H, W)` image to `(C*k*k, N*OH*OW)` columns.
fn unfold<T: Copy + Default>(
    src: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    g: Geometry,
) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let l = oh * ow;
    let mut out = vec![T::default(); c * g.kernel * g.kernel * n * l];
    for ci in 0..c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let (lo, hi) = valid_cols(g, kx, w, ow);
                for b in 0..n {
                    let plane = &src[(b * c + ci) * h * w..][..h * w];
                    let dst = &mut out[(row * n + b) * l..][..l];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..][..w];
                        let dst_row = &mut dst[oy * ow..][..ow];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold`].
fn fold<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    g: Geometry,
) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let l = oh * ow;
    let mut out = vec![T::default(); n * c * h * w];
    for ci in 0..c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let (lo, hi) = valid_cols(g, kx, w, ow);
                for b in 0..n {
                    let plane = &mut out[(b * c + ci) * h * w..][..h * w];
                    let src = &cols[(row * n + b) * l..][..l];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..][..w];
                        let src_row = &src[oy * ow..][..ow];
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(N, C, H, W) -> (C*k*k, N*OH*OW)`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters columns back onto an `(N, C, H, W)` image.
struct Col2Im {
    geometry: Geometry,
    image: (usize, usize, usize, usize),
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(layout, "im2col")?;
        let (n, c, h, w) = dims;
        let g = self.0;
        if h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel {
            candle_core::bail!("im2col: kernel {} larger than padded input {h}x{w}", g.kernel);
        }
        let shape = Shape::from((c * g.kernel * g.kernel, n * g.out_len(h) * g.out_len(w)));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous_slice(v, layout, "im2col")?, dims, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous_slice(v, layout, "im2col")?, dims, g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let (n, c, h, w) = self.image;
        let expected = [c * g.kernel * g.kernel, n * g.out_len(h) * g.out_len(w)];
        if layout.dims() != expected {
            candle_core::bail!("col2im: got {:?}, expected {:?}", layout.dims(), expected);
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous_slice(v, layout, "col2im")?, self.image, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous_slice(v, layout, "col2im")?, self.image, g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(self.image)))
    }
}

/// Whole convolution `(x, weight) -> y` as one graph node, so the column
/// buffers never enter the autograd graph.
struct ConvOp(Geometry);

impl ConvOp {
    fn run(&self, x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let cout = weight.dim(0)?;
        let g = self.0;
        let cols = x.contiguous()?.apply_op1_no_bwd(&Im2Col(g))?;
        weight
            .reshape((cout, ()))?
            .matmul(&cols)?
            .reshape((cout, n, g.out_len(h) * g.out_len(w)))?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((n, cout, g.out_len(h), g.out_len(w)))
    }
}

fn tensor_of(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Tensor> {
    let dev = candle_core::Device::Cpu;
    match storage {
        CpuStorage::F32(v) => Tensor::from_slice(contiguous_slice(v, layout, "conv")?, layout.shape(), &dev),
        CpuStorage::F64(v) => Tensor::from_slice(contiguous_slice(v, layout, "conv")?, layout.shape(), &dev),
        other => candle_core::bail!("conv: unsupported dtype {:?}", other.dtype()),
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = self.run(&tensor_of(s1, l1)?, &tensor_of(s2, l2)?)?;
        let shape = y.shape().clone();
        let flat = y.flatten_all()?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(flat.to_vec1()?),
            _ => CpuStorage::F64(flat.to_vec1()?),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, weight, grad) = (x.detach(), weight.detach(), grad.detach());
        let (n, c, h, w) = x.dims4()?;
        let (_, cout, oh, ow) = grad.dims4()?;
        let g = self.0;
        let g2 = grad.transpose(0, 1)?.contiguous()?.reshape((cout, n * oh * ow))?;
        let cols = x.contiguous()?.apply_op1_no_bwd(&Im2Col(g))?;
        let dw = g2.matmul(&cols.t()?)?.reshape(weight.shape())?;
        let dcols = weight.reshape((cout, ()))?.t()?.matmul(&g2)?;
        let dx = dcols.apply_op1_no_bwd(&Col2Im {
            geometry: g,
            image: (n, c, h, w),
        })?;
        Ok((Some(dx), Some(dw)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    geometry: Geometry,
}

impl Conv2d {
    /// He-uniform weights; bias (when requested) starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            (out_channels, in_channels, kernel, kernel),
            bound,
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), out_channels, 0.0, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geometry: Geometry {
                kernel,
                stride,
                pad,
            },
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn param_count(&self) -> usize {
        let k = self.geometry.kernel;
        self.out_channels * self.in_channels * k * k + self.bias.as_ref().map_or(0, |_| self.out_channels)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(crate::Error::validation(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let g = self.geometry;
        if h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel {
            return Err(crate::Error::validation(format!(
                "conv kernel {} larger than padded input {h}x{w}",
                g.kernel
            )));
        }
        let mut out = x.contiguous()?.apply_op2(self.weight.as_tensor(), ConvOp(g))?;
        if let Some(b) = &self.bias {
            out = out.broadcast_add(&b.as_tensor().reshape((1, self.out_channels, 1, 1))?)?;
        }
        Ok(out)
    }
}
