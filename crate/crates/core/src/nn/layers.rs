use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, Var, WithDType};

use super::conv::Conv2d;
use super::params::ParamStore;
use crate::error::Result;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch normalisation over `(N, H, W)` with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), channels, 1.0, true)?,
            beta: store.constant(&format!("{name}.bias"), channels, 0.0, true)?,
            running_mean: store.constant(&format!("{name}.running_mean"), channels, 0.0, false)?,
            running_var: store.constant(&format!("{name}.running_var"), channels, 1.0, false)?,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(crate::Error::validation(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let x = x.contiguous()?;
        let (mean, var) = if train {
            let (mean, var) = channel_moments(&x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?, (n, c, h * w));
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let dtype = self.running_mean.dtype();
            let dev = x.device();
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (Tensor::new(mean.as_slice(), dev)?.to_dtype(dtype)? * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (Tensor::new(var.as_slice(), dev)?.to_dtype(dtype)? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
                self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
            )
        };
        let op = BatchNormOp {
            mean,
            inv_std: var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
            batch_stats: train,
        };
        Ok(x.apply_op3(self.gamma.as_tensor(), self.beta.as_tensor(), op)?)
    }
}

/// Per-channel mean and biased variance of an `(N, C, L)` buffer.
fn channel_moments(x: &[f64], (n, c, l): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let count = (n * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * l..][..l].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut q = 0.0;
        for b in 0..n {
            q += x[(b * c + ch) * l..][..l].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / count;
    }
    (mean, var)
}

/// `y = (x - mean) * inv_std * gamma + beta` with fixed per-channel
/// statistics. With `batch_stats` the statistics are treated as functions of
/// `x` in the backward pass.
struct BatchNormOp {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

fn host_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_dtype(T::DTYPE)?.to_vec1::<T>()
}

impl BatchNormOp {
    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], (n, c, l): (usize, usize, usize)) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = self.inv_std[ch] * gamma[ch].to_f64();
                let shift = beta[ch].to_f64() - self.mean[ch] * scale;
                let off = (b * c + ch) * l;
                for (o, v) in out[off..off + l].iter_mut().zip(&x[off..off + l]) {
                    *o = T::from_f64(v.to_f64() * scale + shift);
                }
            }
        }
        out
    }

    fn backward<T: WithDType>(
        &self,
        x: &[T],
        gamma: &[T],
        grad: &[T],
        (n, c, l): (usize, usize, usize),
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let count = (n * l) as f64;
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, is) = (self.mean[ch], self.inv_std[ch]);
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                let off = (b * c + ch) * l;
                for (g, v) in grad[off..off + l].iter().zip(&x[off..off + l]) {
                    let g = g.to_f64();
                    sg += g;
                    sgx += g * (v.to_f64() - mu) * is;
                }
            }
            dgamma[ch] = T::from_f64(sgx);
            dbeta[ch] = T::from_f64(sg);
            let gm = gamma[ch].to_f64() * is;
            let (mg, mgx) = (sg / count, sgx / count);
            for b in 0..n {
                let off = (b * c + ch) * l;
                for ((d, g), v) in dx[off..off + l].iter_mut().zip(&grad[off..off + l]).zip(&x[off..off + l]) {
                    let g = g.to_f64();
                    *d = T::from_f64(if self.batch_stats {
                        let xhat = (v.to_f64() - mu) * is;
                        gm * (g - mg - xhat * mgx)
                    } else {
                        gm * g
                    });
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

fn ncl(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    match layout.dims() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        other => candle_core::bail!("batch norm expects a rank-4 input, got {other:?}"),
    }
}

fn slice_of<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("batch norm expects contiguous inputs"),
    }
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = ncl(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                slice_of(x, l1)?,
                slice_of(g, l2)?,
                slice_of(b, l3)?,
                dims,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                slice_of(x, l1)?,
                slice_of(g, l2)?,
                slice_of(b, l3)?,
                dims,
            )),
            _ => candle_core::bail!("batch norm: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let dims = (n, c, h * w);
        let dev = x.device();
        let (dx, dg, db) = match x.dtype() {
            DType::F64 => {
                let (a, b, c2) = self.backward::<f64>(&host_vec(x)?, &host_vec(gamma)?, &host_vec(grad)?, dims);
                (
                    Tensor::from_vec(a, x.shape(), dev)?,
                    Tensor::from_vec(b, c, dev)?,
                    Tensor::from_vec(c2, c, dev)?,
                )
            }
            _ => {
                let (a, b, c2) = self.backward::<f32>(&host_vec(x)?, &host_vec(gamma)?, &host_vec(grad)?, dims);
                (
                    Tensor::from_vec(a, x.shape(), dev)?.to_dtype(x.dtype())?,
                    Tensor::from_vec(b, c, dev)?.to_dtype(x.dtype())?,
                    Tensor::from_vec(c2, c, dev)?.to_dtype(x.dtype())?,
                )
            }
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                kernel / 2,
                false,
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Row-major `(out_len, in_len)` linear-interpolation matrix, half-pixel
/// centres (`align_corners = false`).
fn interp_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[i * in_len + lo] += 1.0 - frac;
        m[i * in_len + hi] += frac;
    }
    m
}

/// Bilinear resize of an `(N, C, H, W)` tensor, expressed as two matrix
/// products so it stays differentiable.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let uw = Tensor::from_vec(interp_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let uh = Tensor::from_vec(interp_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rows = x.contiguous()?.broadcast_matmul(&uw)?;
    Ok(uh.broadcast_matmul(&rows)?)
}

/// Numerically stable log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Floor applied under square roots so the derivative stays finite at zero.
pub const SQRT_FLOOR: f64 = 1e-30;

/// Euclidean norm along `dim` (dimension kept). The squared norm is floored
/// before the square root; below the floor the gradient is zero.
pub fn l2_norm_keepdim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let sq = x.sqr()?.sum_keepdim(dim)?;
    let floor = Tensor::full(SQRT_FLOOR, (), x.device())?.to_dtype(x.dtype())?;
    Ok(sq.broadcast_maximum(&floor)?.sqrt()?)
}

/// Scalar tensor value as `f64`.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
