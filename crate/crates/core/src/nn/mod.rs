//! Minimal network building blocks on top of candle tensors.

mod conv;
mod layers;
mod optim;
mod params;

pub use conv::Conv2d;
pub use layers::{
    l2_norm_keepdim, log_softmax, scalar_f64, softmax, upsample_bilinear, BatchNorm2d, ConvBnRelu,
    SQRT_FLOOR,
};
pub use optim::{CosineSchedule, Sgd};
pub use params::{Param, ParamStore};
