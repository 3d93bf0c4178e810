//! Treatment fine-tuning: loss composition, the training loop, evaluation and
//! the ablation grid.

mod ablate;
mod config;
mod eval;
mod run;

pub use ablate::{ablate, ablation_config, SeedResult, AblationRow, AblationTable, ABLATION_ROWS};
pub use config::{
    AblationConfig, DataSpec, OptimizerConfig, RunConfig, Schedule, SeedOverrides, Seeds, SynthSpec,
    TreatmentConfig,
};
pub use eval::{evaluate, load_model, EvalOptions, EvalReport, ValMetrics};
pub use run::{
    build_datasets, train, train_model, EpochRecord, LossComponents, RunManifest, RunSummary, METRICS_FILE,
    RUN_SCHEMA_VERSION,
};

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{log_softmax, scalar_f64};
use crate::types::{one_hot, LabelMap};

fn firewall(component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            component: component.to_string(),
            value,
        })
    }
}

/// `ce + alpha * sim + beta * sp`, refusing non-finite components.
pub fn total_loss(ce: f64, sim: f64, sp: f64, alpha: f64, beta: f64) -> Result<f64> {
    firewall("ce", ce)?;
    firewall("sim", sim)?;
    firewall("sp", sp)?;
    let total = ce + alpha * sim + beta * sp;
    firewall("total", total)?;
    Ok(total)
}

/// Pixel-mean cross-entropy of `(N, K, H, W)` logits over non-ignored pixels.
/// Returns the loss tensor and its value; 0 when every pixel is ignored.
pub fn cross_entropy(logits: &Tensor, labels: &LabelMap) -> Result<(Tensor, f64)> {
    let (n, k, h, w) = logits.dims4()?;
    if labels.dims() != (n, h, w) || labels.num_classes() != k {
        return Err(Error::validation(format!(
            "labels {:?} with {} classes do not match logits {:?}",
            labels.dims(),
            labels.num_classes(),
            logits.dims()
        )));
    }
    let (target, mask) = one_hot(labels, logits.dtype(), logits.device())?;
    let count = mask.count();
    if count == 0 {
        let zero = Tensor::zeros((), logits.dtype(), logits.device())?;
        return Ok((zero, 0.0));
    }
    let loss = (log_softmax(logits, 1)? * target.tensor())?
        .sum_all()?
        .affine(-1.0 / count as f64, 0.0)?;
    let value = scalar_f64(&loss)?;
    Ok((loss, value))
}
