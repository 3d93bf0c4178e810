//! The treatment fine-tuning loop and its on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataSpec, RunConfig, Schedule, Seeds};
use super::eval::{evaluate, EvalOptions, ValMetrics};
use super::{cross_entropy, firewall, total_loss};
use crate::category::{category_loss, compute_centroids, CentroidMemory};
use crate::data::{make_batch, Dataset, Sample, SynthDataset, VocDataset};
use crate::error::{Error, Result};
use crate::model::{
    attach, save_checkpoint, CheckpointManifest, HeadManifest, ReferenceUNet, SegmentationModel, TapRole, TapSpec,
    TappedModel, UNetConfig, ARCHITECTURE_NAME, CHECKPOINT_SCHEMA_VERSION,
};
use crate::nn::{CosineSchedule, ParamStore, Sgd};
use crate::superpixel::{boundary_loss, normalize_associations, SuperpixelGrid, SuperpixelHead};
use crate::types::{all_finite, downsample_labels};

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";

/// Epoch means of the loss components. `sim` and `sp` are absent when the
/// matching treatment is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub sim: Option<f64>,
    pub sp: Option<f64>,
    pub steps: usize,
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub train: LossComponents,
    pub val: ValMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub architecture: String,
    pub unet: UNetConfig,
    pub taps: Vec<TapSpec>,
    pub heads: Vec<HeadManifest>,
    pub model_params: usize,
    pub head_params: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub boundary_distance: String,
    pub metrics_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("a run has at least one epoch")
    }
}

/// Opens the configured training and validation splits.
pub fn build_datasets(cfg: &RunConfig) -> Result<(Box<dyn Dataset>, Box<dyn Dataset>)> {
    Ok(match &cfg.data {
        DataSpec::Synthetic(_) => (
            Box::new(SynthDataset::new(cfg.synth_params(false))?),
            Box::new(SynthDataset::new(cfg.synth_params(true))?),
        ),
        DataSpec::Voc {
            root,
            num_classes,
            train_split,
            val_split,
        } => (
            Box::new(VocDataset::open(root, train_split, *num_classes)?),
            Box::new(VocDataset::open(root, val_split, *num_classes)?),
        ),
    })
}

/// Trains a fresh reference UNet on the configured data.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_data, val_data) = build_datasets(cfg)?;
    let unet = UNetConfig::new(cfg.data.num_classes(), 3, cfg.seeds().init);
    let model = ReferenceUNet::new(unet, DType::F32, &Device::Cpu)?;
    train_model(cfg, model, train_data.as_ref(), val_data.as_ref())
}

fn resolve_taps<M: SegmentationModel>(model: &M, cfg: &RunConfig) -> Result<Vec<TapSpec>> {
    let layers = model.layers();
    let lookup = |tag: &str, role: TapRole| -> Result<TapSpec> {
        let l = layers.iter().find(|l| l.tag == tag).ok_or_else(|| {
            let names: Vec<&str> = layers.iter().map(|l| l.tag.as_str()).collect();
            Error::config(format!("unknown layer `{tag}`; the model exposes {}", names.join(", ")))
        })?;
        Ok(TapSpec {
            layer_tag: l.tag.clone(),
            role,
            expected_channels: l.channels,
            expected_stride: l.stride,
        })
    };
    let t = &cfg.treatment;
    let mut taps = vec![lookup(&t.deep_tap, TapRole::Deep)?];
    for tag in &t.shallow_taps {
        taps.push(lookup(tag, TapRole::Shallow)?);
    }
    Ok(taps)
}

fn head_seed(init: u64, index: usize) -> u64 {
    init ^ (0x6865_6164_0000_0000 | index as u64)
}

struct Head {
    tag: String,
    store: ParamStore,
    head: SuperpixelHead,
    seed: u64,
}

struct StepValues {
    total: f64,
    ce: f64,
    sim: Option<f64>,
    sp: Option<f64>,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: TappedModel<ReferenceUNet>,
    heads: Vec<Head>,
    memory: Option<CentroidMemory>,
    alpha: f64,
    beta: f64,
}

impl Trainer<'_> {
    fn step(&mut self, images: &Tensor, labels: &crate::types::LabelMap) -> Result<(Tensor, StepValues)> {
        let t = &self.cfg.treatment;
        let out = self.model.forward(images, true)?;
        let (ce_t, ce) = cross_entropy(&out.logits, labels)?;
        firewall("ce", ce)?;
        let mut loss = ce_t;
        let mut sim = None;
        if self.cfg.enable_category {
            let deep = &out.features[&self.model.deep_tap().layer_tag];
            let (_, _, h, w) = deep.dims4();
            let small = downsample_labels(labels, (h, w))?;
            let batch_centroids = compute_centroids(deep, &small)?;
            let centroids = match &mut self.memory {
                Some(m) => m.update(&batch_centroids),
                None => batch_centroids,
            };
            let r = category_loss(deep, &centroids, &small)?;
            firewall("sim", r.value)?;
            loss = (loss + r.loss.affine(self.alpha, 0.0)?)?;
            sim = Some(r.value);
        }
        let mut sp = None;
        if self.cfg.enable_boundary && !self.heads.is_empty() {
            let share = 1.0 / self.heads.len() as f64;
            let mut value = 0.0;
            for h in &self.heads {
                let logits = h.head.forward(&out.features[&h.tag], true)?;
                let (r, _, _) = boundary_loss(&logits, labels, t.normalization, t.m, t.s)?;
                firewall("sp", r.value)?;
                value += share * r.value;
                loss = (loss + r.loss.affine(self.beta * share, 0.0)?)?;
            }
            sp = Some(value);
        }
        let total = total_loss(ce, sim.unwrap_or(0.0), sp.unwrap_or(0.0), self.alpha, self.beta)?;
        Ok((loss, StepValues { total, ce, sim, sp }))
    }

    /// Refuses to continue once any parameter has left the finite range.
    fn check_params(&self) -> Result<()> {
        let stores = std::iter::once(self.model.model().params()).chain(self.heads.iter().map(|h| &h.store));
        for store in stores {
            for (name, p) in store.iter() {
                if !all_finite(p.var.as_tensor())? {
                    return Err(Error::Numeric {
                        component: format!("parameter `{name}`"),
                        value: f64::NAN,
                    });
                }
            }
        }
        Ok(())
    }

    fn trainable(&self) -> Vec<candle_core::Var> {
        let mut vars = self.model.model().params().trainable_vars();
        for h in &self.heads {
            vars.extend(h.store.trainable_vars());
        }
        vars
    }

    fn head_manifests(&self) -> Vec<HeadManifest> {
        self.heads
            .iter()
            .map(|h| HeadManifest {
                layer_tag: h.tag.clone(),
                in_channels: h.head.in_channels(),
                stride: h.head.stride(),
                seed: h.seed,
            })
            .collect()
    }

    fn save(&self, path: &Path, extra: BTreeMap<String, serde_json::Value>) -> Result<()> {
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            architecture: ARCHITECTURE_NAME.to_string(),
            unet: self.model.model().config().clone(),
            taps: self.model.taps().to_vec(),
            heads: self.head_manifests(),
            extra,
        };
        let heads: Vec<(&str, &ParamStore)> = self.heads.iter().map(|h| (h.tag.as_str(), &h.store)).collect();
        save_checkpoint(path, &manifest, self.model.model().params(), &heads)
    }

    /// Association maps of the first validation images under the trained heads.
    fn dump_associations(&self, val: &dyn Dataset, dir: &Path) -> Result<()> {
        if self.heads.is_empty() {
            return Ok(());
        }
        let first = val.sample(0)?.pad_to_multiple(ReferenceUNet::INPUT_MULTIPLE);
        let mut group = vec![first];
        for i in 1..val.len().min(self.cfg.treatment.optimizer.batch_size) {
            let s = val.sample(i)?.pad_to_multiple(ReferenceUNet::INPUT_MULTIPLE);
            if (s.height, s.width) != (group[0].height, group[0].width) {
                break;
            }
            group.push(s);
        }
        let params = self.model.model().params();
        let batch = make_batch(&group, self.model.model().num_classes(), params.dtype(), params.device())?;
        let out = self.model.forward(&batch.images, false)?;
        for h in &self.heads {
            let logits = h.head.forward(&out.features[&h.tag], false)?;
            let assoc = normalize_associations(&logits, self.cfg.treatment.normalization)?;
            let (_, _, ih, iw) = logits.dims4();
            let grid = SuperpixelGrid::new(self.cfg.treatment.s, ih, iw)?;
            assoc.save(&grid, &dir.join(format!("associations_{}.safetensors", h.tag)))?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(format!("encode {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Fine-tunes `model` with the treatments enabled in `cfg`, writing the
/// manifest, metrics file, checkpoints and summary to `cfg.output_dir`.
pub fn train_model(
    cfg: &RunConfig,
    model: ReferenceUNet,
    train_data: &dyn Dataset,
    val_data: &dyn Dataset,
) -> Result<RunSummary> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::data("training and validation splits must both be non-empty"));
    }
    let k = model.num_classes();
    if train_data.num_classes() != k || val_data.num_classes() != k {
        return Err(Error::data(format!(
            "datasets have {}/{} classes but the model predicts {k}",
            train_data.num_classes(),
            val_data.num_classes()
        )));
    }
    let seeds = cfg.seeds();
    let t = &cfg.treatment;
    let o = &t.optimizer;
    let taps = resolve_taps(&model, cfg)?;
    let model = attach(model, taps).map_err(|e| Error::config(e.to_string()))?;
    let (dtype, device) = (model.model().params().dtype(), model.model().params().device().clone());

    let mut heads = Vec::new();
    if cfg.enable_boundary {
        for (i, tap) in model.shallow_taps().enumerate() {
            let seed = head_seed(seeds.init, i);
            let mut store = ParamStore::new(dtype, device.clone(), seed);
            let head = SuperpixelHead::new(&mut store, "head", tap.expected_channels, tap.expected_stride)?;
            heads.push(Head {
                tag: tap.layer_tag.clone(),
                store,
                head,
                seed,
            });
        }
    }
    let memory = t.centroid_memory.map(CentroidMemory::new).transpose()?;
    let mut trainer = Trainer {
        cfg,
        model,
        heads,
        memory,
        alpha: cfg.alpha(),
        beta: cfg.beta(),
    };
    let mut sgd = Sgd::new(trainer.trainable(), o.momentum, o.weight_decay);
    let augment = cfg.augment();
    let steps_per_epoch = train_data.len().div_ceil(o.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = CosineSchedule {
        base_lr: o.lr,
        total_steps,
    };
    let lr_at = |step: usize| match o.schedule {
        Schedule::Cosine => schedule.lr(step),
        Schedule::Constant => o.lr,
    };

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = RunManifest {
        schema_version: RUN_SCHEMA_VERSION,
        config: cfg.clone(),
        seeds,
        architecture: ARCHITECTURE_NAME.to_string(),
        unet: trainer.model.model().config().clone(),
        taps: trainer.model.taps().to_vec(),
        heads: trainer.head_manifests(),
        model_params: trainer.model.model().params().trainable_count(),
        head_params: trainer.heads.iter().map(|h| h.head.param_count()).sum(),
        train_images: train_data.len(),
        val_images: val_data.len(),
        steps_per_epoch,
        total_steps,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        boundary_distance: "chebyshev".into(),
        metrics_file: METRICS_FILE.into(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let eval_options = EvalOptions {
        batch_size: o.batch_size,
        band: cfg.eval_band,
        keep_pixels: false,
    };
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let mut lr = lr_at(step);
        for chunk in epoch_order(seeds.order, epoch, train_data.len()).chunks(o.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| Ok(augment.apply(&train_data.sample(i)?, seeds.augment, epoch, i)))
                .collect::<Result<Vec<Sample>>>()?;
            let batch = make_batch(&samples, k, dtype, &device)?;
            lr = lr_at(step);
            let (loss, v) = trainer.step(&batch.images, &batch.labels)?;
            let grads = loss.backward()?;
            sgd.step(&grads, lr)?;
            trainer.check_params()?;
            step += 1;
            for (s, x) in sums.iter_mut().zip([v.total, v.ce, v.sim.unwrap_or(0.0), v.sp.unwrap_or(0.0)]) {
                *s += x;
            }
        }
        let mean = |x: f64| x / steps_per_epoch as f64;
        let val = evaluate(trainer.model.model(), val_data, &eval_options, dtype, &device)?.metrics;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            alpha: trainer.alpha,
            beta: trainer.beta,
            train: LossComponents {
                total: mean(sums[0]),
                ce: mean(sums[1]),
                sim: cfg.enable_category.then(|| mean(sums[2])),
                sp: cfg.enable_boundary.then(|| mean(sums[3])),
                steps: steps_per_epoch,
            },
            val,
        };
        log::info!(
            "epoch {}/{}: loss {:.4} (ce {:.4}) val mIoU {:.4} boundary-F {:.4}",
            record.epoch,
            cfg.epochs,
            record.train.total,
            record.train.ce,
            record.val.miou,
            record.val.boundary_f
        );
        let line = serde_json::to_string(&record).map_err(|e| Error::data(format!("encode metrics: {e}")))?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;

        let extra = BTreeMap::from([
            ("epoch".to_string(), serde_json::json!(record.epoch)),
            ("val_miou".to_string(), serde_json::json!(record.val.miou)),
        ]);
        let last = dir.join(LAST_CHECKPOINT);
        trainer.save(&last, extra)?;
        if best.map_or(true, |(_, m)| record.val.miou > m) {
            best = Some((record.epoch, record.val.miou));
            let best_path = dir.join(BEST_CHECKPOINT);
            fs::copy(&last, &best_path).map_err(|e| Error::io(&best_path, e))?;
        }
        records.push(record);
    }
    metrics.sync_all().map_err(|e| Error::io(&metrics_path, e))?;
    trainer.dump_associations(val_data, dir)?;

    let (best_epoch, best_miou) = best.expect("at least one epoch");
    let summary = RunSummary {
        output_dir: dir.clone(),
        best_epoch,
        best_miou,
        initial_loss: records[0].train.total,
        final_loss: records[records.len() - 1].train.total,
        epochs: records,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_orders_are_permutations_that_vary() {
        let a = epoch_order(5, 0, 20);
        let b = epoch_order(5, 1, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(5, 0, 20));
    }
}
