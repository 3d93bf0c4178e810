//! Feature taps on encoder-decoder segmentation models and the reference UNet.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_arrays, save_arrays};
use crate::error::{Error, Result};
use crate::nn::{upsample_bilinear, Conv2d, ConvBnRelu, ParamStore};
use crate::types::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapRole {
    /// Last encoder stage; receives the category treatment.
    Deep,
    /// Early encoder stage; feeds a superpixel head.
    Shallow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub layer_tag: String,
    pub role: TapRole,
    pub expected_channels: usize,
    pub expected_stride: usize,
}

/// A named internal layer a model can expose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub tag: String,
    pub channels: usize,
    /// Downsampling factor relative to the input image.
    pub stride: usize,
}

/// What a model must provide to be treated.
pub trait SegmentationModel {
    fn num_classes(&self) -> usize;

    fn in_channels(&self) -> usize;

    /// Every layer whose activation can be captured.
    fn layers(&self) -> Vec<LayerInfo>;

    /// Logits `(N, K, H, W)` plus the activations of the layers named in
    /// `capture`.
    fn forward_capture(&self, x: &Tensor, train: bool, capture: &[&str]) -> Result<(Tensor, BTreeMap<String, Tensor>)>;

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_capture(x, train, &[])?.0)
    }

    /// Parameters and buffers, for optimisation and checkpointing.
    fn params(&self) -> &ParamStore;
}

/// Output of a tapped forward pass.
#[derive(Debug, Clone)]
pub struct TappedOutput {
    pub logits: Tensor,
    pub features: BTreeMap<String, FeatureMap>,
}

/// A model with validated feature taps.
#[derive(Debug)]
pub struct TappedModel<M> {
    model: M,
    taps: Vec<TapSpec>,
}

/// Validates `taps` against the model's layers and wraps it.
pub fn attach<M: SegmentationModel>(model: M, taps: Vec<TapSpec>) -> Result<TappedModel<M>> {
    let deep = taps.iter().filter(|t| t.role == TapRole::Deep).count();
    if deep != 1 {
        return Err(Error::validation(format!("exactly one deep tap required, got {deep}")));
    }
    if !taps.iter().any(|t| t.role == TapRole::Shallow) {
        return Err(Error::validation("at least one shallow tap required"));
    }
    let layers = model.layers();
    let available = || layers.iter().map(|l| l.tag.as_str()).collect::<Vec<_>>().join(", ");
    for (i, tap) in taps.iter().enumerate() {
        if taps[..i].iter().any(|t| t.layer_tag == tap.layer_tag) {
            return Err(Error::validation(format!("layer `{}` tapped twice", tap.layer_tag)));
        }
        let layer = layers.iter().find(|l| l.tag == tap.layer_tag).ok_or_else(|| {
            Error::validation(format!(
                "unknown layer `{}`; available: {}",
                tap.layer_tag,
                available()
            ))
        })?;
        if layer.channels != tap.expected_channels || layer.stride != tap.expected_stride {
            return Err(Error::validation(format!(
                "tap `{}` expects {} channels at stride {}, layer has {} at stride {}",
                tap.layer_tag, tap.expected_channels, tap.expected_stride, layer.channels, layer.stride
            )));
        }
    }
    Ok(TappedModel { model, taps })
}

impl<M: SegmentationModel> TappedModel<M> {
    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn taps(&self) -> &[TapSpec] {
        &self.taps
    }

    pub fn deep_tap(&self) -> &TapSpec {
        self.taps.iter().find(|t| t.role == TapRole::Deep).expect("validated at attach")
    }

    pub fn shallow_taps(&self) -> impl Iterator<Item = &TapSpec> {
        self.taps.iter().filter(|t| t.role == TapRole::Shallow)
    }

    /// Forward pass returning logits and one feature map per tap. Each
    /// captured shape is checked against its spec.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<TappedOutput> {
        let (n, _, h, w) = x.dims4()?;
        let tags: Vec<&str> = self.taps.iter().map(|t| t.layer_tag.as_str()).collect();
        let (logits, mut captured) = self.model.forward_capture(x, train, &tags)?;
        let mut features = BTreeMap::new();
        for tap in &self.taps {
            let t = captured
                .remove(&tap.layer_tag)
                .ok_or_else(|| Error::validation(format!("model did not capture `{}`", tap.layer_tag)))?;
            let expected = [n, tap.expected_channels, h / tap.expected_stride, w / tap.expected_stride];
            if t.dims() != expected {
                return Err(Error::validation(format!(
                    "tap `{}` captured {:?}, spec implies {:?}",
                    tap.layer_tag,
                    t.dims(),
                    expected
                )));
            }
            features.insert(tap.layer_tag.clone(), FeatureMap::new(t, tap.layer_tag.clone())?);
        }
        Ok(TappedOutput { logits, features })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl UNetConfig {
    pub fn new(num_classes: usize, in_channels: usize, seed: u64) -> Self {
        Self {
            num_classes,
            in_channels,
            widths: ReferenceUNet::WIDTHS.to_vec(),
            seed,
        }
    }
}

/// Small four-stage UNet.
///
/// Each encoder stage halves the resolution (stride-2 conv, then a stride-1
/// conv), so stage `l` runs at stride `2^l`. Decoder stage `i` upsamples the
/// previous decoder output, concatenates the matching encoder output in front
/// of it and applies two conv stages. A 1x1 classifier at stride 2 is
/// upsampled to the input resolution.
#[derive(Debug)]
pub struct ReferenceUNet {
    config: UNetConfig,
    store: ParamStore,
    encoder: Vec<[ConvBnRelu; 2]>,
    decoder: Vec<[ConvBnRelu; 2]>,
    classifier: Conv2d,
}

impl ReferenceUNet {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];
    /// Input sides must be multiples of this.
    pub const INPUT_MULTIPLE: usize = 16;

    pub fn new(config: UNetConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::config(format!(
                "reference UNet needs at least 2 classes, got {}",
                config.num_classes
            )));
        }
        if config.widths.len() != 4 || config.in_channels == 0 || config.widths.contains(&0) {
            return Err(Error::config(format!(
                "reference UNet needs 4 positive widths and input channels, got {:?} / {}",
                config.widths, config.in_channels
            )));
        }
        let mut store = ParamStore::new(dtype, device.clone(), config.seed);
        let w = &config.widths;
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (l, &width) in w.iter().enumerate() {
            let name = format!("enc{}", l + 1);
            encoder.push([
                ConvBnRelu::new(&mut store, &format!("{name}.0"), cin, width, 3, 2)?,
                ConvBnRelu::new(&mut store, &format!("{name}.1"), width, width, 3, 1)?,
            ]);
            cin = width;
        }
        let mut decoder = Vec::new();
        for i in 1..w.len() {
            let name = format!("dec{i}");
            let skip = w[w.len() - 1 - i];
            let below = w[w.len() - i];
            decoder.push([
                ConvBnRelu::new(&mut store, &format!("{name}.0"), skip + below, skip, 3, 1)?,
                ConvBnRelu::new(&mut store, &format!("{name}.1"), skip, skip, 3, 1)?,
            ]);
        }
        let classifier = Conv2d::new(&mut store, "classifier", w[0], config.num_classes, 1, 1, 0, true)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            classifier,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Default taps: deep on the last encoder stage, shallow on the first.
    pub fn default_taps(&self) -> Vec<TapSpec> {
        let w = &self.config.widths;
        vec![
            TapSpec {
                layer_tag: "enc4".into(),
                role: TapRole::Deep,
                expected_channels: w[3],
                expected_stride: 16,
            },
            TapSpec {
                layer_tag: "enc1".into(),
                role: TapRole::Shallow,
                expected_channels: w[0],
                expected_stride: 2,
            },
        ]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::validation(format!(
                "UNet expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = Self::INPUT_MULTIPLE;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "input {h}x{w} is not a multiple of {m}; pad to {}x{}",
                h.div_ceil(m).max(1) * m,
                w.div_ceil(m).max(1) * m
            )));
        }
        Ok(())
    }
}

impl SegmentationModel for ReferenceUNet {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn layers(&self) -> Vec<LayerInfo> {
        let w = &self.config.widths;
        let mut out: Vec<LayerInfo> = (0..4)
            .map(|l| LayerInfo {
                tag: format!("enc{}", l + 1),
                channels: w[l],
                stride: 1 << (l + 1),
            })
            .collect();
        for i in 1..4 {
            out.push(LayerInfo {
                tag: format!("dec{i}"),
                channels: w[3 - i],
                stride: 1 << (4 - i),
            });
        }
        out
    }

    fn forward_capture(&self, x: &Tensor, train: bool, capture: &[&str]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        self.check_input(x)?;
        let (_, _, h, w) = x.dims4()?;
        let mut captured = BTreeMap::new();
        let mut keep = |tag: String, t: &Tensor| {
            if capture.contains(&tag.as_str()) {
                captured.insert(tag, t.clone());
            }
        };

        let mut skips = Vec::with_capacity(4);
        let mut cur = x.clone();
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            cur = b.forward(&a.forward(&cur, train)?, train)?;
            keep(format!("enc{}", l + 1), &cur);
            skips.push(cur.clone());
        }
        for (i, [a, b]) in self.decoder.iter().enumerate() {
            let skip = &skips[skips.len() - 2 - i];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = upsample_bilinear(&cur, sh, sw)?;
            let joined = Tensor::cat(&[skip, &up], 1)?;
            cur = b.forward(&a.forward(&joined, train)?, train)?;
            keep(format!("dec{}", i + 1), &cur);
        }
        let logits = upsample_bilinear(&self.classifier.forward(&cur)?, h, w)?;
        Ok((logits, captured))
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Manifest stored alongside checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub architecture: String,
    pub unet: UNetConfig,
    pub taps: Vec<TapSpec>,
    /// Superpixel heads saved with the model, by shallow tap.
    pub heads: Vec<HeadManifest>,
    /// Free-form run notes (epoch, metrics) recorded by the trainer.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadManifest {
    pub layer_tag: String,
    pub in_channels: usize,
    pub stride: usize,
    pub seed: u64,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const ARCHITECTURE_NAME: &str = "reference-unet";
const MANIFEST_KEY: &str = "segdoctor.manifest";

/// Writes model (and head) tensors with the manifest into one file.
pub fn save_checkpoint(
    path: &Path,
    manifest: &CheckpointManifest,
    model: &ParamStore,
    heads: &[(&str, &ParamStore)],
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .snapshot()
        .into_iter()
        .map(|(k, t)| (format!("model.{k}"), t))
        .collect();
    for (tag, store) in heads {
        tensors.extend(
            store
                .snapshot()
                .into_iter()
                .map(|(k, t)| (format!("heads.{tag}.{k}"), t)),
        );
    }
    let manifest_json =
        serde_json::to_string(manifest).map_err(|e| Error::data(format!("manifest encode: {e}")))?;
    save_arrays(path, &tensors, &[(MANIFEST_KEY.to_string(), manifest_json)])
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub model: ReferenceUNet,
    /// Raw head tensors by tag, prefix stripped.
    pub head_tensors: BTreeMap<String, BTreeMap<String, Tensor>>,
}

pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let file = load_arrays(path, device)?;
    let raw = file
        .metadata
        .get(MANIFEST_KEY)
        .ok_or_else(|| Error::data(format!("{} has no manifest", path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(raw).map_err(|e| Error::data(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION || manifest.architecture != ARCHITECTURE_NAME {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint ({} v{})",
            path.display(),
            manifest.architecture,
            manifest.schema_version
        )));
    }
    let model = ReferenceUNet::new(manifest.unet.clone(), dtype, device)?;
    let mut model_tensors = BTreeMap::new();
    let mut head_tensors: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    for (name, t) in file.tensors {
        if let Some(rest) = name.strip_prefix("model.") {
            model_tensors.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("heads.") {
            let head = manifest
                .heads
                .iter()
                .find(|h| rest.starts_with(&format!("{}.", h.layer_tag)))
                .ok_or_else(|| Error::data(format!("tensor `{name}` belongs to no declared head")))?;
            head_tensors
                .entry(head.layer_tag.clone())
                .or_default()
                .insert(rest[head.layer_tag.len() + 1..].to_string(), t);
        } else {
            return Err(Error::data(format!("unexpected tensor `{name}` in checkpoint")));
        }
    }
    model.params().load_tensors(&model_tensors)?;
    Ok(LoadedCheckpoint {
        manifest,
        model,
        head_tensors,
    })
}
