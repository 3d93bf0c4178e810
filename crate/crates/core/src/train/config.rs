//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Augment, ShapeKind};
use crate::error::{Error, Result};
use crate::superpixel::NormalizationMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// `[height, width]`; defaults to the synthetic image size or 512x512.
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default = "defaults::yes")]
    pub hflip: bool,
    #[serde(default = "defaults::yes")]
    pub vflip: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            schedule: Schedule::Cosine,
            crop: None,
            hflip: true,
            vflip: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Per-step cosine decay from `lr` to 0 over the whole run.
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::m")]
    pub m: f64,
    #[serde(default = "defaults::s")]
    pub s: usize,
    #[serde(default = "defaults::deep_tap")]
    pub deep_tap: String,
    #[serde(default = "defaults::shallow_taps")]
    pub shallow_taps: Vec<String>,
    #[serde(default = "defaults::normalization")]
    pub normalization: NormalizationMode,
    /// Exponential-moving-average decay for class centroids; absent means
    /// centroids come from the current batch alone.
    #[serde(default)]
    pub centroid_memory: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TreatmentConfig {
    fn default() -> Self {
        Self {
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            m: defaults::m(),
            s: defaults::s(),
            deep_tap: defaults::deep_tap(),
            shallow_taps: defaults::shallow_taps(),
            normalization: defaults::normalization(),
            centroid_memory: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub shapes: Option<Vec<ShapeKind>>,
    #[serde(default)]
    pub max_shapes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SynthSpec),
    Voc {
        root: PathBuf,
        num_classes: usize,
        #[serde(default = "defaults::train_split")]
        train_split: String,
        #[serde(default = "defaults::val_split")]
        val_split: String,
    },
}

impl DataSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSpec::Synthetic(s) => s.num_classes,
            DataSpec::Voc { num_classes, .. } => *num_classes,
        }
    }
}

/// Independent seeds; each defaults to one derived from the base seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOverrides {
    pub init: Option<u64>,
    pub order: Option<u64>,
    pub augment: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub order: u64,
    pub augment: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "defaults::ablation_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: defaults::ablation_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub output_dir: PathBuf,
    #[serde(default = "defaults::device")]
    pub device: String,
    #[serde(default = "defaults::yes")]
    pub enable_category: bool,
    #[serde(default = "defaults::yes")]
    pub enable_boundary: bool,
    /// Boundary band used for the validation boundary-F score.
    #[serde(default = "defaults::band")]
    pub eval_band: usize,
    #[serde(default)]
    pub seeds: SeedOverrides,
    #[serde(default)]
    pub treatment: TreatmentConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn seeds(&self) -> Seeds {
        let base = self.treatment.seed;
        Seeds {
            init: self.seeds.init.unwrap_or(base),
            order: self.seeds.order.unwrap_or_else(|| mix(base, 1)),
            augment: self.seeds.augment.unwrap_or_else(|| mix(base, 2)),
        }
    }

    /// Effective category weight (0 when the treatment is disabled).
    pub fn alpha(&self) -> f64 {
        if self.enable_category {
            self.treatment.alpha
        } else {
            0.0
        }
    }

    pub fn beta(&self) -> f64 {
        if self.enable_boundary {
            self.treatment.beta
        } else {
            0.0
        }
    }

    pub fn augment(&self) -> Augment {
        let o = &self.treatment.optimizer;
        let crop = o.crop.map(|[h, w]| (h, w)).or(match &self.data {
            DataSpec::Synthetic(s) => Some((s.size, s.size)),
            DataSpec::Voc { .. } => Some((512, 512)),
        });
        Augment {
            crop,
            hflip: o.hflip,
            vflip: o.vflip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.treatment;
        let o = &t.optimizer;
        let bad = |msg: String| Err(Error::config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.device != "cpu" {
            return bad(format!("device `{}` is not available; only `cpu` is supported", self.device));
        }
        for (name, v) in [("alpha", t.alpha), ("beta", t.beta), ("m", t.m)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("treatment.{name} must be a finite non-negative number, got {v}"));
            }
        }
        if t.s == 0 {
            return bad("treatment.s must be positive".into());
        }
        if t.shallow_taps.is_empty() {
            return bad("treatment.shallow_taps must name at least one layer".into());
        }
        if let Some(d) = t.centroid_memory {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("treatment.centroid_memory must be in [0, 1), got {d}"));
            }
        }
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return bad(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return bad("optimizer.momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if o.batch_size == 0 {
            return bad("optimizer.batch_size must be positive".into());
        }
        if let Some([h, w]) = o.crop {
            if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
                return bad(format!("optimizer.crop must be positive multiples of 16, got [{h}, {w}]"));
            }
        }
        if self.eval_band == 0 {
            return bad("eval_band must be at least 1".into());
        }
        if self.ablation.seeds.is_empty() {
            return bad("ablation.seeds must not be empty".into());
        }
        match &self.data {
            DataSpec::Synthetic(s) => {
                if s.train_count == 0 || s.val_count == 0 {
                    return bad("synthetic train_count and val_count must be positive".into());
                }
                self.synth_params(false).validate()?;
            }
            DataSpec::Voc { num_classes, .. } => {
                if *num_classes < 2 || *num_classes > 255 {
                    return bad(format!("data.num_classes must be in 2..=255, got {num_classes}"));
                }
            }
        }
        Ok(())
    }

    /// Synthetic generator parameters for the training or validation split.
    pub fn synth_params(&self, val: bool) -> crate::data::SynthParams {
        let DataSpec::Synthetic(s) = &self.data else {
            panic!("synth_params called on a non-synthetic config");
        };
        let mut p = crate::data::SynthParams::new(
            if val { s.val_count } else { s.train_count },
            s.size,
            s.num_classes,
            if val { mix(s.seed, 3) } else { s.seed },
        );
        if let Some(shapes) = &s.shapes {
            p.shapes = shapes.clone();
        }
        if let Some(m) = s.max_shapes {
            p.max_shapes = m;
        }
        p
    }
}

mod defaults {
    use super::NormalizationMode;

    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn yes() -> bool {
        true
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn beta() -> f64 {
        0.01
    }
    pub fn m() -> f64 {
        0.03
    }
    pub fn s() -> usize {
        16
    }
    pub fn deep_tap() -> String {
        "enc4".into()
    }
    pub fn shallow_taps() -> Vec<String> {
        vec!["enc1".into()]
    }
    pub fn normalization() -> NormalizationMode {
        NormalizationMode::Softmax9
    }
    pub fn device() -> String {
        "cpu".into()
    }
    pub fn band() -> usize {
        2
    }
    pub fn train_split() -> String {
        "train".into()
    }
    pub fn val_split() -> String {
        "val".into()
    }
    pub fn ablation_seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
}
