//! Run configuration: model topology and ablation toggles, loss
//! hyperparameters, optimisation schedule and data source.
//!
//! Configurations are TOML documents with `[model]`, `[loss]`, `[train]` and
//! `[data]` tables. Missing keys take their defaults; unknown keys are errors.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::DEFAULT_CONTOUR_KERNEL;
use crate::decoder::RcsbConfig;
use crate::encoder::BackboneSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Bce,
    Wiou,
    Dcloss,
    Closs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub early_fusion: bool,
    pub sfe: bool,
    pub refinement: bool,
    pub confidence_supervision: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            early_fusion: true,
            sfe: true,
            refinement: true,
            confidence_supervision: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Recursive blocks for the refinement module followed by the decoder
    /// stages at strides 2, 4, 8, 16 and 32.
    pub g_list: Vec<usize>,
    pub recursions: usize,
    pub channels: usize,
    pub toggles: Toggles,
    pub loss_select: BTreeSet<LossTerm>,
    /// Add the dual confinement term a second time per stage.
    pub double_count_dc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            g_list: vec![1, 2, 2, 3, 3, 5],
            recursions: 3,
            channels: 64,
            toggles: Toggles::default(),
            loss_select: [LossTerm::Wiou, LossTerm::Dcloss, LossTerm::Closs].into_iter().collect(),
            double_count_dc: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g_list.len() != 6 {
            return Err(Error::Config(format!(
                "model.g_list needs 6 entries, got {}",
                self.g_list.len()
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("model.channels must be positive".into()));
        }
        for g in &self.g_list {
            self.rcsb(*g).validate()?;
        }
        if self.loss_select.is_empty() {
            return Err(Error::Config("model.loss_select must not be empty".into()));
        }
        if self.accuracy_terms().is_empty() {
            return Err(Error::Config(
                "model.loss_select needs at least one of bce, wiou, dcloss for stage supervision".into(),
            ));
        }
        Ok(())
    }

    pub fn rcsb(&self, blocks: usize) -> RcsbConfig {
        RcsbConfig {
            blocks,
            recursions: self.recursions,
            early_fusion: self.toggles.early_fusion,
        }
    }

    /// The confidence loss supervises the final output only when both the
    /// toggle and the loss selection ask for it.
    pub fn confidence_active(&self) -> bool {
        self.toggles.confidence_supervision && self.loss_select.contains(&LossTerm::Closs)
    }

    pub fn accuracy_terms(&self) -> Vec<LossTerm> {
        self.loss_select
            .iter()
            .copied()
            .filter(|t| *t != LossTerm::Closs)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-5,
            lr_decoder: 1e-4,
            halve_every: 20,
            epochs: 100,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_decoder", self.lr_decoder)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be non-negative, got {v}")));
            }
        }
        if self.halve_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train.halve_every, train.epochs and train.batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(encoder, decoder)` learning rates for a zero-based epoch.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let f = 0.5f64.powi((epoch / self.halve_every) as i32);
        (self.lr_encoder * f, self.lr_decoder * f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `images/` and `masks/`; empty means unset.
    pub root: PathBuf,
    /// Generate this many synthetic shape samples instead of reading `root`.
    pub synthetic: usize,
    pub height: usize,
    pub width: usize,
    pub augment: bool,
    pub contour_kernel: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::new(),
            synthetic: 0,
            height: 256,
            width: 256,
            augment: true,
            contour_kernel: DEFAULT_CONTOUR_KERNEL,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "data.height and data.width must be positive multiples of 32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.contour_kernel < 3 || self.contour_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "data.contour_kernel must be odd and at least 3, got {}",
                self.contour_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

const PRESETS: &[(&str, &str)] = &[
    ("default", include_str!("../configs/default.toml")),
    ("tiny", include_str!("../configs/tiny.toml")),
    ("tiny_overfit", include_str!("../configs/tiny_overfit.toml")),
    ("no_early_fusion", include_str!("../configs/no_early_fusion.toml")),
    ("ref_off_conf_off", include_str!("../configs/ref_off_conf_off.toml")),
    ("ref_on_conf_off", include_str!("../configs/ref_on_conf_off.toml")),
    ("ref_off_conf_on", include_str!("../configs/ref_off_conf_on.toml")),
    ("loss_bce", include_str!("../configs/loss_bce.toml")),
    ("loss_bce_wiou", include_str!("../configs/loss_bce_wiou.toml")),
    ("loss_wiou_dc", include_str!("../configs/loss_wiou_dc.toml")),
    ("loss_wiou_dc_closs", include_str!("../configs/loss_wiou_dc_closs.toml")),
];

/// Presets reproducing the ablation rows, in table order. Each is a
/// topology/loss overlay on the default configuration.
pub const ABLATION_PRESETS: &[&str] = &[
    "default",
    "no_early_fusion",
    "ref_off_conf_off",
    "ref_on_conf_off",
    "ref_off_conf_on",
    "loss_bce",
    "loss_bce_wiou",
    "loss_wiou_dc",
    "loss_wiou_dc_closs",
];

impl Config {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?}; available: {}",
                    Self::preset_names().collect::<Vec<_>>().join(", ")
                ))
            })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| crate::error::io(path, e))?;
            Self::from_toml(&text)
        } else if PRESETS.iter().any(|(n, _)| *n == spec) {
            Self::preset(spec)
        } else {
            Err(Error::Config(format!("{spec:?} is neither a config file nor a preset name")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Applies `dotted.key=value` overrides. The key must already exist in
    /// the serialised configuration; the value is parsed as a TOML value and
    /// falls back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not KEY=VALUE")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut tree, &path, value).map_err(|_| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let text = toml::to_string(&tree).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> std::result::Result<(), ()> {
    match path {
        [] => Err(()),
        [last] => match table.get_mut(*last) {
            Some(slot) if !slot.is_table() => {
                *slot = value;
                Ok(())
            }
            _ => Err(()),
        },
        [head, rest @ ..] => match table.get_mut(*head) {
            Some(toml::Value::Table(t)) => set_path(t, rest, value),
            _ => Err(()),
        },
    }
}
