//! Run configuration: model hyperparameters, training and scene settings,
//! loaded from JSON and patched with dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cvtr::{FusionScheme, TokenMixing};
use crate::error::{Error, Result};

/// How the per-view maps are combined before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Sum,
    Concat,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown aggregate `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input volume extents `(H₀, W₀, D₀)`; `W` is the vertical axis.
    pub volume: [usize; 3],
    /// Original-view feature map extents `(H, W, D)`.
    pub feature: [usize; 3],
    pub channels: usize,
    pub num_classes: usize,
    pub kernel_size: usize,
    /// Angle triples in degrees, one per synthetic view.
    pub rotations: Vec<[f64; 3]>,
    pub token_rows: usize,
    pub fusion: FusionScheme,
    pub token_mixing: TokenMixing,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub attn_scale: bool,
    pub aggregate: Aggregate,
    pub mvfs: bool,
    pub cvtr: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

pub fn x_rotations(degrees: &[f64]) -> Vec<[f64; 3]> {
    degrees.iter().map(|&d| [d, 0.0, 0.0]).collect()
}

impl ModelConfig {
    /// 16×8×16 volume, 4×2×4 features, C = 16, 4 classes, four x-axis views.
    pub fn toy() -> Self {
        Self {
            volume: [16, 8, 16],
            feature: [4, 2, 4],
            channels: 16,
            num_classes: 4,
            kernel_size: 3,
            rotations: x_rotations(&[0.0, 45.0, 90.0, 135.0]),
            token_rows: 8,
            fusion: FusionScheme::AllForOneTokens,
            token_mixing: TokenMixing::Concat,
            encoder_depth: 1,
            encoder_heads: 1,
            attn_scale: true,
            aggregate: Aggregate::Sum,
            mvfs: true,
            cvtr: true,
            seed: 0,
        }
    }

    /// 60×36×60 volume, 15×9×15 features, M = 75 (5×3×5), 12 classes.
    pub fn full() -> Self {
        Self {
            volume: [60, 36, 60],
            feature: [15, 9, 15],
            channels: 16,
            num_classes: 12,
            token_rows: 75,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Encoder stride-2 stages between the volume and the feature map.
    pub fn stages(&self) -> usize {
        (self.volume[0] / self.feature[0]).trailing_zeros() as usize
    }

    pub fn feature_voxels(&self) -> usize {
        self.feature.iter().product()
    }

    pub fn volume_voxels(&self) -> usize {
        self.volume.iter().product()
    }

    /// Number of maps reaching the decoder.
    pub fn branch_count(&self) -> usize {
        if self.mvfs {
            self.rotations.len()
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.volume.contains(&0) || self.feature.contains(&0) {
            return bad("extents must be positive".into());
        }
        let mut factor = None;
        for a in 0..3 {
            if !self.volume[a].is_multiple_of(self.feature[a]) {
                return bad(format!(
                    "feature extent {} does not divide volume extent {} on axis {a}",
                    self.feature[a], self.volume[a]
                ));
            }
            let f = self.volume[a] / self.feature[a];
            if *factor.get_or_insert(f) != f {
                return bad("downsampling factor must be equal on every axis".into());
            }
        }
        if !factor.unwrap_or(1).is_power_of_two() {
            return bad("downsampling factor must be a power of two".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.rotations.is_empty() {
            return bad("rotation set must be nonempty".into());
        }
        if self.rotations.iter().flatten().any(|a| !a.is_finite()) {
            return bad("rotation angles must be finite".into());
        }
        if self.cvtr {
            if self.token_rows == 0 || self.token_rows >= self.feature_voxels() {
                return bad(format!(
                    "token size M={} must satisfy 0 < M < H·W·D = {}",
                    self.token_rows,
                    self.feature_voxels()
                ));
            }
            if self.encoder_depth == 0 {
                return bad("encoder depth must be at least 1".into());
            }
            if self.encoder_heads == 0 || !self.channels.is_multiple_of(self.encoder_heads) {
                return bad(format!(
                    "{} heads do not divide {} channels",
                    self.encoder_heads, self.channels
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// `lr · (1 − t/steps)^power`.
    Poly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub poly_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            poly_power: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Poly => {
                let t = step as f64 / self.steps.max(1) as f64;
                self.lr * (1.0 - t).max(0.0).powf(self.poly_power)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be ≥ 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub box_count: usize,
    /// Probability that an observed surface voxel carries a wrong class in S.
    pub label_noise: f64,
    /// Scenes in the held-out set used by `ablate`.
    pub eval_scenes: usize,
    /// Scenes in the training set used by `ablate`.
    pub train_scenes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            box_count: 3,
            label_noise: 0.05,
            eval_scenes: 2,
            train_scenes: 2,
        }
    }
}

/// Everything a CLI run depends on; written verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.scene.label_noise) {
            return Err(Error::Config("label noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when they can
    /// and as plain strings otherwise; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?,
                    Value::Array(items) => part
                        .parse::<usize>()
                        .ok()
                        .and_then(|i| items.get_mut(i))
                        .ok_or_else(|| Error::Config(format!("bad index in `{key}`")))?,
                    _ => return Err(Error::Config(format!("`{key}` descends into a scalar"))),
                };
            }
            *slot = value;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
