//! Run configuration, read from TOML. Every key has a default and unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capsnet::CapsNetConfig;
use crate::cnn::CnnConfig;
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::tradaboost::{BoostConfig, VoteWindow};
use crate::vit::VitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `(height, width)` every image is resized to. Overrides the
    /// `input_size` keys of the branch sections.
    pub image_size: (usize, usize),
    /// Per-class fraction of the target set used for training.
    pub split_ratio: f64,
    /// Fraction of the training split carved off for validation curves.
    /// Zero means the test split doubles as the validation set.
    pub val_ratio: f64,
    pub epochs: usize,
    pub output_dir: PathBuf,
    /// Directory names of label 0 (tumor) and label 1 (no tumor).
    pub class_names: [String; 2],
    pub data: DataConfig,
    pub boost: BoostSettings,
    pub train: TrainSettings,
    pub vit: VitConfig,
    pub capsnet: CapsNetConfig,
    pub cnn: CnnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: (64, 64),
            split_ratio: 0.8,
            val_ratio: 0.0,
            epochs: 10,
            output_dir: PathBuf::from("runs/default"),
            class_names: ["glioma".into(), "notumor".into()],
            data: DataConfig::default(),
            boost: BoostSettings::default(),
            train: TrainSettings::default(),
            vit: VitConfig::default(),
            capsnet: CapsNetConfig::default(),
            cnn: CnnConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directories,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// `<dir>/<class_name>/*.png|*.pgm`, used when `source = "directories"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
    /// Images per label `[tumor, no tumor]` for the synthetic target set.
    pub target_counts: [usize; 2],
    pub source_counts: [usize; 2],
    /// Keep only this many target training samples (stratified).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_train_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            target_dir: None,
            source_dir: None,
            target_counts: [500, 400],
            source_counts: [200, 250],
            target_train_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostSettings {
    /// When false the attention and capsule branches train on target data
    /// only, like the CNN branch.
    pub enabled: bool,
    pub rounds: usize,
    pub vote: VoteWindow,
    /// Epochs each round's weak learner is trained for.
    pub weak_epochs: usize,
}

impl Default for BoostSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            rounds: 10,
            vote: VoteWindow::LastHalf,
            weak_epochs: 2,
        }
    }
}

impl BoostSettings {
    pub fn boost_config(&self) -> BoostConfig {
        BoostConfig {
            rounds: self.rounds,
            vote: self.vote,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub freeze_backbone: bool,
    /// Training profiles averaged per label into a decision template.
    pub template_cap: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 4,
            freeze_backbone: false,
            template_cap: crate::fusion::TEMPLATE_CAP,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Checks invariants and copies `image_size` into every branch.
    pub fn validated(mut self) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must be in (0,1), got {}", self.split_ratio));
        }
        if !(0.0..1.0).contains(&self.val_ratio) {
            return bad(format!("val_ratio must be in [0,1), got {}", self.val_ratio));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.boost.rounds == 0 || self.boost.weak_epochs == 0 {
            return bad("boost.rounds and boost.weak_epochs must be at least 1".into());
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", self.train.learning_rate));
        }
        if !(self.train.lr_decay > 0.0 && self.train.lr_decay <= 1.0) {
            return bad(format!("train.lr_decay must be in (0,1], got {}", self.train.lr_decay));
        }
        if self.train.batch_size == 0 || self.train.template_cap == 0 {
            return bad("train.batch_size and train.template_cap must be at least 1".into());
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size must be positive".into());
        }
        if self.class_names[0] == self.class_names[1] {
            return bad("class_names must differ".into());
        }
        if self.data.source == DataSource::Directories && self.data.target_dir.is_none() {
            return bad("data.target_dir is required when data.source = \"directories\"".into());
        }
        if self.data.source == DataSource::Synthetic
            && (self.data.target_counts.contains(&0) || self.data.source_counts.contains(&0))
        {
            return bad("synthetic counts must be at least 1".into());
        }
        let size = self.image_size;
        self.vit.backbone.input_size = size;
        self.capsnet.backbone.input_size = size;
        self.cnn.input_size = size;
        self.vit.token_layout()?;
        self.capsnet.backbone.output_shape()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default().validated().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.split_ratio, 0.8);
        assert_eq!(cfg.boost.rounds, 10);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default().validated().unwrap());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[vit]\nheadz = 2"), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_checked() {
        for text in ["split_ratio = 1.0", "split_ratio = 0.0", "epochs = 0", "[boost]\nrounds = 0"] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn image_size_reaches_branches() {
        let cfg = RunConfig::from_toml("image_size = [32, 32]").unwrap();
        assert_eq!(cfg.vit.backbone.input_size, (32, 32));
        assert_eq!(cfg.capsnet.backbone.input_size, (32, 32));
        assert_eq!(cfg.cnn.input_size, (32, 32));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
