//! Run configuration: every module's settings in one TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::detector::{AnchorConfig, DiffConfig, HeadConfig, InferenceConfig, LossConfig, Mode, ModelConfig};
use crate::dgfe::DgfeConfig;
use crate::error::{Error, Result};
use crate::nn::optim::SgdConfig;
use crate::recon::ReconConfig;
use crate::synthdata::SceneConfig;

/// Offset between the training and validation scene seeds.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Seed of the first training scene; scene `i` uses `seed + i`.
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_count: 500,
            val_count: 100,
        }
    }
}

impl DataConfig {
    pub fn val_seed(&self) -> u64 {
        self.seed.wrapping_add(VAL_SEED_OFFSET)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            checkpoint_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of parameter initialization and batch order.
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub recon: ReconConfig,
    pub diffmap: DiffConfig,
    pub dgfe: DgfeConfig,
    pub anchors: AnchorConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    pub optimizer: SgdConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Srtod,
            out_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            recon: ReconConfig::default(),
            diffmap: DiffConfig::default(),
            dgfe: DgfeConfig::default(),
            anchors: AnchorConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
            optimizer: SgdConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.backbone.validate()?;
        self.dgfe.validate(self.backbone.channels)?;
        self.diffmap.highpass().validate()?;
        self.anchors.validate()?;
        self.head.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            classes: self.scene.classes,
            backbone: self.backbone.clone(),
            recon: self.recon.clone(),
            diffmap: self.diffmap.clone(),
            dgfe: self.dgfe.clone(),
            anchors: self.anchors.clone(),
            head: self.head.clone(),
            loss: self.loss.clone(),
            inference: self.inference.clone(),
        }
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short description of the ablation axes, written to every metrics line.
    pub fn variant(&self) -> String {
        let dgfe = if self.mode == Mode::Srtod {
            format!(
                " dgfe={} threshold={} resize={:?} diffmap={}",
                self.dgfe.mode.label(),
                self.dgfe.threshold,
                self.dgfe.resize,
                self.diffmap.flavor.label()
            )
            .to_lowercase()
        } else {
            String::new()
        };
        format!("mode={}{dgfe} lambda={}", self.mode.label(), self.loss.lambda)
    }
}
