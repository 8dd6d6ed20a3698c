//! Experiment configuration, read from a TOML file with the sections
//! `[data]`, `[model]`, `[train]`, `[run]`, `[matrix]` and `[ndsm]`.
//! Every key is optional; `configs/default.toml` lists them all with
//! their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{SceneSpec, SplitCounts};
use crate::error::{Error, Result};
use crate::fusion::{ParadigmKind, ParadigmSpec};
use crate::ndsm::PipelineConfig;
use crate::segnet::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = SplitCounts::default();
        Self {
            dir: PathBuf::from("data"),
            seed: 0,
            train: c.train,
            val: c.val,
            test: c.test,
            scene: SceneSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

/// Single training run selected by the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paradigm: ParadigmKind,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paradigm: ParadigmKind::Intermediary,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    pub paradigms: Vec<ParadigmKind>,
    pub seeds: Vec<u64>,
    /// Concurrent training runs; `RGBH_THREADS` overrides it.
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            paradigms: DEFAULT_MATRIX.to_vec(),
            seeds: vec![0, 1, 2],
            threads: 1,
            out_dir: PathBuf::from("matrix"),
        }
    }
}

/// Paradigm rows of the default comparison table.
pub const DEFAULT_MATRIX: [ParadigmKind; 6] = [
    ParadigmKind::SingleRgb,
    ParadigmKind::SingleHeight,
    ParadigmKind::Early,
    ParadigmKind::Late,
    ParadigmKind::Cross,
    ParadigmKind::Intermediary,
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
    pub matrix: MatrixConfig,
    pub ndsm: PipelineConfig,
}

pub const THREADS_ENV: &str = "RGBH_THREADS";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.scene.tile_size != self.model.image_size {
            return Err(Error::ConfigInvalid(format!(
                "tile size {} differs from model image size {}",
                self.data.scene.tile_size, self.model.image_size
            )));
        }
        if self.model.classes != self.data.scene.colors.len() {
            return Err(Error::ClassCountMismatch(self.model.classes, self.data.scene.colors.len()));
        }
        self.model.validate()?;
        self.train.validate()?;
        ParadigmSpec::new(self.run.paradigm, self.model.backbone)?;
        for &k in &self.matrix.paradigms {
            ParadigmSpec::new(k, self.model.backbone)?;
        }
        if self.matrix.paradigms.is_empty() || self.matrix.seeds.is_empty() {
            return Err(Error::ConfigInvalid("matrix needs at least one paradigm and one seed".into()));
        }
        if !(self.ndsm.cell_size > 0.0) || self.ndsm.noise_k == 0 {
            return Err(Error::ConfigInvalid("ndsm cell_size and noise_k must be positive".into()));
        }
        Ok(())
    }

    /// Matrix concurrency after applying the environment override.
    pub fn threads(&self) -> Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::ConfigInvalid(format!("{THREADS_ENV}={v} is not a positive integer"))),
            Err(_) => Ok(self.matrix.threads.max(1)),
        }
    }
}
