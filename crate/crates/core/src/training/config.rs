use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, TrainError};
use crate::data::TargetOccurrence;
use crate::decode::DecodeConfig;
use crate::model::ModelConfig;
use crate::numerics::{PoolKind, Reduction};
use crate::objectives::{ContrastiveConfig, ObjectiveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagePooling {
    None,
    Max,
    Mean,
}

impl StagePooling {
    pub fn kind(self) -> Option<PoolKind> {
        match self {
            Self::None => None,
            Self::Max => Some(PoolKind::Max),
            Self::Mean => Some(PoolKind::Mean),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageKind,
    pub max_epoch: usize,
    pub early_stop_patience: usize,
    pub pooling: StagePooling,
    pub lambda: f64,
}

impl StageConfig {
    pub fn one(max_epoch: usize, early_stop_patience: usize) -> Self {
        Self { stage: StageKind::One, max_epoch, early_stop_patience, pooling: StagePooling::None, lambda: 0.0 }
    }

    pub fn two(max_epoch: usize, early_stop_patience: usize, pooling: StagePooling, lambda: f64) -> Self {
        Self { stage: StageKind::Two, max_epoch, early_stop_patience, pooling, lambda }
    }

    /// 140/40 then 70/40, max pooling, λ = 0.8.
    pub fn wordnet() -> (Self, Self) {
        (Self::one(140, 40), Self::two(70, 40, StagePooling::Max, 0.8))
    }

    /// 50/10 then 50/10, max pooling, λ = 0.8.
    pub fn oxford() -> (Self, Self) {
        (Self::one(50, 10), Self::two(50, 10, StagePooling::Max, 0.8))
    }

    /// 30/5 then 15/5, max pooling, λ = 0.8.
    pub fn urban() -> (Self, Self) {
        (Self::one(30, 5), Self::two(15, 5, StagePooling::Max, 0.8))
    }

    pub fn preset(name: &str) -> Option<(Self, Self)> {
        match name {
            "wordnet" => Some(Self::wordnet()),
            "oxford" => Some(Self::oxford()),
            "urban" => Some(Self::urban()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidStage(m));
        if self.max_epoch == 0 {
            return bad("max_epoch must be at least 1".into());
        }
        if self.early_stop_patience > self.max_epoch {
            return bad(format!("patience {} exceeds max_epoch {}", self.early_stop_patience, self.max_epoch));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        match self.stage {
            StageKind::One if self.lambda != 0.0 || self.pooling != StagePooling::None => {
                bad("stage one trains on the generation loss only: lambda 0, pooling none".into())
            }
            StageKind::Two if self.pooling == StagePooling::None => bad("stage two needs max or mean pooling".into()),
            _ => Ok(()),
        }
    }

    pub fn objective(&self, contrastive: &ContrastiveSettings) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            contrastive: self.pooling.kind().map(|pooling| ContrastiveConfig {
                tau: contrastive.tau,
                pooling,
                reduction: contrastive.reduction,
            }),
        }
    }
}

/// Temperature and reduction shared by every contrastive stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSettings {
    pub tau: f64,
    pub reduction: Reduction,
}

impl Default for ContrastiveSettings {
    fn default() -> Self {
        Self { tau: 0.1, reduction: Reduction::Mean }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    /// Validation L_G in stage one, L_Final in stage two. Lower is better.
    #[default]
    Loss,
    /// Greedy validation corpus BLEU. Higher is better.
    Bleu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

fn default_batch() -> usize {
    16
}

/// Everything a training run needs besides the data itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub contrastive: ContrastiveSettings,
    #[serde(default)]
    pub monitor: Monitor,
    /// Keep Adam moments from the previous stage instead of starting fresh.
    #[serde(default)]
    pub carry_optimizer: bool,
    #[serde(default)]
    pub target_occurrence: TargetOccurrence,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub paths: DataPaths,
}

impl RunConfig {
    /// Settings used for the bundled demo corpus: the small model, Oxford
    /// style stage thresholds with a larger stage-one budget.
    pub fn demo(vocab_size: usize) -> Self {
        Self {
            model: ModelConfig::small(vocab_size),
            stage1: StageConfig::one(150, 20),
            stage2: StageConfig::two(50, 10, StagePooling::Max, 0.8),
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            batch_size: 16,
            seed: 0,
            contrastive: ContrastiveSettings::default(),
            monitor: Monitor::Loss,
            carry_optimizer: false,
            target_occurrence: TargetOccurrence::Context,
            decode: DecodeConfig::greedy(),
            paths: DataPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidStage("batch_size must be at least 1".into()));
        }
        if !(self.contrastive.tau > 0.0 && self.contrastive.tau.is_finite()) {
            return Err(TrainError::InvalidStage(format!("tau must be positive, got {}", self.contrastive.tau)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(TrainError::InvalidStage("learning rate must be positive".into()));
        }
        self.decode.validate()?;
        Ok(())
    }
}
