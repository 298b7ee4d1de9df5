use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, StageConfig, TrainError, TrainState};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::serialize::{decode, encode};
use crate::numerics::Tensor;

const FORMAT: &str = "contrastdef-checkpoint";

/// Parameters, optimizer moments and the configs they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stage: StageConfig,
    pub vocab: Vec<String>,
    pub params: ModelParams,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    best_score: Option<f64>,
    epochs_since_improvement: usize,
    step: u64,
    seed: u64,
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    stage: StageConfig,
    vocab: Vec<String>,
    state: StateHeader,
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        model: c.model.clone(),
        stage: c.stage,
        vocab: c.vocab.clone(),
        state: StateHeader {
            epoch: c.state.epoch,
            best_score: c.state.best_score,
            epochs_since_improvement: c.state.epochs_since_improvement,
            step: c.state.step,
            seed: c.state.seed,
            adam_t: c.state.adam.t,
        },
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut tensors = c.params.named();
    for (prefix, moments) in [("adam.m.", &c.state.adam.m), ("adam.v.", &c.state.adam.v)] {
        tensors.extend(c.params.names().iter().zip(moments).map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
    }
    encode(&json, &tensors)
}

/// Parses a checkpoint; with `expected`, refuses one whose model config differs.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    let (json, tensors) = decode(bytes).map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    let header: Header = serde_json::from_str(&json).map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    if header.format != FORMAT {
        return Err(TrainError::CorruptCheckpoint(format!("unknown format tag {:?}", header.format)));
    }
    if let Some(want) = expected {
        if want != &header.model {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint model {:?} differs from configured {:?}",
                header.model, want
            )));
        }
    }
    if tensors.len() % 3 != 0 {
        return Err(TrainError::CorruptCheckpoint(format!("{} tensors is not params plus two moment sets", tensors.len())));
    }
    let n = tensors.len() / 3;
    let mut it = tensors.into_iter();
    let named: Vec<(String, Tensor)> = it.by_ref().take(n).collect();
    let params = ModelParams::from_named(&header.model, named)?;
    let mut moments = |prefix: &str| -> Result<Vec<Tensor>, TrainError> {
        it.by_ref()
            .take(n)
            .zip(params.names())
            .zip(params.tensors())
            .map(|(((name, t), pname), p)| {
                if name != format!("{prefix}{pname}") || t.shape() != p.shape() {
                    Err(TrainError::CorruptCheckpoint(format!("unexpected moment tensor {name}")))
                } else {
                    Ok(t)
                }
            })
            .collect()
    };
    let m = moments("adam.m.")?;
    let v = moments("adam.v.")?;
    let s = header.state;
    Ok(Checkpoint {
        model: header.model,
        stage: header.stage,
        vocab: header.vocab,
        state: TrainState {
            epoch: s.epoch,
            best_score: s.best_score,
            epochs_since_improvement: s.epochs_since_improvement,
            step: s.step,
            seed: s.seed,
            adam: Adam { m, v, t: s.adam_t },
        },
        params,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), TrainError> {
    std::fs::write(path, encode_checkpoint(c))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}
