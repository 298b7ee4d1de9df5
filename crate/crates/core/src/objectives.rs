//! Generation cross-entropy, the pooled in-batch contrastive loss and their
//! λ-weighted mixture.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Batch;
use crate::model::{self, BoundModel, ModelConfig, ModelError, SeqView};
use crate::numerics::{cosine_sim, NumericsError, PoolKind, Reduction, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub pooling: PoolKind,
    pub reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.1, pooling: PoolKind::Max, reduction: Reduction::Mean }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidTemperature(self.tau))
        }
    }
}

/// What a training step optimises. `contrastive: None` is plain generation
/// training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub contrastive: Option<ContrastiveConfig>,
}

impl ObjectiveConfig {
    pub fn generation_only() -> Self {
        Self { lambda: 0.0, contrastive: None }
    }
}

/// Mean token NLL over positions where `mask` is true.
pub fn generation_loss(tape: &Tape, logits: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
    let targets: Vec<Option<usize>> = gold.iter().zip(mask).map(|(&g, &m)| m.then_some(g)).collect();
    Ok(tape.cross_entropy(logits, &targets, Reduction::Mean)?)
}

/// Pools the encoder target rows into `h` and the decoder non-pad rows into
/// `g`, one row per sample. Row indices address the flattened hidden states.
pub fn pooled_representations(
    tape: &Tape,
    enc: Var,
    target_rows: &[Vec<usize>],
    dec: Var,
    decoder_rows: &[Vec<usize>],
    pooling: PoolKind,
) -> Result<(Var, Var)> {
    let h = tape.pool_rows(enc, target_rows, pooling)?;
    let g = tape.pool_rows(dec, decoder_rows, pooling)?;
    Ok((h, g))
}

fn similarity(tape: &Tape, h: Var, g: Var) -> Result<Var> {
    let hn = tape.normalize_rows(h)?;
    let gn = tape.normalize_rows(g)?;
    Ok(tape.matmul_nt(hn, gn)?)
}

fn diagonal_targets(n: usize) -> Vec<Option<usize>> {
    (0..n).map(Some).collect()
}

/// InfoNCE over in-batch pairs: row i of `h` must pick row i of `g` among
/// all rows of `g`, with cosine similarities divided by `tau`.
pub fn contrastive_loss(tape: &Tape, h: Var, g: Var, tau: f64, reduction: Reduction) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ObjectiveError::InvalidTemperature(tau));
    }
    let sim = similarity(tape, h, g)?;
    let n = tape.value(sim).rows();
    let logits = tape.scale(sim, 1.0 / tau)?;
    Ok(tape.cross_entropy(logits, &diagonal_targets(n), reduction)?)
}

/// As [`contrastive_loss`] with the temperature as a differentiable node.
pub fn contrastive_loss_tau_var(tape: &Tape, h: Var, g: Var, tau: Var, reduction: Reduction) -> Result<Var> {
    let sim = similarity(tape, h, g)?;
    let n = tape.value(sim).rows();
    let logits = tape.div_scalar(sim, tau)?;
    Ok(tape.cross_entropy(logits, &diagonal_targets(n), reduction)?)
}

/// `lambda * l_c + (1 - lambda) * l_g`. The endpoints return the selected
/// operand itself, so no gradient flows through the other.
pub fn mixed_loss(tape: &Tape, l_c: Var, l_g: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ObjectiveError::LambdaOutOfRange(lambda));
    }
    if lambda == 0.0 {
        return Ok(l_g);
    }
    if lambda == 1.0 {
        return Ok(l_c);
    }
    let a = tape.scale(l_c, lambda)?;
    let b = tape.scale(l_g, 1.0 - lambda)?;
    Ok(tape.add(a, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Cosine similarities, `similarity[i][j] = sim(h_i, g_j)`.
    pub similarity: Vec<Vec<f64>>,
    pub diag_mean_sim: f64,
    /// 0 for a batch of one.
    pub offdiag_mean_sim: f64,
    /// Fraction of rows whose most similar `g` is their own (ties to the lowest index).
    pub retrieval_acc: f64,
    pub duplicate_rate: f64,
}

impl Diagnostics {
    pub fn from_pooled(h: &Tensor, g: &Tensor, duplicate_rate: f64) -> Result<Self> {
        let n = h.rows();
        let mut similarity = vec![vec![0.0; n]; n];
        for (i, row) in similarity.iter_mut().enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s = cosine_sim(h.row(i), g.row(j))?;
            }
        }
        let diag: f64 = (0..n).map(|i| similarity[i][i]).sum();
        let total: f64 = similarity.iter().flatten().sum();
        let off_count = n * n - n;
        let hits = similarity
            .iter()
            .enumerate()
            .filter(|(i, row)| {
                let best = row.iter().enumerate().fold(0, |b, (j, &s)| if s > row[b] { j } else { b });
                best == *i
            })
            .count();
        Ok(Self {
            diag_mean_sim: diag / n as f64,
            offdiag_mean_sim: if off_count == 0 { 0.0 } else { (total - diag) / off_count as f64 },
            retrieval_acc: hits as f64 / n as f64,
            duplicate_rate,
            similarity,
        })
    }
}

/// Loss values of one batch. `l_c` and `diagnostics` are present when a
/// contrastive branch was computed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_C")]
    pub l_c: Option<f64>,
    #[serde(rename = "L_Final")]
    pub l_final: f64,
    #[serde(skip)]
    pub diagnostics: Option<Diagnostics>,
}

/// Full forward pass of one batch. Returns the node to differentiate and the
/// observed values. `rng` enables dropout.
pub fn batch_objective(
    tape: &Tape,
    m: &BoundModel,
    cfg: &ModelConfig,
    batch: &Batch,
    objective: &ObjectiveConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Var, LossBundle)> {
    let src = SeqView::new(&batch.encoder_ids, &batch.encoder_mask, batch.size, batch.src_len);
    let tgt = SeqView::new(&batch.decoder_in, &batch.decoder_mask, batch.size, batch.tgt_len);
    let enc = model::encode(tape, m, cfg, src, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
    let dec = model::decode_teacher_forced(tape, m, cfg, enc, &batch.encoder_mask, tgt, rng)?;
    let logits = model::lm_head(tape, m, dec)?;
    let l_g = generation_loss(tape, logits, &batch.decoder_gold, &batch.decoder_mask)?;
    let lg_value = tape.value(l_g).item();
    let Some(cc) = objective.contrastive else {
        if objective.lambda != 0.0 {
            return Err(ObjectiveError::LambdaOutOfRange(objective.lambda));
        }
        return Ok((l_g, LossBundle { l_g: lg_value, l_c: None, l_final: lg_value, diagnostics: None }));
    };
    let (h, g) = pooled_representations(tape, enc, &batch.target_rows(), dec, &batch.decoder_rows(), cc.pooling)?;
    let l_c = contrastive_loss(tape, h, g, cc.tau, cc.reduction)?;
    let total = mixed_loss(tape, l_c, l_g, objective.lambda)?;
    let diagnostics = Diagnostics::from_pooled(&tape.value(h), &tape.value(g), batch.duplicate_target_rate())?;
    let bundle = LossBundle {
        l_g: lg_value,
        l_c: Some(tape.value(l_c).item()),
        l_final: tape.value(total).item(),
        diagnostics: Some(diagnostics),
    };
    Ok((total, bundle))
}
