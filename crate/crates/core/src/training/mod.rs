//! Adam, the staged schedule with early stopping, and checkpoints.

mod adam;
mod checkpoint;
mod config;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ContrastiveSettings, DataPaths, Monitor, RunConfig, StageConfig, StageKind, StagePooling};

use std::time::Instant;

use rand::RngCore;
use serde::Serialize;
use thiserror::Error;

use crate::data::{make_batches, Batch, Entry, TargetOccurrence, Vocab};
use crate::decode::{evaluate_split, DecodeError};
use crate::model::{self, ModelConfig, ModelError, ModelParams, SeqView};
use crate::numerics::{NumericsError, PoolKind, Tape, Tensor};
use crate::objectives::{batch_objective, pooled_representations, Diagnostics, LossBundle, ObjectiveConfig, ObjectiveError};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    InvalidStage(String),
    #[error("training loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: u64 },
    #[error("gradient of parameter {param} is not finite")]
    NonFiniteGradient { param: usize },
    #[error("{0} split is empty")]
    EmptyData(&'static str),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ConfigMismatch(m) => Self::ConfigMismatch(m),
            other => Self::Objective(other.into()),
        }
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        Self::Objective(e.into())
    }
}

/// Progress of one stage. `adam` holds the optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub epochs_since_improvement: usize,
    pub step: u64,
    pub seed: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(params: &ModelParams, seed: u64) -> Self {
        Self { epoch: 0, best_score: None, epochs_since_improvement: 0, step: 0, seed, adam: Adam::new(params.tensors()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "train_LG")]
    pub train_lg: f64,
    #[serde(rename = "train_LC")]
    pub train_lc: Option<f64>,
    #[serde(rename = "train_LFinal")]
    pub train_lfinal: f64,
    pub valid_score: f64,
    pub improved: bool,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_C")]
    pub l_c: Option<f64>,
    #[serde(rename = "L_Final")]
    pub l_final: f64,
    pub diag_mean_sim: Option<f64>,
    pub offdiag_mean_sim: Option<f64>,
    pub retrieval_acc: Option<f64>,
}

impl StepLog {
    fn new(step: u64, b: &LossBundle) -> Self {
        let d = b.diagnostics.as_ref();
        Self {
            step,
            l_g: b.l_g,
            l_c: b.l_c,
            l_final: b.l_final,
            diag_mean_sim: d.map(|d| d.diag_mean_sim),
            offdiag_mean_sim: d.map(|d| d.offdiag_mean_sim),
            retrieval_acc: d.map(|d| d.retrieval_acc),
        }
    }
}

pub enum TrainEvent<'a> {
    /// After the parameter update of a step.
    Step { log: &'a StepLog, params: &'a ModelParams },
    Epoch(&'a EpochLog),
}

/// Parameters and optimizer state captured at one epoch boundary.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub params: ModelParams,
    pub state: TrainState,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    /// Best validation epoch.
    pub best: Snapshot,
    pub last: Snapshot,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

pub struct TrainData<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [Entry],
    pub valid: &'a [Entry],
}

/// Seed of the initial parameters for `run_seed`.
pub fn init_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, "init", 0)
}

/// Trains one stage. Epoch and step counters, the shuffle stream and the
/// dropout stream all restart at zero; `optimizer` carries Adam moments
/// over from an earlier stage when given.
pub fn train_stage(
    params: ModelParams,
    run: &RunConfig,
    stage: &StageConfig,
    data: &TrainData<'_>,
    optimizer: Option<Adam>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<StageOutcome, TrainError> {
    run.validate()?;
    stage.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData("train"));
    }
    if data.valid.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let objective = stage.objective(&run.contrastive);
    let mut params = params;
    let mut state = TrainState::fresh(&params, run.seed);
    if let Some(adam) = optimizer {
        state.adam = adam;
    }
    let started = Instant::now();
    let mut best: Option<Snapshot> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let valid_batches = make_batches(data.valid, data.vocab, run.batch_size, None, run.target_occurrence);
    for epoch in 0..stage.max_epoch {
        let batches = make_batches(
            data.train,
            data.vocab,
            run.batch_size,
            Some(derive_seed(run.seed, "shuffle", epoch as u64)),
            run.target_occurrence,
        );
        let mut sums = [0.0; 3];
        let mut seen = 0usize;
        for batch in &batches {
            let bundle = train_step(&mut params, &mut state, run, &objective, batch)?;
            let w = batch.size as f64;
            sums[0] += w * bundle.l_g;
            sums[1] += w * bundle.l_c.unwrap_or(0.0);
            sums[2] += w * bundle.l_final;
            seen += batch.size;
            let step_log = StepLog::new(state.step, &bundle);
            observer(TrainEvent::Step { log: &step_log, params: &params });
        }
        state.epoch = epoch + 1;
        let score = validation_score(&params, run, &objective, data, &valid_batches)?;
        let improved = match (state.best_score, run.monitor) {
            (None, _) => true,
            (Some(b), Monitor::Loss) => score < b,
            (Some(b), Monitor::Bleu) => score > b,
        };
        if improved {
            state.best_score = Some(score);
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
        }
        let n = seen as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_lg: sums[0] / n,
            train_lc: objective.contrastive.map(|_| sums[1] / n),
            train_lfinal: sums[2] / n,
            valid_score: score,
            improved,
            lr: run.optimizer.lr,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        observer(TrainEvent::Epoch(&entry));
        log.push(entry);
        if improved {
            best = Some(Snapshot { params: params.clone(), state: state.clone() });
        }
        if state.epochs_since_improvement > stage.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let best = best.expect("first epoch always improves");
    Ok(StageOutcome { best, last: Snapshot { params, state }, log, stopped_early })
}

/// Contrastive-plus-generation training from a fresh initialisation.
pub fn train_one_stage(
    run: &RunConfig,
    stage: &StageConfig,
    data: &TrainData<'_>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<StageOutcome, TrainError> {
    let params = ModelParams::init(&run.model, init_seed(run.seed))?;
    train_stage(params, run, stage, data, None, observer)
}

impl RunConfig {
    /// Stage-two settings with the combined epoch budget of both stages and
    /// the larger patience, for one-stage training.
    pub fn one_stage_config(&self) -> StageConfig {
        StageConfig {
            max_epoch: self.stage1.max_epoch + self.stage2.max_epoch,
            early_stop_patience: self.stage1.early_stop_patience.max(self.stage2.early_stop_patience),
            ..self.stage2
        }
    }
}

fn train_step(
    params: &mut ModelParams,
    state: &mut TrainState,
    run: &RunConfig,
    objective: &ObjectiveConfig,
    batch: &Batch,
) -> Result<LossBundle, TrainError> {
    let cfg = &run.model;
    let tape = Tape::new();
    let m = params.bind(&tape, cfg);
    let mut rng = stream(run.seed, "dropout", state.step);
    let dropout: Option<&mut dyn RngCore> = (cfg.dropout > 0.0).then_some(&mut rng as &mut dyn RngCore);
    let (loss, bundle) = batch_objective(&tape, &m, cfg, batch, objective, dropout)?;
    if !bundle.l_final.is_finite() {
        return Err(TrainError::DivergedLoss { epoch: state.epoch + 1, step: state.step });
    }
    let grads = tape.backward(loss)?;
    let mut g: Vec<Tensor> = m.vars.iter().map(|&v| grads.wrt(v)).collect();
    if let Some(max) = run.optimizer.clip_norm {
        clip_global_norm(&mut g, max);
    }
    state.adam.step(&run.optimizer, params.tensors_mut(), &g)?;
    state.step += 1;
    Ok(bundle)
}

/// Mean loss over the validation batches (weighted by batch size), or
/// greedy corpus BLEU, without dropout.
fn validation_score(
    params: &ModelParams,
    run: &RunConfig,
    objective: &ObjectiveConfig,
    data: &TrainData<'_>,
    batches: &[Batch],
) -> Result<f64, TrainError> {
    match run.monitor {
        Monitor::Loss => mean_loss(params, &run.model, objective, batches),
        Monitor::Bleu => {
            let (report, _) =
                evaluate_split(params, &run.model, data.vocab, data.valid, run.target_occurrence, &run.decode)?;
            Ok(report.bleu)
        }
    }
}

/// Batch-size weighted mean of `L_Final` under `objective`, no dropout.
pub fn mean_loss(params: &ModelParams, cfg: &ModelConfig, objective: &ObjectiveConfig, batches: &[Batch]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for b in batches {
        let tape = Tape::new();
        let m = params.bind_frozen(&tape, cfg);
        let (_, bundle) = batch_objective(&tape, &m, cfg, b, objective, None)?;
        total += b.size as f64 * bundle.l_final;
        n += b.size;
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentSummary {
    pub diag_mean_sim: f64,
    pub offdiag_mean_sim: f64,
    pub margin: f64,
    pub retrieval_acc: f64,
}

/// In-batch similarity statistics of pooled `h` and `g` over unshuffled
/// batches of `entries`, weighted by batch size. Off-diagonal means come
/// from batches with at least two rows.
pub fn alignment_summary(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocab,
    entries: &[Entry],
    batch_size: usize,
    pooling: PoolKind,
    occurrence: TargetOccurrence,
) -> Result<AlignmentSummary, TrainError> {
    if entries.is_empty() {
        return Err(TrainError::EmptyData("alignment"));
    }
    let (mut diag, mut off, mut acc) = (0.0, 0.0, 0.0);
    let (mut n, mut n_off) = (0usize, 0usize);
    for b in make_batches(entries, vocab, batch_size, None, occurrence) {
        let tape = Tape::new();
        let m = params.bind_frozen(&tape, cfg);
        let src = SeqView::new(&b.encoder_ids, &b.encoder_mask, b.size, b.src_len);
        let tgt = SeqView::new(&b.decoder_in, &b.decoder_mask, b.size, b.tgt_len);
        let enc = model::encode(&tape, &m, cfg, src, None)?;
        let dec = model::decode_teacher_forced(&tape, &m, cfg, enc, &b.encoder_mask, tgt, None)?;
        let (h, g) = pooled_representations(&tape, enc, &b.target_rows(), dec, &b.decoder_rows(), pooling)?;
        let d = Diagnostics::from_pooled(&tape.value(h), &tape.value(g), b.duplicate_target_rate())?;
        let w = b.size as f64;
        diag += w * d.diag_mean_sim;
        acc += w * d.retrieval_acc;
        n += b.size;
        if b.size > 1 {
            off += w * d.offdiag_mean_sim;
            n_off += b.size;
        }
    }
    let diag_mean_sim = diag / n as f64;
    let offdiag_mean_sim = if n_off == 0 { 0.0 } else { off / n_off as f64 };
    Ok(AlignmentSummary {
        diag_mean_sim,
        offdiag_mean_sim,
        margin: diag_mean_sim - offdiag_mean_sim,
        retrieval_acc: acc / n as f64,
    })
}

/// Greedy corpus BLEU of `params` on `entries`.
pub fn split_bleu(
    params: &ModelParams,
    run: &RunConfig,
    vocab: &Vocab,
    entries: &[Entry],
) -> Result<f64, TrainError> {
    Ok(evaluate_split(params, &run.model, vocab, entries, run.target_occurrence, &run.decode)?.0.bleu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::demo;

    fn tiny() -> (Vec<Entry>, Vec<Entry>, Vocab, RunConfig) {
        let c = demo::generate();
        let to = |rs: &[demo::DemoRecord]| -> Vec<Entry> {
            rs.iter().map(|r| Entry::from_text(&r.word, &r.context, &r.definition).unwrap()).collect()
        };
        let train = to(&c.train[..12]);
        let valid = to(&c.valid[..6]);
        let vocab = Vocab::build(&train, 1, 10_000).unwrap();
        let mut run = RunConfig::demo(vocab.len());
        run.model = ModelConfig::toy(vocab.len());
        run.batch_size = 4;
        run.stage1 = StageConfig::one(3, 3);
        run.stage2 = StageConfig::two(3, 3, StagePooling::Max, 0.0);
        (train, valid, vocab, run)
    }

    fn fingerprint(p: &ModelParams) -> Vec<u64> {
        p.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
    }

    fn trajectory(run: &RunConfig, stage: &StageConfig, data: &TrainData<'_>) -> (Vec<Vec<u64>>, StageOutcome) {
        let p = ModelParams::init(&run.model, init_seed(run.seed)).unwrap();
        let mut seen = Vec::new();
        let out = train_stage(p, run, stage, data, None, &mut |e| {
            if let TrainEvent::Step { params, .. } = e {
                seen.push(fingerprint(params));
            }
        })
        .unwrap();
        (seen, out)
    }

    #[test]
    fn zero_lambda_matches_generation_training_bitwise() {
        let (train, valid, vocab, mut run) = tiny();
        run.model.dropout = 0.1;
        let data = TrainData { vocab: &vocab, train: &train, valid: &valid };
        let (a, oa) = trajectory(&run, &run.stage1, &data);
        let (b, ob) = trajectory(&run, &run.stage2, &data);
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
        assert_eq!(fingerprint(&oa.best.params), fingerprint(&ob.best.params));
        let scores = |o: &StageOutcome| o.log.iter().map(|l| l.valid_score.to_bits()).collect::<Vec<_>>();
        assert_eq!(scores(&oa), scores(&ob));
    }

    #[test]
    fn reruns_are_identical_and_seeds_matter() {
        let (train, valid, vocab, mut run) = tiny();
        let data = TrainData { vocab: &vocab, train: &train, valid: &valid };
        let (a, _) = trajectory(&run, &run.stage1, &data);
        let (b, _) = trajectory(&run, &run.stage1, &data);
        assert_eq!(a, b);
        run.seed = 1;
        let (c, _) = trajectory(&run, &run.stage1, &data);
        assert_ne!(a, c);
    }

    #[test]
    fn patience_zero_stops_after_first_non_improvement() {
        let (train, valid, vocab, mut run) = tiny();
        let data = TrainData { vocab: &vocab, train: &train, valid: &valid };
        // A huge step size makes validation loss worsen quickly.
        run.optimizer.lr = 0.5;
        run.optimizer.clip_norm = None;
        let stage = StageConfig::one(20, 0);
        let p = ModelParams::init(&run.model, 0).unwrap();
        let out = train_stage(p, &run, &stage, &data, None, &mut |_| {}).unwrap();
        let first_bad = out.log.iter().position(|l| !l.improved).expect("some epoch fails to improve");
        assert_eq!(out.log.len(), first_bad + 1);
        assert!(out.stopped_early);
        let best_epoch = out.log.iter().rposition(|l| l.improved).unwrap() + 1;
        assert_eq!(out.best.state.epoch, best_epoch);
        assert_ne!(fingerprint(&out.best.params), fingerprint(&out.last.params));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (train, valid, vocab, run) = tiny();
        let p = ModelParams::init(&run.model, 0).unwrap();
        let data = TrainData { vocab: &vocab, train: &train, valid: &[] };
        assert!(matches!(
            train_stage(p.clone(), &run, &run.stage1, &data, None, &mut |_| {}),
            Err(TrainError::EmptyData("validation"))
        ));
        let data = TrainData { vocab: &vocab, train: &train, valid: &valid };
        let mut bad = run.stage1;
        bad.lambda = 0.3;
        assert!(matches!(train_stage(p, &run, &bad, &data, None, &mut |_| {}), Err(TrainError::InvalidStage(_))));
    }

    #[test]
    fn one_stage_budget_and_alignment() {
        let (train, _, vocab, run) = tiny();
        let s = run.one_stage_config();
        assert_eq!((s.max_epoch, s.early_stop_patience, s.stage), (6, 3, StageKind::Two));
        let p = ModelParams::init(&run.model, 0).unwrap();
        let a = alignment_summary(&p, &run.model, &vocab, &train, 4, PoolKind::Max, TargetOccurrence::Context).unwrap();
        assert!((a.margin - (a.diag_mean_sim - a.offdiag_mean_sim)).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&a.retrieval_acc));
    }
}
