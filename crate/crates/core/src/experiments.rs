//! Canned ablations: pooling, λ, batch size and one- versus two-stage
//! training, each arm scored by test BLEU and NIST.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{Entry, Vocab};
use crate::decode::{evaluate_split, MetricReport};
use crate::model::ModelParams;
use crate::training::{
    init_seed, train_one_stage, train_stage, RunConfig, StageOutcome, StagePooling, TrainData, TrainError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Pooling,
    Lambda,
    BatchSize,
    Stages,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pooling" => Ok(Self::Pooling),
            "lambda" => Ok(Self::Lambda),
            "batch-size" => Ok(Self::BatchSize),
            "stages" => Ok(Self::Stages),
            other => Err(format!("unknown axis {other:?}; expected pooling, lambda, batch-size or stages")),
        }
    }
}

pub const LAMBDAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const BATCH_SIZES: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    One,
    Two,
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub run: RunConfig,
    pub schedule: Schedule,
}

impl AblationAxis {
    pub fn arms(self, base: &RunConfig) -> Vec<Arm> {
        let two = |label: String, run: RunConfig| Arm { label, run, schedule: Schedule::Two };
        match self {
            Self::Pooling => [("max", StagePooling::Max), ("mean", StagePooling::Mean)]
                .into_iter()
                .map(|(name, p)| {
                    let mut run = base.clone();
                    run.stage2.pooling = p;
                    two(format!("pooling={name}"), run)
                })
                .collect(),
            Self::Lambda => LAMBDAS
                .iter()
                .map(|&l| {
                    let mut run = base.clone();
                    run.stage2.lambda = l;
                    two(format!("lambda={l:.1}"), run)
                })
                .collect(),
            Self::BatchSize => BATCH_SIZES
                .iter()
                .map(|&b| {
                    let mut run = base.clone();
                    run.batch_size = b;
                    two(format!("batch_size={b}"), run)
                })
                .collect(),
            Self::Stages => vec![
                Arm { label: "one-stage".into(), run: base.clone(), schedule: Schedule::One },
                two("two-stage".into(), base.clone()),
            ],
        }
    }
}

pub struct Splits<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [Entry],
    pub valid: &'a [Entry],
    pub test: &'a [Entry],
}

/// Stage-one results keyed by everything stage one depends on, so sweeps
/// that only vary stage two share them.
#[derive(Default)]
pub struct Stage1Cache {
    runs: HashMap<String, StageOutcome>,
}

impl Stage1Cache {
    fn key(run: &RunConfig) -> String {
        serde_json::to_string(&(
            &run.model,
            &run.stage1,
            &run.optimizer,
            run.batch_size,
            run.seed,
            &run.monitor,
            &run.target_occurrence,
            &run.decode,
        ))
        .expect("config serializes")
    }

    pub fn get_or_train(&mut self, run: &RunConfig, data: &TrainData<'_>) -> Result<&StageOutcome, TrainError> {
        let key = Self::key(run);
        if !self.runs.contains_key(&key) {
            let params = ModelParams::init(&run.model, init_seed(run.seed))?;
            let out = train_stage(params, run, &run.stage1, data, None, &mut |_| {})?;
            self.runs.insert(key.clone(), out);
        }
        Ok(&self.runs[&key])
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Trains `arm` with `seed` and returns its final parameters.
pub fn train_arm(arm: &Arm, seed: u64, splits: &Splits<'_>, cache: &mut Stage1Cache) -> Result<ModelParams, TrainError> {
    let mut run = arm.run.clone();
    run.seed = seed;
    let data = TrainData { vocab: splits.vocab, train: splits.train, valid: splits.valid };
    match arm.schedule {
        Schedule::One => Ok(train_one_stage(&run, &run.one_stage_config(), &data, &mut |_| {})?.best.params),
        Schedule::Two => {
            let s1 = cache.get_or_train(&run, &data)?;
            let carry = run.carry_optimizer.then(|| s1.best.state.adam.clone());
            let start = s1.best.params.clone();
            Ok(train_stage(start, &run, &run.stage2, &data, carry, &mut |_| {})?.best.params)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub bleu: f64,
    pub nist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub label: String,
    pub schedule: Schedule,
    /// `None` when every seed succeeded.
    pub error: Option<String>,
    pub seeds: Vec<SeedResult>,
    pub mean_bleu: Option<f64>,
    pub mean_nist: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub split: String,
    pub arms: Vec<ArmResult>,
}

fn test_report(params: &ModelParams, run: &RunConfig, splits: &Splits<'_>) -> Result<MetricReport, TrainError> {
    Ok(evaluate_split(params, &run.model, splits.vocab, splits.test, run.target_occurrence, &run.decode)?.0)
}

/// Runs every arm of `axis` for each seed. A failing arm is recorded and
/// the sweep moves on.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    seeds: &[u64],
    splits: &Splits<'_>,
    cache: &mut Stage1Cache,
    progress: &mut dyn FnMut(&str, u64),
) -> AblationTable {
    let arms = axis
        .arms(base)
        .into_iter()
        .map(|arm| {
            let mut results = Vec::new();
            let mut error = None;
            for &seed in seeds {
                progress(&arm.label, seed);
                let outcome = train_arm(&arm, seed, splits, cache).and_then(|p| test_report(&p, &arm.run, splits));
                match outcome {
                    Ok(r) => results.push(SeedResult { seed, bleu: r.bleu, nist: r.nist }),
                    Err(e) => {
                        error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            let mean = |f: fn(&SeedResult) -> f64| {
                (error.is_none() && !results.is_empty()).then(|| results.iter().map(f).sum::<f64>() / results.len() as f64)
            };
            ArmResult {
                mean_bleu: mean(|s| s.bleu),
                mean_nist: mean(|s| s.nist),
                label: arm.label,
                schedule: arm.schedule,
                error,
                seeds: results,
            }
        })
        .collect();
    AblationTable { axis, split: "test".into(), arms }
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let axis = serde_json::to_value(self.axis).expect("axis serializes");
        let _ = writeln!(s, "Ablation over {} ({} split)\n", axis.as_str().unwrap_or("?"), self.split);
        let _ = writeln!(s, "| arm | schedule | seeds | BLEU x100 | NIST | status |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for a in &self.arms {
            let fmt = |v: Option<f64>, k: f64| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * k));
            let schedule = if a.schedule == Schedule::One { "one" } else { "two" };
            let status = a.error.as_deref().unwrap_or("ok");
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                a.label,
                schedule,
                a.seeds.len(),
                fmt(a.mean_bleu, 100.0),
                fmt(a.mean_nist, 1.0),
                status.replace('|', "/")
            );
        }
        s
    }
}
