//! Finite-difference checks of every tape op and of the full mixed loss on
//! a small model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{demo, make_batches, Entry, TargetOccurrence, Vocab};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::gradcheck::{finite_diff_check, GradCheckOptions};
use crate::numerics::{AttentionLayout, NumericsError, PoolKind, Reduction, Tape, TapeOptions, Tensor, Var};
use crate::objectives::{batch_objective, contrastive_loss, ContrastiveConfig, ObjectiveConfig, ObjectiveError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub op_tolerance: f64,
    pub loss_tolerance: f64,
    /// Coordinates sampled for the full-model check.
    pub loss_coords: usize,
    /// Scale every matmul's left-operand gradient by 1.5.
    pub corrupt: bool,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { op_tolerance: 1e-6, loss_tolerance: 1e-4, loss_coords: 256, corrupt: false, seed: 0 }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

/// Reduces any output to a scalar through a fixed random projection and a
/// nonlinearity, so every output coordinate gets a distinct weight.
fn probe(tape: &Tape, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let cols = tape.value(out).cols();
    let w = randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37), &[cols, 3], 1.0);
    let w = tape.constant(w);
    let p = tape.matmul(out, w)?;
    tape.sum(tape.gelu(p)?)
}

type OpFn = Box<dyn Fn(&Tape, &[Var]) -> Result<Var, NumericsError>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| randn(&mut rng, shape, 1.0);
    let key_mask = vec![true, true, true, false, true, true, false, false];
    let layout = move |causal: bool| AttentionLayout { batch: 2, q_len: 3, k_len: 4, heads: 2, causal, key_mask: key_mask.clone() };
    let self_layout = AttentionLayout { batch: 2, q_len: 4, k_len: 4, heads: 2, causal: true, key_mask: vec![true; 8] };
    let s = seed;
    vec![
        ("matmul", vec![r(&[2, 3, 4]), r(&[4, 5])], Box::new(move |t, v| probe(t, t.matmul(v[0], v[1])?, s))),
        ("matmul_nt", vec![r(&[3, 4]), r(&[5, 4])], Box::new(move |t, v| probe(t, t.matmul_nt(v[0], v[1])?, s))),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(move |t, v| probe(t, t.add(v[0], v[1])?, s))),
        ("add_row", vec![r(&[2, 3, 4]), r(&[4])], Box::new(move |t, v| probe(t, t.add_row(v[0], v[1])?, s))),
        ("scale", vec![r(&[3, 4])], Box::new(move |t, v| probe(t, t.scale(v[0], -0.7)?, s))),
        (
            "div_scalar",
            vec![r(&[3, 4]), Tensor::scalar(1.7)],
            Box::new(move |t, v| probe(t, t.div_scalar(v[0], v[1])?, s)),
        ),
        ("gelu", vec![r(&[3, 4])], Box::new(move |t, v| probe(t, t.gelu(v[0])?, s))),
        (
            "layer_norm",
            vec![r(&[2, 3, 4]), r(&[4]), r(&[4])],
            Box::new(move |t, v| probe(t, t.layer_norm(v[0], v[1], v[2], 1e-5)?, s)),
        ),
        ("embed", vec![r(&[7, 4])], Box::new(move |t, v| probe(t, t.embed(v[0], &[1, 3, 3, 6, 0, 2], &[2, 3])?, s))),
        ("gather_rows", vec![r(&[5, 3])], Box::new(move |t, v| probe(t, t.gather_rows(v[0], &[4, 0, 4, 2])?, s))),
        ("reshape", vec![r(&[2, 6])], Box::new(move |t, v| probe(t, t.reshape(v[0], vec![3, 4])?, s))),
        ("softmax_rows", vec![r(&[3, 5])], Box::new(move |t, v| probe(t, t.softmax_rows(v[0])?, s))),
        (
            "dropout",
            vec![r(&[4, 5])],
            Box::new(move |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(s + 1);
                probe(t, t.dropout(v[0], 0.3, &mut rng)?, s)
            }),
        ),
        (
            "attention",
            vec![r(&[2, 3, 4]), r(&[2, 4, 4]), r(&[2, 4, 4])],
            Box::new(move |t, v| probe(t, t.attention(v[0], v[1], v[2], layout(false), None)?, s)),
        ),
        (
            "attention_causal_dropout",
            vec![r(&[2, 4, 4]), r(&[2, 4, 4]), r(&[2, 4, 4])],
            Box::new(move |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(s + 2);
                probe(t, t.attention(v[0], v[1], v[2], self_layout.clone(), Some((0.2, &mut rng)))?, s)
            }),
        ),
        (
            "cross_entropy",
            vec![r(&[2, 3, 7])],
            Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(6), Some(0), Some(3), None], Reduction::Mean)),
        ),
        ("normalize_rows", vec![r(&[3, 4])], Box::new(move |t, v| probe(t, t.normalize_rows(v[0])?, s))),
        (
            "pool_rows_max",
            vec![r(&[6, 4])],
            Box::new(move |t, v| probe(t, t.pool_rows(v[0], &[vec![0, 1, 2], vec![3], vec![4, 5]], PoolKind::Max)?, s)),
        ),
        (
            "pool_rows_mean",
            vec![r(&[6, 4])],
            Box::new(move |t, v| probe(t, t.pool_rows(v[0], &[vec![0, 1, 2], vec![3], vec![4, 5]], PoolKind::Mean)?, s)),
        ),
        ("sum", vec![r(&[3, 4])], Box::new(|t, v| t.sum(v[0]))),
        ("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], Box::new(move |t, v| probe(t, t.concat_rows(&[v[0], v[1]])?, s))),
    ]
}

fn result(name: &str, max_rel_err: f64, coords_checked: usize, tolerance: f64) -> CheckResult {
    CheckResult { name: name.into(), max_rel_err, coords_checked, tolerance, passed: max_rel_err <= tolerance }
}

fn options(settings: &CheckSettings, max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        max_coords,
        seed: settings.seed,
        tape: TapeOptions { corrupt_matmul_grad: settings.corrupt, ..TapeOptions::default() },
        ..GradCheckOptions::default()
    }
}

/// Runs every op check, the contrastive losses, and the full mixed loss of
/// the one-layer toy model.
pub fn run_all(settings: &CheckSettings) -> Result<Vec<CheckResult>, ObjectiveError> {
    run_all_with(settings, &ModelConfig::toy(0))
}

/// As [`run_all`], with the full-loss check on `model`. Its vocabulary size
/// is replaced by that of the four-entry check corpus.
pub fn run_all_with(settings: &CheckSettings, model: &ModelConfig) -> Result<Vec<CheckResult>, ObjectiveError> {
    let mut out = Vec::new();
    let opts = options(settings, None);
    for (name, params, f) in op_cases(settings.seed) {
        let rep = finite_diff_check(|t: &Tape, v: &[Var]| f(t, v), &params, &opts)?;
        out.push(result(name, rep.max_rel_err, rep.coords_checked, settings.op_tolerance));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x51);
    let h = randn(&mut rng, &[4, 5], 1.0);
    let g = randn(&mut rng, &[4, 5], 1.0);
    for (name, red) in [("contrastive_mean", Reduction::Mean), ("contrastive_sum", Reduction::Sum)] {
        let rep = finite_diff_check(
            |t: &Tape, v: &[Var]| contrastive_loss(t, v[0], v[1], 0.1, red),
            &[h.clone(), g.clone()],
            &opts,
        )?;
        out.push(result(name, rep.max_rel_err, rep.coords_checked, settings.op_tolerance));
    }

    let (cfg, params, batch) = toy_problem(model, settings.seed)?;
    let objective = ObjectiveConfig { lambda: 0.8, contrastive: Some(ContrastiveConfig::default()) };
    let rep = finite_diff_check(
        |t: &Tape, v: &[Var]| {
            let m = crate::model::BoundModel::from_vars(&cfg, v);
            batch_objective(t, &m, &cfg, &batch, &objective, None).map(|(l, _)| l)
        },
        params.tensors(),
        &options(settings, Some(settings.loss_coords)),
    )?;
    out.push(result("full_mixed_loss", rep.max_rel_err, rep.coords_checked, settings.loss_tolerance));
    Ok(out)
}

/// `model` over a batch of four demo entries.
fn toy_problem(model: &ModelConfig, seed: u64) -> Result<(ModelConfig, ModelParams, crate::data::Batch), ObjectiveError> {
    let corpus = demo::generate();
    let entries: Vec<Entry> = corpus.train[..4]
        .iter()
        .map(|r| Entry::from_text(&r.word, &r.context, &r.definition).expect("demo records are valid"))
        .collect();
    let vocab = Vocab::build(&entries, 1, 1000).expect("demo vocab");
    let cfg = ModelConfig { vocab_size: vocab.len(), ..model.clone() };
    cfg.validate()?;
    let params = ModelParams::init(&cfg, seed)?;
    let batch = make_batches(&entries, &vocab, 4, None, TargetOccurrence::Context).remove(0);
    Ok((cfg, params, batch))
}
