//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use contrastdef::checks::{run_all, CheckSettings};
use contrastdef::data::{demo, Entry, TargetOccurrence, Vocab};
use contrastdef::decode::{bleu_corpus, nist_corpus};
use contrastdef::experiments::{run_ablation, AblationAxis, Splits, Stage1Cache, BATCH_SIZES, LAMBDAS};
use contrastdef::model::{self, ModelConfig, ModelParams, SeqView};
use contrastdef::numerics::{PoolKind, Reduction, Tape, Tensor};
use contrastdef::objectives::contrastive_loss;
use contrastdef::training::{
    alignment_summary, init_seed, split_bleu, train_stage, RunConfig, StageConfig, StagePooling, TrainData, TrainEvent,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

struct Demo {
    vocab: Vocab,
    train: Vec<Entry>,
    valid: Vec<Entry>,
    test: Vec<Entry>,
}

fn demo_splits() -> Demo {
    let c = demo::generate();
    let to = |rs: &[demo::DemoRecord]| -> Vec<Entry> {
        rs.iter().map(|r| Entry::from_text(&r.word, &r.context, &r.definition).unwrap()).collect()
    };
    let train = to(&c.train);
    let vocab = Vocab::build(&train, 1, 10_000).unwrap();
    Demo { vocab, valid: to(&c.valid), test: to(&c.test), train }
}

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let results = run_all(&CheckSettings::default()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let worst_op = results
        .iter()
        .filter(|r| r.name != "full_mixed_loss")
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let full = results.iter().find(|r| r.name == "full_mixed_loss").ok_or("no full-loss check")?;
    for r in &results {
        check(r.passed, format!("{} max_rel_err {:.3e} above {:.0e}", r.name, r.max_rel_err, r.tolerance))?;
    }
    check(results.iter().all(|r| r.name == "full_mixed_loss" || r.tolerance <= 1e-6), "op tolerance looser than 1e-6".into())?;
    check(full.tolerance <= 1e-4 && full.coords_checked >= 200, format!("full check used {} coords", full.coords_checked))?;
    check(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} op checks, worst {worst_op:.2e}; full loss {:.2e} over {} coords; {secs:.2}s",
        results.len() - 1,
        full.max_rel_err,
        full.coords_checked
    ))
}

fn fingerprint(p: &ModelParams) -> Vec<u64> {
    p.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn lambda_zero_equivalence(d: &Demo) -> Outcome {
    let mut run = RunConfig::demo(d.vocab.len());
    run.model = ModelConfig { dropout: 0.1, ..ModelConfig::toy(d.vocab.len()) };
    run.batch_size = 8;
    let data = TrainData { vocab: &d.vocab, train: &d.train, valid: &d.valid };
    let trajectory = |stage: StageConfig| {
        let p = ModelParams::init(&run.model, init_seed(run.seed)).unwrap();
        let mut seen = Vec::new();
        let out = train_stage(p, &run, &stage, &data, None, &mut |e| {
            if let TrainEvent::Step { params, .. } = e {
                seen.push(fingerprint(params));
            }
        })
        .unwrap();
        (seen, out.log.len())
    };
    let (generation, epochs) = trajectory(StageConfig::one(3, 3));
    let (mixed, _) = trajectory(StageConfig::two(3, 3, StagePooling::Max, 0.0));
    check(epochs == 3, format!("ran {epochs} epochs"))?;
    check(generation.len() == mixed.len(), "step counts differ".into())?;
    let first_diff = generation.iter().zip(&mixed).position(|(a, b)| a != b);
    check(first_diff.is_none(), format!("trajectories diverge at step {}", first_diff.unwrap_or(0) + 1))?;
    Ok(format!("{} steps over 3 epochs bit-identical (dropout 0.1)", generation.len()))
}

fn loss_value(h: &Tensor, g: &Tensor, reduction: Reduction) -> f64 {
    let tape = Tape::new();
    let hv = tape.constant(h.clone());
    let gv = tape.constant(g.clone());
    let l = contrastive_loss(&tape, hv, gv, 0.1, reduction).unwrap();
    let v = tape.value(l).item();
    v
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn contrastive_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let one = loss_value(&random_matrix(&mut rng, 1, 6), &random_matrix(&mut rng, 1, 6), Reduction::Mean);
    check(one == 0.0, format!("N=1 gives {one:e}"))?;
    let mut worst_equal = 0.0f64;
    for n in 2..=16 {
        let row: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grow: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = Tensor::new(vec![n, 6], row.repeat(n)).unwrap();
        let g = Tensor::new(vec![n, 6], grow.repeat(n)).unwrap();
        worst_equal = worst_equal.max((loss_value(&h, &g, Reduction::Mean) - (n as f64).ln()).abs());
        worst_equal = worst_equal.max((loss_value(&h, &g, Reduction::Sum) / n as f64 - (n as f64).ln()).abs());
    }
    check(worst_equal <= 1e-12, format!("equal-similarity error {worst_equal:e}"))?;
    let mut worst_scale = 0.0f64;
    let mut permutation_exact = true;
    for trial in 0..50 {
        let n = 2 + trial % 9;
        let h = random_matrix(&mut rng, n, 5);
        let g = random_matrix(&mut rng, n, 5);
        let base = loss_value(&h, &g, Reduction::Mean);
        let mut scaled = h.clone();
        for r in 0..n {
            let c: f64 = rng.random_range(0.01..100.0);
            scaled.data_mut()[r * 5..(r + 1) * 5].iter_mut().for_each(|x| *x *= c);
        }
        worst_scale = worst_scale.max((loss_value(&scaled, &g, Reduction::Mean) - base).abs());
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |t: &Tensor| {
            Tensor::new(vec![n, 5], perm.iter().flat_map(|&p| t.row(p).to_vec()).collect()).unwrap()
        };
        for red in [Reduction::Mean, Reduction::Sum] {
            let a = loss_value(&h, &g, red);
            let b = loss_value(&permute(&h), &permute(&g), red);
            permutation_exact &= a.to_bits() == b.to_bits();
        }
    }
    check(worst_scale <= 1e-12, format!("rescaling error {worst_scale:e}"))?;
    check(permutation_exact, "joint permutation changed the loss".into())?;
    Ok(format!("N=1 exact 0; ln N error {worst_equal:.1e}; rescale error {worst_scale:.1e}; permutation exact"))
}

struct Trial {
    batch: usize,
    src_len: usize,
    tgt_len: usize,
    src: Vec<usize>,
    src_mask: Vec<bool>,
    tgt: Vec<usize>,
    tgt_mask: Vec<bool>,
}

fn random_trial(rng: &mut ChaCha8Rng, vocab: usize) -> Trial {
    let batch = rng.random_range(1..=3);
    let src_len = rng.random_range(2..=9);
    let tgt_len = rng.random_range(2..=9);
    let mut src_mask = Vec::new();
    let mut tgt_mask = Vec::new();
    for _ in 0..batch {
        let s = rng.random_range(1..=src_len);
        let t = rng.random_range(1..=tgt_len);
        src_mask.extend((0..src_len).map(|i| i < s));
        tgt_mask.extend((0..tgt_len).map(|i| i < t));
    }
    let mut ids = |n: usize| (0..n).map(|_| rng.random_range(4..vocab)).collect::<Vec<_>>();
    Trial {
        batch,
        src_len,
        tgt_len,
        src: ids(batch * src_len),
        tgt: ids(batch * tgt_len),
        src_mask,
        tgt_mask,
    }
}

/// Decoder logits `[batch * tgt_len, vocab]` and encoder states for a trial.
fn forward(params: &ModelParams, cfg: &ModelConfig, t: &Trial, src: &[usize], tgt: &[usize]) -> (Vec<u64>, Vec<u64>, usize) {
    let tape = Tape::new();
    let m = params.bind_frozen(&tape, cfg);
    let h = model::encode(&tape, &m, cfg, SeqView::new(src, &t.src_mask, t.batch, t.src_len), None).unwrap();
    let g = model::decode_teacher_forced(&tape, &m, cfg, h, &t.src_mask, SeqView::new(tgt, &t.tgt_mask, t.batch, t.tgt_len), None)
        .unwrap();
    let logits = model::lm_head(&tape, &m, g).unwrap();
    let bits = |v| tape.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
    (bits(h), bits(logits), cfg.vocab_size)
}

fn causality_and_padding() -> Outcome {
    let cfg = ModelConfig { encoder_layers: 2, decoder_layers: 2, d_model: 16, n_heads: 4, d_ff: 32, ..ModelConfig::toy(23) };
    let params = ModelParams::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut causal_rows, mut pad_rows) = (0usize, 0usize);
    for trial in 0..100 {
        let t = random_trial(&mut rng, cfg.vocab_size);
        let (_, base, v) = forward(&params, &cfg, &t, &t.src, &t.tgt);

        let cut = rng.random_range(0..t.tgt_len);
        let mut tgt = t.tgt.clone();
        for b in 0..t.batch {
            for i in cut..t.tgt_len {
                tgt[b * t.tgt_len + i] = rng.random_range(4..cfg.vocab_size);
            }
        }
        let (_, moved, _) = forward(&params, &cfg, &t, &t.src, &tgt);
        for b in 0..t.batch {
            for i in 0..cut {
                let r = (b * t.tgt_len + i) * v;
                check(base[r..r + v] == moved[r..r + v], format!("trial {trial}: position {i} saw a later token"))?;
                causal_rows += 1;
            }
        }

        let mut src = t.src.clone();
        let mut tgt = t.tgt.clone();
        for (x, &m) in src.iter_mut().zip(&t.src_mask).chain(tgt.iter_mut().zip(&t.tgt_mask)) {
            if !m {
                *x = rng.random_range(0..cfg.vocab_size);
            }
        }
        let (h0, _, _) = forward(&params, &cfg, &t, &t.src, &t.tgt);
        let (h1, padded, _) = forward(&params, &cfg, &t, &src, &tgt);
        let d = cfg.d_model;
        for (row, &m) in t.src_mask.iter().enumerate() {
            if m {
                check(h0[row * d..(row + 1) * d] == h1[row * d..(row + 1) * d], format!("trial {trial}: encoder row {row} saw padding"))?;
            }
        }
        for (row, &m) in t.tgt_mask.iter().enumerate() {
            if m {
                check(base[row * v..(row + 1) * v] == padded[row * v..(row + 1) * v], format!("trial {trial}: decoder row {row} saw padding"))?;
                pad_rows += 1;
            }
        }
    }
    Ok(format!("100 trials; {causal_rows} prefix rows and {pad_rows} non-pad rows bitwise unchanged"))
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Clipped n-gram matches and hypothesis n-gram count by direct scanning.
fn brute_force(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        if h.len() < n {
            continue;
        }
        let grams: Vec<&[String]> = h.windows(n).collect();
        total += grams.len();
        let mut done: Vec<&[String]> = Vec::new();
        for g in &grams {
            if done.contains(g) {
                continue;
            }
            done.push(g);
            let in_hyp = grams.iter().filter(|x| x == &g).count();
            let in_ref = if r.len() < n { 0 } else { r.windows(n).filter(|x| x == g).count() };
            matched += in_hyp.min(in_ref);
        }
    }
    (matched, total)
}

fn metric_oracles() -> Outcome {
    let refs: Vec<Vec<String>> = [
        "a small flying mammal active at night",
        "land beside the river",
        "a pot for boiling water",
        "the season that follows the winter months",
        "an instrument showing the direction of north",
    ]
    .iter()
    .map(|s| toks(s))
    .collect();
    let hyps: Vec<Vec<String>> = [
        "a small flying mammal of the night",
        "the sloping land beside a river",
        "a pot for boiling water",
        "the season after winter",
        "a tool that shows direction",
    ]
    .iter()
    .map(|s| toks(s))
    .collect();
    let same = bleu_corpus(&refs, &refs, 4).map_err(|e| e.to_string())?.bleu;
    check(same == 1.0, format!("BLEU(refs, refs) = {same}"))?;

    let vignette_h = vec![toks("the the the the the the the"), toks("the cat sat on the mat")];
    let vignette_r = vec![toks("the cat is on the mat"), toks("there is a cat on the mat")];
    let mut worst = 0.0f64;
    for (h, r) in [(&vignette_h, &vignette_r), (&hyps, &refs)] {
        let rep = bleu_corpus(h, r, 4).map_err(|e| e.to_string())?;
        for n in 1..=4 {
            let (m, t) = brute_force(h, r, n);
            check(rep.matches[n - 1] == m && rep.totals[n - 1] == t, format!("order {n}: counts differ from oracle"))?;
            worst = worst.max((rep.precisions[n - 1] - m as f64 / t as f64).abs());
        }
    }
    // hand count: 'the' is clipped to 2 in the first pair
    let rep = bleu_corpus(&vignette_h[..1], &vignette_r[..1], 4).map_err(|e| e.to_string())?;
    check((rep.precisions[0] - 2.0 / 7.0).abs() <= 1e-12, format!("unigram precision {}", rep.precisions[0]))?;
    check(worst <= 1e-12, format!("precision error {worst:e}"))?;

    let nist = nist_corpus(&hyps, &refs, 5).map_err(|e| e.to_string())?.nist;
    let reference = 3.0831264601601642;
    check((nist - reference).abs() <= 1e-6, format!("NIST {nist} vs reference {reference}"))?;
    Ok(format!("BLEU identity 1.0; oracle precision error {worst:.1e}; NIST {nist:.10} (reference {reference:.10})"))
}

struct SeedStats {
    s1_bleu: f64,
    s2_bleu: f64,
    s1_diag: f64,
    s2_diag: f64,
    s2_margin: f64,
    s1_acc: f64,
    s2_acc: f64,
}

fn two_stage_behaviour(d: &Demo, cache: &mut Stage1Cache) -> Outcome {
    let started = Instant::now();
    let base = RunConfig::demo(d.vocab.len());
    check(
        base.model.encoder_layers == 2 && base.model.decoder_layers == 2 && base.model.d_model == 64,
        "demo model is not 2-layer width 64".into(),
    )?;
    check(base.stage2.lambda == 0.8 && base.stage2.pooling == StagePooling::Max, "stage two is not lambda 0.8 max".into())?;
    let data = TrainData { vocab: &d.vocab, train: &d.train, valid: &d.valid };
    let mut stats = Vec::new();
    for seed in 0..3 {
        let run = RunConfig { seed, ..base.clone() };
        let s1 = cache.get_or_train(&run, &data).map_err(|e| e.to_string())?.best.params.clone();
        let s2 = train_stage(s1.clone(), &run, &run.stage2, &data, None, &mut |_| {}).map_err(|e| e.to_string())?.best.params;
        let align = |p: &ModelParams| {
            alignment_summary(p, &run.model, &d.vocab, &d.train, run.batch_size, PoolKind::Max, TargetOccurrence::Context)
                .map_err(|e| e.to_string())
        };
        let (a1, a2) = (align(&s1)?, align(&s2)?);
        let bleu = |p: &ModelParams| split_bleu(p, &run, &d.vocab, &d.train).map_err(|e| e.to_string());
        stats.push(SeedStats {
            s1_bleu: bleu(&s1)?,
            s2_bleu: bleu(&s2)?,
            s1_diag: a1.diag_mean_sim,
            s2_diag: a2.diag_mean_sim,
            s2_margin: a2.margin,
            s1_acc: a1.retrieval_acc,
            s2_acc: a2.retrieval_acc,
        });
    }
    let mean = |f: fn(&SeedStats) -> f64| stats.iter().map(f).sum::<f64>() / stats.len() as f64;
    let (b1, b2) = (mean(|s| s.s1_bleu), mean(|s| s.s2_bleu));
    let (d1, d2) = (mean(|s| s.s1_diag), mean(|s| s.s2_diag));
    let margin = mean(|s| s.s2_margin);
    let (r1, r2) = (mean(|s| s.s1_acc), mean(|s| s.s2_acc));
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "train BLEU {b1:.3} -> {b2:.3}; diag sim {d1:.3} -> {d2:.3}; margin {margin:.3}; retrieval {r1:.3} -> {r2:.3}; {secs:.0}s"
    );
    check(b1 >= 0.95, format!("stage-1 train BLEU {b1:.3} below 0.95 ({detail})"))?;
    check(b2 >= 0.90, format!("stage-2 train BLEU {b2:.3} below 0.90 ({detail})"))?;
    check(d2 > d1, format!("diagonal similarity did not rise ({detail})"))?;
    check(margin >= 0.2, format!("margin {margin:.3} below 0.2 ({detail})"))?;
    check(r2 > r1, format!("retrieval accuracy did not rise ({detail})"))?;
    check(secs < 900.0, format!("took {secs:.0}s"))?;
    Ok(detail)
}

fn ablation_completeness(d: &Demo, cache: &mut Stage1Cache) -> Outcome {
    let started = Instant::now();
    let base = RunConfig::demo(d.vocab.len());
    let splits = Splits { vocab: &d.vocab, train: &d.train, valid: &d.valid, test: &d.test };
    let seeds = [0, 1, 2];
    let expected = [
        (AblationAxis::Pooling, 2),
        (AblationAxis::Lambda, LAMBDAS.len()),
        (AblationAxis::BatchSize, BATCH_SIZES.len()),
        (AblationAxis::Stages, 2),
    ];
    let mut lambda_bleu = (f64::NAN, f64::NAN);
    for (axis, arms) in expected {
        let table = run_ablation(&base, axis, &seeds, &splits, cache, &mut |_, _| {});
        check(table.arms.len() == arms, format!("{axis:?}: {} arms, expected {arms}", table.arms.len()))?;
        for arm in &table.arms {
            check(arm.error.is_none(), format!("{}: {}", arm.label, arm.error.clone().unwrap_or_default()))?;
            check(arm.seeds.len() == seeds.len() && arm.mean_bleu.is_some(), format!("{}: incomplete", arm.label))?;
        }
        let md = table.to_markdown();
        let rows = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| arm")).count();
        check(rows == arms && md.contains("| arm | schedule |"), format!("{axis:?}: malformed table"))?;
        serde_json::to_string(&table).map_err(|e| e.to_string())?;
        if axis == AblationAxis::Lambda {
            let get = |label: &str| table.arms.iter().find(|a| a.label == label).and_then(|a| a.mean_bleu);
            lambda_bleu = (get("lambda=0.8").ok_or("no lambda=0.8 arm")?, get("lambda=1.0").ok_or("no lambda=1.0 arm")?);
        }
    }
    let (at08, at10) = lambda_bleu;
    check(at10 < at08, format!("test BLEU at lambda 1.0 ({at10:.4}) not below lambda 0.8 ({at08:.4})"))?;
    Ok(format!(
        "4 axes, 14 arms x 3 seeds complete; test BLEU lambda=0.8 {at08:.4} > lambda=1.0 {at10:.4}; {:.0}s",
        started.elapsed().as_secs_f64()
    ))
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    match outcome {
        Ok(detail) => {
            println!("PASS [{id}] {name}: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL [{id}] {name}: {why}");
            false
        }
    }
}

fn main() {
    let d = demo_splits();
    let mut cache = Stage1Cache::default();
    let results = [
        report(1, "gradient integrity", gradient_integrity),
        report(2, "lambda=0 equivalence", || lambda_zero_equivalence(&d)),
        report(3, "contrastive closed forms", contrastive_closed_forms),
        report(4, "causality and pad invariance", causality_and_padding),
        report(5, "two-stage behaviour", || two_stage_behaviour(&d, &mut cache)),
        report(6, "metric oracles", metric_oracles),
        report(7, "ablation harness", || ablation_completeness(&d, &mut cache)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
