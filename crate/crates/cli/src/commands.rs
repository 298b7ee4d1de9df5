use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contrastdef::checks::{run_all_with, CheckSettings};
use contrastdef::data::{demo, DatasetFormat, Entry, SplitStats, Vocab};
use contrastdef::decode::{evaluate_split, generate_definitions, write_samples_tsv, DecodeConfig, DecodeError};
use contrastdef::experiments::{run_ablation, Splits, Stage1Cache};
use contrastdef::model::{ModelConfig, ModelParams};
use contrastdef::numerics::{PoolKind, Reduction};
use contrastdef::training::{
    alignment_summary, decode_checkpoint, init_seed, save_checkpoint, train_stage, AdamConfig, Checkpoint, RunConfig,
    StageConfig, StageKind, TrainData, TrainError, TrainEvent,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::inputs::{
    entries_to_jsonl, infer_format, is_stdin, load_config, load_entries, load_vocab, parse_entries, parse_queries,
    read_bytes, read_text,
};
use crate::manifest::{InputFile, Run};
use crate::{
    AblateArgs, CheckFailed, DecodeArgs, EvaluateArgs, GenerateArgs, GradcheckArgs, InputError, PrepareArgs, StageArg,
    TrainArgs,
};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Serialize)]
struct PrepareConfig<'a> {
    source: String,
    format: Option<DatasetFormat>,
    strict: bool,
    min_freq: usize,
    max_vocab: usize,
    split_seed: u64,
    preset: &'a str,
}

#[derive(Serialize)]
struct PrepareStats {
    train: SplitStats,
    valid: SplitStats,
    test: SplitStats,
    vocab_size: usize,
    rejected: usize,
}

/// Splits one file 80/10/10 by sorting records on a seeded hash of their index.
fn split_file(entries: Vec<Entry>, seed: u64) -> [Vec<Entry>; 3] {
    let n = entries.len();
    let mut keyed: Vec<([u8; 32], Entry)> = entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update((i as u64).to_le_bytes());
            (h.finalize().into(), e)
        })
        .collect();
    keyed.sort_by_key(|a| a.0);
    let n_valid = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    let n_train = n.saturating_sub(n_valid + n_test);
    let mut it = keyed.into_iter().map(|(_, e)| e);
    let train = it.by_ref().take(n_train).collect();
    let valid = it.by_ref().take(n_valid).collect();
    [train, valid, it.collect()]
}

fn find_split(dir: &Path, name: &str, format: Option<DatasetFormat>) -> Result<PathBuf> {
    let exts: Vec<&str> = match format {
        Some(f) => vec![f.extension()],
        None => vec!["tsv", "jsonl"],
    };
    exts.iter()
        .map(|e| dir.join(format!("{name}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| InputError(format!("{} has no {name}.{} file", dir.display(), exts.join(" or ."))).into())
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let preset = a.preset.clone().unwrap_or_else(|| if a.demo_data { "demo".into() } else { "oxford".into() });
    if preset != "demo" && StageConfig::preset(&preset).is_none() {
        return Err(InputError(format!("unknown preset {preset:?}; expected demo, wordnet, oxford or urban")).into());
    }
    let mut inputs = Vec::new();
    let mut rejected = Vec::new();
    let mut collect = |label: &str, text: &str, format: DatasetFormat| -> Result<Vec<Entry>> {
        let (entries, rej) = parse_entries(label, text, format, a.strict)?;
        rejected.extend(rej);
        Ok(entries)
    };
    let [train, valid, test] = if a.demo_data {
        let c = demo::generate();
        [
            collect("train", &demo::tsv(&c.train), DatasetFormat::Tsv)?,
            collect("valid", &demo::tsv(&c.valid), DatasetFormat::Tsv)?,
            collect("test", &demo::tsv(&c.test), DatasetFormat::Tsv)?,
        ]
    } else {
        let data = a.data.as_deref().expect("clap requires --data without --demo-data");
        if data.is_dir() {
            let mut out = Vec::new();
            for name in SPLITS {
                let path = find_split(data, name, a.format)?;
                let bytes = read_bytes(&path)?;
                inputs.push(InputFile::new(&path, &bytes));
                let text = String::from_utf8_lossy(&bytes);
                out.push(collect(name, &text, infer_format(&path, a.format))?);
            }
            out.try_into().expect("three splits")
        } else {
            let bytes = read_bytes(data)?;
            inputs.push(InputFile::new(data, &bytes));
            let text = String::from_utf8_lossy(&bytes);
            let all = collect("data", &text, infer_format(data, a.format))?;
            if all.len() < 3 {
                return Err(InputError(format!("{} has {} usable records; need at least 3 to split", data.display(), all.len())).into());
            }
            split_file(all, a.split_seed)
        }
    };
    for (name, split) in SPLITS.iter().zip([&train, &valid, &test]) {
        if split.is_empty() {
            return Err(TrainError::EmptyData(name).into());
        }
    }
    let vocab = Vocab::build(&train, a.min_freq, a.max_vocab)?;

    let config = PrepareConfig {
        source: if a.demo_data { "demo".into() } else { a.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default() },
        format: a.format,
        strict: a.strict,
        min_freq: a.min_freq,
        max_vocab: a.max_vocab,
        split_seed: a.split_seed,
        preset: &preset,
    };
    let mut run = Run::create("prepare", a.out.as_deref(), &config, None, inputs)?;
    std::fs::create_dir_all(run.dir.join("splits"))?;
    for (name, split) in SPLITS.iter().zip([&train, &valid, &test]) {
        run.write(&format!("splits/{name}.jsonl"), entries_to_jsonl(split))?;
    }
    run.write("vocab.txt", vocab.to_text())?;
    if !rejected.is_empty() {
        run.write("rejected.tsv", rejected.iter().map(|r| format!("{r}\n")).collect::<String>())?;
    }
    let stats = PrepareStats {
        train: SplitStats::of(&train),
        valid: SplitStats::of(&valid),
        test: SplitStats::of(&test),
        vocab_size: vocab.len(),
        rejected: rejected.len(),
    };
    run.write_json("stats.json", &stats)?;

    let mut template = RunConfig::demo(vocab.len());
    if let Some((s1, s2)) = StageConfig::preset(&preset) {
        template.stage1 = s1;
        template.stage2 = s2;
        template.optimizer = AdamConfig::default();
    }
    template.paths.train = Some("splits/train.jsonl".into());
    template.paths.valid = Some("splits/valid.jsonl".into());
    template.paths.test = Some("splits/test.jsonl".into());
    template.paths.vocab = Some("vocab.txt".into());
    run.write_json("run.json", &template)?;

    for (name, s) in [("train", &stats.train), ("valid", &stats.valid), ("test", &stats.test)] {
        println!(
            "{name}: {} entries, {} distinct targets, mean context {:.2} tokens, mean definition {:.2} tokens",
            s.entries, s.distinct_targets, s.mean_context_len, s.mean_definition_len
        );
    }
    println!("vocab: {} tokens; rejected records: {}", vocab.len(), rejected.len());
    let dir = run.finish()?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Relative data paths in a config are relative to the config file.
fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        config_path.parent().unwrap_or(Path::new("")).join(p)
    } else {
        p.to_path_buf()
    }
}

fn required(config_path: &Path, p: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    p.as_deref()
        .map(|p| resolve(config_path, p))
        .ok_or_else(|| InputError(format!("{} sets no paths.{name}", config_path.display())).into())
}

struct Loaded {
    config: RunConfig,
    vocab: Vocab,
    train: Vec<Entry>,
    valid: Vec<Entry>,
    test: Option<Vec<Entry>>,
    inputs: Vec<InputFile>,
}

fn load_run(config_path: &Path, seed: Option<u64>, literal_sum: bool, need_test: bool) -> Result<Loaded> {
    let mut config = load_config(config_path)?;
    let mut inputs = vec![InputFile::new(config_path, read_text(config_path)?.as_bytes())];
    if let Some(s) = seed {
        config.seed = s;
    }
    if literal_sum {
        config.contrastive.reduction = Reduction::Sum;
    }
    let vocab = load_vocab(&mut inputs, &required(config_path, &config.paths.vocab, "vocab")?)?;
    if config.model.vocab_size == 0 {
        config.model.vocab_size = vocab.len();
    } else if config.model.vocab_size != vocab.len() {
        return Err(TrainError::ConfigMismatch(format!(
            "model.vocab_size is {} but the vocabulary has {} tokens",
            config.model.vocab_size,
            vocab.len()
        ))
        .into());
    }
    config.validate()?;
    let train = load_entries(&mut inputs, "train", &required(config_path, &config.paths.train, "train")?, None)?;
    let valid = load_entries(&mut inputs, "valid", &required(config_path, &config.paths.valid, "valid")?, None)?;
    let test = if need_test {
        Some(load_entries(&mut inputs, "test", &required(config_path, &config.paths.test, "test")?, None)?)
    } else {
        None
    };
    Ok(Loaded { config, vocab, train, valid, test, inputs })
}

#[derive(Serialize)]
struct TrainSummary {
    stage: StageConfig,
    best_epoch: usize,
    best_score: Option<f64>,
    epochs_run: usize,
    stopped_early: bool,
    valid_alignment: Option<contrastdef::training::AlignmentSummary>,
    best_checkpoint_sha256: String,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let Loaded { config, vocab, train, valid, mut inputs, .. } = load_run(&a.config, a.seed, a.literal_sum, false)?;
    let stage = match a.stage {
        StageArg::One => config.stage1,
        StageArg::Two => config.stage2,
        StageArg::OneShot => config.one_stage_config(),
    };
    if a.stage == StageArg::Two && a.init_from.is_none() {
        return Err(InputError("stage 2 needs --init-from <stage-1 checkpoint>".into()).into());
    }
    let init = match &a.init_from {
        Some(path) => {
            let bytes = read_bytes(path)?;
            inputs.push(InputFile::new(path, &bytes));
            let ckpt = decode_checkpoint(&bytes, Some(&config.model)).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.vocab != vocab.tokens() {
                return Err(TrainError::ConfigMismatch(format!("{} was trained with a different vocabulary", path.display())).into());
            }
            Some(ckpt)
        }
        None => None,
    };
    let name = match a.stage {
        StageArg::One => "train-stage1",
        StageArg::Two => "train-stage2",
        StageArg::OneShot => "train-one-shot",
    };
    let mut run = Run::create(name, a.out.as_deref(), &config, Some(config.seed), inputs)?;
    run.write_json("config.json", &config)?;

    let (params, optimizer) = match init {
        Some(c) => {
            let adam = config.carry_optimizer.then_some(c.state.adam);
            (c.params, adam)
        }
        None => (ModelParams::init(&config.model, init_seed(config.seed))?, None),
    };
    let mut steps = BufWriter::new(File::create(run.path("steps.jsonl"))?);
    let mut epochs = BufWriter::new(File::create(run.path("epochs.jsonl"))?);
    let mut write_err: Option<std::io::Error> = None;
    let data = TrainData { vocab: &vocab, train: &train, valid: &valid };
    let outcome = train_stage(params, &config, &stage, &data, optimizer, &mut |e| {
        let written = match e {
            TrainEvent::Step { log, .. } => writeln!(steps, "{}", serde_json::to_string(log).expect("log serializes")),
            TrainEvent::Epoch(log) => {
                eprintln!(
                    "epoch {:>3}  train L_Final {:.4}  valid {:.4}{}",
                    log.epoch,
                    log.train_lfinal,
                    log.valid_score,
                    if log.improved { "  *" } else { "" }
                );
                writeln!(epochs, "{}", serde_json::to_string(log).expect("log serializes"))
            }
        };
        if let Err(err) = written {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err).context("writing training logs");
    }
    steps.flush()?;
    epochs.flush()?;
    drop((steps, epochs));

    let checkpoint = |snap: &contrastdef::training::Snapshot| Checkpoint {
        model: config.model.clone(),
        stage,
        vocab: vocab.tokens().to_vec(),
        params: snap.params.clone(),
        state: snap.state.clone(),
    };
    let best_path = run.path("best.ckpt");
    save_checkpoint(&best_path, &checkpoint(&outcome.best))?;
    save_checkpoint(&run.path("last.ckpt"), &checkpoint(&outcome.last))?;
    let pooling = stage.pooling.kind().unwrap_or(PoolKind::Max);
    let valid_alignment = if stage.stage == StageKind::Two || stage.pooling.kind().is_some() {
        Some(alignment_summary(
            &outcome.best.params,
            &config.model,
            &vocab,
            &valid,
            config.batch_size,
            pooling,
            config.target_occurrence,
        )?)
    } else {
        None
    };
    let summary = TrainSummary {
        stage,
        best_epoch: outcome.best.state.epoch,
        best_score: outcome.best.state.best_score,
        epochs_run: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        valid_alignment,
        best_checkpoint_sha256: crate::manifest::sha256_hex(&std::fs::read(&best_path)?),
    };
    run.write_json("summary.json", &summary)?;
    println!(
        "{name}: best epoch {} of {} (valid {:?} {:.6}){}",
        summary.best_epoch,
        summary.epochs_run,
        config.monitor,
        summary.best_score.unwrap_or(f64::NAN),
        if summary.stopped_early { ", stopped early" } else { "" }
    );
    let dir = run.finish()?;
    println!("checkpoint {}", dir.join("best.ckpt").display());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(InputError("--seeds needs at least one seed".into()).into());
    }
    let Loaded { config, vocab, train, valid, test, inputs } = load_run(&a.config, None, a.literal_sum, true)?;
    let test = test.expect("test split requested");
    #[derive(Serialize)]
    struct AblateConfig<'a> {
        axis: contrastdef::experiments::AblationAxis,
        seeds: &'a [u64],
        base: &'a RunConfig,
    }
    let mut run = Run::create(
        "ablate",
        a.out.as_deref(),
        &AblateConfig { axis: a.axis, seeds: &a.seeds, base: &config },
        None,
        inputs,
    )?;
    let splits = Splits { vocab: &vocab, train: &train, valid: &valid, test: &test };
    let mut cache = Stage1Cache::default();
    let table = run_ablation(&config, a.axis, &a.seeds, &splits, &mut cache, &mut |label, seed| {
        eprintln!("arm {label} seed {seed}");
    });
    let md = table.to_markdown();
    run.write("ablation.md", &md)?;
    run.write_json("ablation.json", &table)?;
    print!("{md}");
    let failed = table.arms.iter().filter(|a| a.error.is_some()).count();
    let dir = run.finish()?;
    println!("wrote {}", dir.display());
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} arm(s) failed; see ablation.md")).into());
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let settings = CheckSettings {
        op_tolerance: a.tolerance,
        loss_tolerance: a.loss_tolerance,
        loss_coords: a.coords,
        corrupt: a.corrupt_gradients,
        seed: a.seed,
    };
    let model = match &a.config {
        Some(p) => load_config(p)?.model,
        None => ModelConfig::toy(0),
    };
    let results = run_all_with(&settings, &model)?;
    for r in &results {
        println!(
            "{} {:<26} max_rel_err {:.3e}  coords {:>4}  tolerance {:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.coords_checked,
            r.tolerance
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

struct Decoder {
    checkpoint: Checkpoint,
    vocab: Vocab,
    decode: DecodeConfig,
    text: String,
    format: DatasetFormat,
    inputs: Vec<InputFile>,
}

fn open_decoder(a: &DecodeArgs) -> Result<Decoder> {
    let decode = match a.beam {
        Some(n) => DecodeConfig { max_decode_len: a.max_len, length_penalty: a.length_penalty, ..DecodeConfig::beam(n) },
        None => DecodeConfig { max_decode_len: a.max_len, length_penalty: a.length_penalty, ..DecodeConfig::greedy() },
    };
    decode.validate()?;
    let bytes = read_bytes(&a.checkpoint)?;
    let mut inputs = vec![InputFile::new(&a.checkpoint, &bytes)];
    let checkpoint = decode_checkpoint(&bytes, None).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let vocab = Vocab::from_tokens(checkpoint.vocab.clone())?;
    let data = read_bytes(&a.data)?;
    inputs.push(InputFile::new(&a.data, &data));
    let text = String::from_utf8(data).map_err(|_| InputError(format!("{} is not valid UTF-8", a.data.display())))?;
    let format = if is_stdin(&a.data) { a.format.unwrap_or(DatasetFormat::Tsv) } else { infer_format(&a.data, a.format) };
    Ok(Decoder { checkpoint, vocab, decode, text, format, inputs })
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let d = open_decoder(&a.decode)?;
    let queries = parse_queries(&d.text, d.format)?;
    if queries.is_empty() {
        return Err(DecodeError::EmptyHypothesisSet.into());
    }
    let defs = generate_definitions(
        &d.checkpoint.params,
        &d.checkpoint.model,
        &d.vocab,
        &queries,
        a.decode.target_occurrence,
        &d.decode,
    )?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for (q, def) in queries.iter().zip(&defs) {
        writeln!(out, "{}\t{}\t{}", q.word_tokens().join(" "), q.context_tokens().join(" "), def.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let d = open_decoder(&a.decode)?;
    let (entries, _) = parse_entries("data", &d.text, d.format, false)?;
    #[derive(Serialize)]
    struct EvalConfig<'a> {
        checkpoint: String,
        data: String,
        decode: &'a DecodeConfig,
        target_occurrence: contrastdef::data::TargetOccurrence,
    }
    let cfg = EvalConfig {
        checkpoint: a.decode.checkpoint.display().to_string(),
        data: a.decode.data.display().to_string(),
        decode: &d.decode,
        target_occurrence: a.decode.target_occurrence,
    };
    let (report, samples) = evaluate_split(
        &d.checkpoint.params,
        &d.checkpoint.model,
        &d.vocab,
        &entries,
        a.decode.target_occurrence,
        &d.decode,
    )?;
    let mut run = Run::create("evaluate", a.out.as_deref(), &cfg, None, d.inputs)?;
    run.write_json("metrics.json", &report)?;
    let mut tsv = Vec::new();
    write_samples_tsv(&samples, &mut tsv)?;
    run.write("samples.tsv", tsv)?;
    println!(
        "{} samples: BLEU x100 {:.2}, NIST {:.4} (x100 {:.2}), sentence-avg NIST x100 {:.2}, truncated {}",
        report.samples, report.bleu_x100, report.nist, report.nist_x100, report.nist_sentence_avg_x100, report.truncated
    );
    let dir = run.finish()?;
    println!("wrote {}", dir.display());
    Ok(())
}
