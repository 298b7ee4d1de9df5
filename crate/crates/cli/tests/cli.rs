use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_contrastdef"));
    c.env_remove("CONTRASTDEF_RUN_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Prepares the demo corpus and rewrites its config to a toy model with a
/// few epochs per stage.
fn toy_workspace(dir: &Path) -> PathBuf {
    let demo = dir.join("demo");
    ok(&["prepare", "--demo-data", "--out", s(&demo)]);
    let path = demo.join("run.json");
    let mut cfg = read_json(&path);
    let vocab = cfg["model"]["vocab_size"].clone();
    cfg["model"] = json!({
        "encoder_layers": 1, "decoder_layers": 1, "d_model": 16, "n_heads": 2,
        "d_ff": 32, "vocab_size": vocab, "max_len": 64, "dropout": 0.0
    });
    cfg["stage1"] = json!({"stage": "one", "max_epoch": 3, "early_stop_patience": 3, "pooling": "none", "lambda": 0.0});
    cfg["stage2"] = json!({"stage": "two", "max_epoch": 2, "early_stop_patience": 2, "pooling": "max", "lambda": 0.8});
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn manifests(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").count()
}

#[test]
fn demo_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_workspace(tmp.path());
    let demo = cfg.parent().unwrap();
    let stats = read_json(&demo.join("stats.json"));
    assert_eq!(stats["train"]["entries"], 50);
    assert_eq!(manifests(demo), 1);

    let s1 = tmp.path().join("s1");
    let out = ok(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(&s1)]);
    assert!(out.contains("best epoch"), "{out}");
    for f in ["best.ckpt", "last.ckpt", "epochs.jsonl", "steps.jsonl", "summary.json", "config.json", "manifest.json"] {
        assert!(s1.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(s1.join("epochs.jsonl")).unwrap().lines().count(), 3);
    let manifest = read_json(&s1.join("manifest.json"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "best.ckpt"));

    let s2 = tmp.path().join("s2");
    let ckpt = s1.join("best.ckpt");
    ok(&["train", "--config", s(&cfg), "--stage", "2", "--init-from", s(&ckpt), "--out", s(&s2)]);
    let steps = std::fs::read_to_string(s2.join("steps.jsonl")).unwrap();
    let first: Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    assert!(first["L_C"].is_number() && first["retrieval_acc"].is_number(), "{first}");
    assert_eq!(manifests(&s2), 1);

    let ev = tmp.path().join("ev");
    let best2 = s2.join("best.ckpt");
    let test = demo.join("splits/test.jsonl");
    ok(&["evaluate", "--checkpoint", s(&best2), "--data", s(&test), "--out", s(&ev)]);
    let metrics = read_json(&ev.join("metrics.json"));
    assert_eq!(metrics["samples"], 25);
    assert!(metrics["bleu"].as_f64().unwrap() >= 0.0);
    assert_eq!(std::fs::read_to_string(ev.join("samples.tsv")).unwrap().lines().count(), 26);

    let mut child = bin()
        .args(["generate", "--checkpoint", s(&best2), "--data", "-", "--beam", "3"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"bank\tthe money bank was here\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("bank\tthe money bank was here\t"), "{text}");
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_workspace(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["train", "--config", s(&cfg), "--stage", "one-shot", "--seed", "7", "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--stage", "one-shot", "--seed", "7", "--out", s(&b)]);
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&a, "best.ckpt"), bytes(&b, "best.ckpt"));
    assert_eq!(bytes(&a, "steps.jsonl"), bytes(&b, "steps.jsonl"));
    let c = tmp.path().join("c");
    ok(&["train", "--config", s(&cfg), "--stage", "one-shot", "--seed", "8", "--out", s(&c)]);
    assert_ne!(bytes(&a, "best.ckpt"), bytes(&c, "best.ckpt"));
}

#[test]
fn run_root_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let out = bin().args(["prepare", "--demo-data"]).env("CONTRASTDEF_RUN_ROOT", &root).output().unwrap();
    assert!(out.status.success());
    let dirs: Vec<_> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].file_name().unwrap().to_str().unwrap().starts_with("prepare-"));
    assert_eq!(manifests(&dirs[0]), 1);
}

#[test]
fn input_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.tsv");
    let out = run(&["prepare", "--data", s(&missing), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));

    let cfg = toy_workspace(tmp.path());
    let mut bad = read_json(&cfg);
    bad["model"]["vocab_size"] = json!(7);
    let bad_path = cfg.with_file_name("bad.json");
    std::fs::write(&bad_path, bad.to_string()).unwrap();
    let out = run(&["train", "--config", s(&bad_path), "--stage", "1", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config mismatch"));

    let s1 = tmp.path().join("s1");
    ok(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(&s1)]);
    let mut wide = read_json(&cfg);
    wide["model"]["d_model"] = json!(32);
    let wide_path = cfg.with_file_name("wide.json");
    std::fs::write(&wide_path, wide.to_string()).unwrap();
    let ckpt = s1.join("best.ckpt");
    let out = run(&["train", "--config", s(&wide_path), "--stage", "2", "--init-from", s(&ckpt), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config mismatch"));

    let empty = tmp.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let out = run(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&empty), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no hypotheses"));

    let mut corrupt = std::fs::read(&ckpt).unwrap();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let corrupt_path = tmp.path().join("corrupt.ckpt");
    std::fs::write(&corrupt_path, corrupt).unwrap();
    let test = cfg.with_file_name("splits").join("test.jsonl");
    let out = run(&["evaluate", "--checkpoint", s(&corrupt_path), "--data", s(&test), "--out", s(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt checkpoint"));
}

#[test]
fn prepare_single_file_with_bad_records() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("all.tsv");
    let mut text = String::new();
    for i in 0..30 {
        text.push_str(&format!("w{i}\tthe w{i} is here\tthe meaning number {i}\n"));
    }
    text.push_str("just one column\n");
    text.push_str("cat\tthe dog sat\ta pet\n");
    std::fs::write(&data, &text).unwrap();
    let out_dir = tmp.path().join("p");
    let out = ok(&["prepare", "--data", s(&data), "--out", s(&out_dir)]);
    assert!(out.contains("rejected records: 2"), "{out}");
    let stats = read_json(&out_dir.join("stats.json"));
    assert_eq!(stats["train"]["entries"], 24);
    assert_eq!(stats["valid"]["entries"], 3);
    assert_eq!(stats["test"]["entries"], 3);
    assert_eq!(std::fs::read_to_string(out_dir.join("rejected.tsv")).unwrap().lines().count(), 2);

    let strict = run(&["prepare", "--data", s(&data), "--strict", "--out", s(&tmp.path().join("q"))]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("line 31"));
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck", "--coords", "64"]);
    assert!(out.contains("PASS full_mixed_loss"), "{out}");
    let bad = run(&["gradcheck", "--coords", "64", "--corrupt-gradients"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL matmul"));
    let strict = run(&["gradcheck", "--coords", "64", "--tolerance", "1e-12", "--loss-tolerance", "1e-12"]);
    assert_eq!(strict.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&strict.stderr);
    assert!(stderr.contains("gradient check failed for") && stderr.contains("full_mixed_loss"), "{stderr}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_workspace(tmp.path());
    let out = ok(&["gradcheck", "--coords", "64", "--config", s(&cfg)]);
    assert!(out.contains("PASS full_mixed_loss"), "{out}");
}

#[test]
fn literal_sum_changes_the_stage_two_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_workspace(tmp.path());
    let s1 = tmp.path().join("s1");
    ok(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(&s1)]);
    let ckpt = s1.join("best.ckpt");
    let first_lc = |dir: &Path| -> f64 {
        let steps = std::fs::read_to_string(dir.join("steps.jsonl")).unwrap();
        let v: Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
        v["L_C"].as_f64().unwrap()
    };
    let (mean, sum) = (tmp.path().join("mean"), tmp.path().join("sum"));
    ok(&["train", "--config", s(&cfg), "--stage", "2", "--init-from", s(&ckpt), "--out", s(&mean)]);
    ok(&["train", "--config", s(&cfg), "--stage", "2", "--init-from", s(&ckpt), "--literal-sum", "--out", s(&sum)]);
    assert!((first_lc(&sum) - 16.0 * first_lc(&mean)).abs() < 1e-9 * first_lc(&sum));
    assert_eq!(read_json(&sum.join("manifest.json"))["config"]["contrastive"]["reduction"], "sum");
}

#[test]
fn overfit_checkpoint_scores_high_on_train() {
    let tmp = tempfile::tempdir().unwrap();
    let demo = tmp.path().join("demo");
    ok(&["prepare", "--demo-data", "--out", s(&demo)]);
    let cfg = demo.join("run.json");
    let s1 = tmp.path().join("s1");
    ok(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(&s1)]);
    let ev = tmp.path().join("ev");
    let train = demo.join("splits/train.jsonl");
    ok(&["evaluate", "--checkpoint", s(&s1.join("best.ckpt")), "--data", s(&train), "--out", s(&ev)]);
    let bleu = read_json(&ev.join("metrics.json"))["bleu"].as_f64().unwrap();
    assert!(bleu >= 0.95, "train BLEU {bleu}");
}

#[test]
fn ablation_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_workspace(tmp.path());
    let out_dir = tmp.path().join("abl");
    let out = ok(&["ablate", "--axis", "pooling", "--config", s(&cfg), "--seeds", "0", "--out", s(&out_dir)]);
    assert!(out.contains("| pooling=max |") && out.contains("| pooling=mean |"), "{out}");
    let table = read_json(&out_dir.join("ablation.json"));
    assert_eq!(table["arms"].as_array().unwrap().len(), 2);
    assert_eq!(manifests(&out_dir), 1);
}
