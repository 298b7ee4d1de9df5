use std::io::Read;
use std::path::Path;

use anyhow::Result;
use contrastdef::data::{parse_dataset, tokenize, DatasetFormat, Entry, Query, Vocab};
use contrastdef::training::RunConfig;

use crate::manifest::InputFile;
use crate::InputError;

pub fn is_stdin(path: &Path) -> bool {
    path.as_os_str() == "-"
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if is_stdin(path) {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf).map_err(|e| InputError(format!("cannot read standard input: {e}")))?;
        return Ok(buf);
    }
    std::fs::read(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())).into())
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_bytes(path)?).map_err(|_| InputError(format!("{} is not valid UTF-8", path.display())).into())
}

pub fn infer_format(path: &Path, given: Option<DatasetFormat>) -> DatasetFormat {
    given.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => DatasetFormat::Jsonl,
        _ => DatasetFormat::Tsv,
    })
}

/// Parses a dataset, reporting skipped records and warnings on stderr.
pub fn parse_entries(label: &str, text: &str, format: DatasetFormat, strict: bool) -> Result<(Vec<Entry>, Vec<String>)> {
    let report = parse_dataset(text, format, strict)?;
    for w in &report.warnings {
        eprintln!("warning: {label}: {w}");
    }
    let rejected: Vec<String> = report.rejections.iter().map(|r| format!("{label}\t{}\t{}", r.line, r.error)).collect();
    if !rejected.is_empty() {
        eprintln!("warning: {label}: skipped {} malformed record(s)", rejected.len());
    }
    Ok((report.entries, rejected))
}

pub fn load_entries(inputs: &mut Vec<InputFile>, label: &str, path: &Path, format: Option<DatasetFormat>) -> Result<Vec<Entry>> {
    let bytes = read_bytes(path)?;
    inputs.push(InputFile::new(path, &bytes));
    let text = String::from_utf8(bytes).map_err(|_| InputError(format!("{} is not valid UTF-8", path.display())))?;
    Ok(parse_entries(label, &text, infer_format(path, format), false)?.0)
}

pub fn load_config(run_path: &Path) -> Result<RunConfig> {
    let text = read_text(run_path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| InputError(format!("invalid run config {}: {e}", run_path.display())))?;
    Ok(cfg)
}

pub fn load_vocab(inputs: &mut Vec<InputFile>, path: &Path) -> Result<Vocab> {
    let bytes = read_bytes(path)?;
    inputs.push(InputFile::new(path, &bytes));
    let text = String::from_utf8(bytes).map_err(|_| InputError(format!("{} is not valid UTF-8", path.display())))?;
    Ok(Vocab::from_text(&text)?)
}

/// Queries for generation: TSV lines `word \t context [\t definition [\t start \t end]]`
/// or JSONL records.
pub fn parse_queries(text: &str, format: DatasetFormat) -> Result<Vec<Query>> {
    if format == DatasetFormat::Jsonl {
        let report = parse_dataset(text, format, true)?;
        return Ok(report.entries.iter().map(|e| e.query().clone()).collect());
    }
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = idx + 1;
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() < 2 || cols.len() == 4 || cols.len() > 5 {
            return Err(InputError(format!("line {line}: expected word, context and optional definition and span")).into());
        }
        let word = tokenize(cols[0]);
        let context = tokenize(cols[1]);
        let query = if cols.len() == 5 {
            let p = |s: &str| s.trim().parse::<usize>().map_err(|_| InputError(format!("line {line}: bad span index {s:?}")));
            Query::new(word, context, (p(cols[3])?, p(cols[4])?))
                .map_err(|e| InputError(format!("line {line}: {e}")))?
        } else {
            Query::locate(word, context)
                .ok_or_else(|| InputError(format!("line {line}: target {:?} not found in context", cols[0])))?
                .0
        };
        out.push(query);
    }
    Ok(out)
}

/// One JSONL record per entry with an explicit token span, readable by the
/// dataset loader.
pub fn entries_to_jsonl(entries: &[Entry]) -> String {
    let mut s = String::new();
    for e in entries {
        let rec = serde_json::json!({
            "word": e.word_tokens().join(" "),
            "context": e.context_tokens().join(" "),
            "definition": e.definition_tokens().join(" "),
            "span": [e.target_span().0, e.target_span().1],
        });
        s.push_str(&rec.to_string());
        s.push('\n');
    }
    s
}
