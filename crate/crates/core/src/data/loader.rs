use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{tokenize, DataError, Entry, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// `word \t context \t definition [\t start \t end]`
    Tsv,
    /// `{"word", "context", "definition", "span": [start, end]?}`
    Jsonl,
}

impl DatasetFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Tsv => "tsv",
            Self::Jsonl => "jsonl",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub error: DataError,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub entries: Vec<Entry>,
    pub rejections: Vec<Rejection>,
    pub warnings: Vec<String>,
}

/// Reads a dataset file. With `strict`, the first bad record is an error;
/// otherwise bad records are collected in [`LoadReport::rejections`].
pub fn load_dataset(path: &Path, format: DatasetFormat, strict: bool) -> Result<LoadReport, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_dataset(&text, format, strict)
}

pub fn parse_dataset(text: &str, format: DatasetFormat, strict: bool) -> Result<LoadReport, DataError> {
    let mut report = LoadReport::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            DatasetFormat::Tsv => parse_tsv(raw, line),
            DatasetFormat::Jsonl => parse_jsonl(raw, line),
        }
        .and_then(|rec| rec.into_entry(line));
        match parsed {
            Ok((entry, hits)) => {
                if hits > 1 {
                    report.warnings.push(format!(
                        "line {line}: target {:?} occurs {hits} times in context; using the first",
                        entry.word_tokens().join(" ")
                    ));
                }
                report.entries.push(entry);
            }
            Err(e) if strict => return Err(e),
            Err(error) => report.rejections.push(Rejection { line, error }),
        }
    }
    Ok(report)
}

struct RawRecord {
    word: String,
    context: String,
    definition: String,
    span: Option<(usize, usize)>,
}

impl RawRecord {
    fn into_entry(self, line: usize) -> Result<(Entry, usize), DataError> {
        let word = tokenize(&self.word);
        let context = tokenize(&self.context);
        let definition = tokenize(&self.definition);
        let malformed = |reason: &str| DataError::MalformedRecord { line, reason: reason.into() };
        if word.is_empty() {
            return Err(malformed("empty word"));
        }
        if definition.is_empty() {
            return Err(malformed("empty definition"));
        }
        let (query, hits) = match self.span {
            Some(span) => {
                let q = Query::new(word, context, span).map_err(|e| malformed(&e.to_string()))?;
                (q, 1)
            }
            None => {
                let joined = word.join(" ");
                Query::locate(word, context).ok_or(DataError::TargetNotFound { line, word: joined })?
            }
        };
        Ok((Entry::new(query, definition)?, hits))
    }
}

fn parse_tsv(raw: &str, line: usize) -> Result<RawRecord, DataError> {
    let cols: Vec<&str> = raw.split('\t').collect();
    let malformed = |reason: String| DataError::MalformedRecord { line, reason };
    let span = match cols.len() {
        3 => None,
        5 => {
            let p = |s: &str| s.trim().parse::<usize>().map_err(|_| malformed(format!("bad span index {s:?}")));
            Some((p(cols[3])?, p(cols[4])?))
        }
        n => return Err(malformed(format!("expected 3 or 5 tab-separated columns, found {n}"))),
    };
    Ok(RawRecord {
        word: cols[0].to_string(),
        context: cols[1].to_string(),
        definition: cols[2].to_string(),
        span,
    })
}

#[derive(Deserialize)]
struct JsonRecord {
    word: String,
    context: String,
    definition: String,
    #[serde(default)]
    span: Option<(usize, usize)>,
}

fn parse_jsonl(raw: &str, line: usize) -> Result<RawRecord, DataError> {
    let rec: JsonRecord =
        serde_json::from_str(raw).map_err(|e| DataError::MalformedRecord { line, reason: e.to_string() })?;
    Ok(RawRecord {
        word: rec.word,
        context: rec.context,
        definition: rec.definition,
        span: rec.span,
    })
}
