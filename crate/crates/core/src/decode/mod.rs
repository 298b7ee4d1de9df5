//! Autoregressive definition generation and the BLEU / NIST metrics.

mod bleu;
mod nist;
mod search;

pub use bleu::{bleu_corpus, sentence_bleu, BleuReport, SENTENCE_EPSILON};
pub use nist::{nist_corpus, nist_length_penalty, NistReport};
pub use search::{generate_all, Generated, StepScorer};

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{splice, Entry, Query, TargetOccurrence, Vocab, PAD};
use crate::model::{self, ModelConfig, ModelError, ModelParams, SeqView};
use crate::numerics::{log_softmax, NumericsError, Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("no hypotheses to score")]
    EmptyHypothesisSet,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_decode_len: usize,
    /// Exponent applied to the output length when ranking finished beams.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self { strategy: Strategy::Greedy, beam_size: 1, max_decode_len: 32, length_penalty: 1.0 }
    }

    pub fn beam(beam_size: usize) -> Self {
        Self { strategy: Strategy::Beam, beam_size, ..Self::greedy() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(DecodeError::InvalidConfig("max_decode_len must be at least 1".into()));
        }
        if self.strategy == Strategy::Greedy && self.beam_size != 1 {
            return Err(DecodeError::InvalidConfig("greedy decoding uses beam_size 1".into()));
        }
        Ok(())
    }
}

/// Scores prefixes with a frozen model. Sources are encoded once up front.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    encoded: Tensor,
    src_mask: Vec<bool>,
    src_len: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig, sources: &[Vec<usize>]) -> Result<Self, DecodeError> {
        let n = sources.len();
        let src_len = sources.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; n * src_len];
        let mut src_mask = vec![false; n * src_len];
        for (s, src) in sources.iter().enumerate() {
            ids[s * src_len..s * src_len + src.len()].copy_from_slice(src);
            src_mask[s * src_len..s * src_len + src.len()].iter_mut().for_each(|m| *m = true);
        }
        let encoded = if n == 0 {
            Tensor::zeros(vec![0, src_len, cfg.d_model])
        } else {
            let tape = Tape::new();
            let m = params.bind_frozen(&tape, cfg);
            let h = model::encode(&tape, &m, cfg, SeqView::new(&ids, &src_mask, n, src_len), None)?;
            let out = tape.value(h).clone();
            out
        };
        Ok(Self { params, cfg, encoded, src_mask, src_len })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn next_log_probs(&mut self, requests: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>, DecodeError> {
        let r = requests.len();
        if r == 0 {
            return Ok(Vec::new());
        }
        let (s, d) = (self.src_len, self.cfg.d_model);
        let t = requests.iter().map(|(_, p)| p.len()).max().unwrap_or(1);
        let mut enc = Vec::with_capacity(r * s * d);
        let mut mask = Vec::with_capacity(r * s);
        let mut tgt = vec![PAD; r * t];
        let mut tmask = vec![false; r * t];
        for (i, (src, prefix)) in requests.iter().enumerate() {
            enc.extend_from_slice(&self.encoded.data()[src * s * d..(src + 1) * s * d]);
            mask.extend_from_slice(&self.src_mask[src * s..(src + 1) * s]);
            tgt[i * t..i * t + prefix.len()].copy_from_slice(prefix);
            tmask[i * t..i * t + prefix.len()].iter_mut().for_each(|m| *m = true);
        }
        let tape = Tape::new();
        let m = self.params.bind_frozen(&tape, self.cfg);
        let h = tape.constant(Tensor::new(vec![r, s, d], enc)?);
        let g = model::decode_teacher_forced(&tape, &m, self.cfg, h, &mask, SeqView::new(&tgt, &tmask, r, t), None)?;
        let last: Vec<usize> = requests.iter().enumerate().map(|(i, (_, p))| i * t + p.len() - 1).collect();
        let g_last = tape.gather_rows(g, &last)?;
        let logits = model::lm_head(&tape, &m, g_last)?;
        let values = tape.value(logits);
        Ok((0..r).map(|i| log_softmax(values.row(i))).collect())
    }
}

/// Decodes one definition per query; returns token strings.
pub fn generate_definitions(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocab,
    queries: &[Query],
    occurrence: TargetOccurrence,
    decode: &DecodeConfig,
) -> Result<Vec<Vec<String>>, DecodeError> {
    let sources: Vec<Vec<usize>> = queries.iter().map(|q| splice(q, vocab, occurrence).ids).collect();
    let mut scorer = ModelScorer::new(params, cfg, &sources)?;
    let out = generate_all(&mut scorer, sources.len(), decode)?;
    Ok(out.into_iter().map(|g| vocab.decode(&g.tokens)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScore {
    pub word: String,
    pub context: String,
    pub reference: String,
    pub hypothesis: String,
    pub sent_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// Documents the two NIST conventions below.
    pub note: String,
    pub samples: usize,
    pub bleu: f64,
    pub bleu_x100: f64,
    pub bleu_detail: BleuReport,
    /// Corpus NIST (order 5) on its natural scale.
    pub nist: f64,
    pub nist_x100: f64,
    /// Mean sentence-level NIST, then ×100.
    pub nist_sentence_avg_x100: f64,
    pub nist_detail: NistReport,
    pub mean_sentence_bleu: f64,
    pub truncated: usize,
}

const REPORT_NOTE: &str = "bleu in [0,1], bleu_x100 = 100*bleu; nist is corpus NIST (n=5); \
nist_x100 = 100*nist; nist_sentence_avg_x100 = 100 * mean over samples of single-pair NIST";

/// Builds a report from the decoded strings and references.
pub fn score(hyps: &[Vec<String>], refs: &[Vec<String>], truncated: usize) -> Result<MetricReport, DecodeError> {
    let bleu = bleu_corpus(hyps, refs, 4)?;
    let nist = nist_corpus(hyps, refs, 5)?;
    let mut sent_nist = 0.0;
    let mut sent_bleu = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        sent_nist += nist_corpus(std::slice::from_ref(h), std::slice::from_ref(r), 5)?.nist;
        sent_bleu += sentence_bleu(h, r);
    }
    let n = hyps.len() as f64;
    Ok(MetricReport {
        note: REPORT_NOTE.into(),
        samples: hyps.len(),
        bleu: bleu.bleu,
        bleu_x100: 100.0 * bleu.bleu,
        nist: nist.nist,
        nist_x100: 100.0 * nist.nist,
        nist_sentence_avg_x100: 100.0 * sent_nist / n,
        mean_sentence_bleu: sent_bleu / n,
        bleu_detail: bleu,
        nist_detail: nist,
        truncated,
    })
}

/// Decodes and scores every entry in the split.
pub fn evaluate_split(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocab,
    entries: &[Entry],
    occurrence: TargetOccurrence,
    decode: &DecodeConfig,
) -> Result<(MetricReport, Vec<SampleScore>), DecodeError> {
    if entries.is_empty() {
        return Err(DecodeError::EmptyHypothesisSet);
    }
    let sources: Vec<Vec<usize>> = entries.iter().map(|e| splice(e.query(), vocab, occurrence).ids).collect();
    let mut scorer = ModelScorer::new(params, cfg, &sources)?;
    let generated = generate_all(&mut scorer, sources.len(), decode)?;
    let truncated = generated.iter().filter(|g| g.truncated).count();
    let hyps: Vec<Vec<String>> = generated.iter().map(|g| vocab.decode(&g.tokens)).collect();
    let refs: Vec<Vec<String>> = entries.iter().map(|e| e.definition_tokens().to_vec()).collect();
    let report = score(&hyps, &refs, truncated)?;
    let samples = entries
        .iter()
        .zip(hyps.iter().zip(&refs))
        .map(|(e, (h, r))| SampleScore {
            word: e.word_tokens().join(" "),
            context: e.context_tokens().join(" "),
            reference: r.join(" "),
            hypothesis: h.join(" "),
            sent_bleu: sentence_bleu(h, r),
        })
        .collect();
    Ok((report, samples))
}

/// `word \t context \t reference \t hypothesis \t sent_bleu`, with a header row.
pub fn write_samples_tsv(samples: &[SampleScore], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "word\tcontext\treference\thypothesis\tsent_bleu")?;
    for s in samples {
        writeln!(out, "{}\t{}\t{}\t{}\t{:.6}", s.word, s.context, s.reference, s.hypothesis, s.sent_bleu)?;
    }
    Ok(())
}
