use std::collections::HashMap;

use serde::Serialize;

use super::DecodeError;

pub(crate) fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches of one hypothesis against one reference, and the
/// number of hypothesis n-grams.
fn clipped<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`, no smoothing.
pub fn bleu_corpus<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuReport, DecodeError> {
    if hyps.is_empty() {
        return Err(DecodeError::EmptyHypothesisSet);
    }
    if hyps.len() != refs.len() {
        return Err(DecodeError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let (m, t) = clipped(h, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let precisions: Vec<f64> =
        matches.iter().zip(&totals).map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 }).collect();
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let brevity_penalty = brevity(hyp_len, ref_len);
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuReport { bleu, precisions, matches, totals, brevity_penalty, hyp_len, ref_len })
}

fn brevity(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Floor substituted for zero matches in sentence-level BLEU.
pub const SENTENCE_EPSILON: f64 = 1e-9;

/// Sentence BLEU (max order 4). Orders with no match use `ε / total`.
pub fn sentence_bleu<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t) = clipped(hyp, reference, n);
        let t = t.max(1) as f64;
        let p = if m == 0 { SENTENCE_EPSILON / t } else { m as f64 / t };
        log_sum += p.ln();
    }
    brevity(hyp.len(), reference.len()) * (log_sum / 4.0).exp()
}
