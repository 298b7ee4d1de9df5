//! Corpus NIST with information weights from the reference side, following
//! the NLTK `corpus_nist` definition for one reference per hypothesis.

use std::collections::HashMap;

use serde::Serialize;

use super::bleu::ngram_counts;
use super::DecodeError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NistReport {
    pub nist: f64,
    /// Per-order information-weighted precision.
    pub precisions: Vec<f64>,
    pub length_penalty: f64,
}

/// `exp(β ln² ratio)` for `0 < ratio < 1`, with β chosen so a 2/3 length
/// ratio scores 0.5; otherwise `clamp(ratio, 0, 1)`.
pub fn nist_length_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    let ratio = if ref_len == 0 { 0.0 } else { hyp_len as f64 / ref_len as f64 };
    if ratio > 0.0 && ratio < 1.0 {
        let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
        (beta * ratio.ln().powi(2)).exp()
    } else {
        ratio.clamp(0.0, 1.0)
    }
}

pub fn nist_corpus<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<NistReport, DecodeError> {
    if hyps.is_empty() {
        return Err(DecodeError::EmptyHypothesisSet);
    }
    if hyps.len() != refs.len() {
        return Err(DecodeError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let mut freq: HashMap<Vec<&str>, usize> = HashMap::new();
    let mut total_ref_words = 0usize;
    for r in refs {
        for n in 1..=max_n {
            for (g, c) in ngram_counts(r, n) {
                *freq.entry(g).or_insert(0) += c;
            }
        }
        total_ref_words += r.len();
    }
    let info = |g: &[&str]| -> f64 {
        let context = match &g[..g.len() - 1] {
            [] => total_ref_words,
            prefix => freq.get(prefix).copied().unwrap_or(total_ref_words),
        };
        (context as f64 / freq[g] as f64).log2()
    };
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut numerator = 0.0;
        let mut denominator = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, &c) in &hc {
                if let Some(&rcount) = rc.get(g) {
                    numerator += info(g) * c.min(rcount) as f64;
                }
            }
            denominator += hc.values().sum::<usize>();
        }
        precisions.push(if denominator == 0 { 0.0 } else { numerator / denominator as f64 });
    }
    let hyp_len = hyps.iter().map(Vec::len).sum();
    let ref_len = refs.iter().map(Vec::len).sum();
    let length_penalty = nist_length_penalty(ref_len, hyp_len);
    Ok(NistReport { nist: precisions.iter().sum::<f64>() * length_penalty, precisions, length_penalty })
}
