use super::{DecodeConfig, DecodeError, Strategy};
use crate::data::{BOS, EOS};

/// Next-token log-probabilities for a set of partial outputs.
///
/// Each request names a source (an index fixed when the scorer was built)
/// and a prefix starting with BOS. The answer holds one row of `|V|`
/// log-probabilities per request, in order.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&mut self, requests: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>, DecodeError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    /// Output ids without BOS and EOS.
    pub tokens: Vec<usize>,
    /// Reached `max_decode_len` without emitting EOS.
    pub truncated: bool,
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best })
}

/// Decodes every source in `0..n_sources` in lockstep.
pub fn generate_all(scorer: &mut dyn StepScorer, n_sources: usize, cfg: &DecodeConfig) -> Result<Vec<Generated>, DecodeError> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy(scorer, n_sources, cfg.max_decode_len),
        Strategy::Beam => (0..n_sources).map(|s| beam(scorer, s, cfg)).collect(),
    }
}

fn greedy(scorer: &mut dyn StepScorer, n_sources: usize, max_len: usize) -> Result<Vec<Generated>, DecodeError> {
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n_sources];
    let mut done = vec![false; n_sources];
    for _ in 0..max_len {
        let active: Vec<usize> = (0..n_sources).filter(|&s| !done[s]).collect();
        if active.is_empty() {
            break;
        }
        let requests: Vec<(usize, &[usize])> = active.iter().map(|&s| (s, prefixes[s].as_slice())).collect();
        let rows = scorer.next_log_probs(&requests)?;
        for (&s, row) in active.iter().zip(&rows) {
            let next = argmax(row);
            prefixes[s].push(next);
            done[s] = next == EOS;
        }
    }
    Ok(prefixes.into_iter().map(finish).collect())
}

fn finish(mut prefix: Vec<usize>) -> Generated {
    let ended = prefix.last() == Some(&EOS) && prefix.len() > 1;
    if ended {
        prefix.pop();
    }
    prefix.remove(0);
    Generated { tokens: prefix, truncated: !ended }
}

#[derive(Clone, Debug)]
struct Hyp {
    ids: Vec<usize>,
    score: f64,
}

/// Keeps the `beam_size` best extensions by summed log-probability each step
/// (ties broken by parent rank, then token id). Extensions ending in EOS are
/// set aside; the winner maximises `score / len^length_penalty` over those,
/// with `len` counting generated tokens including EOS.
fn beam(scorer: &mut dyn StepScorer, source: usize, cfg: &DecodeConfig) -> Result<Generated, DecodeError> {
    let mut active = vec![Hyp { ids: vec![BOS], score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_decode_len {
        if active.is_empty() {
            break;
        }
        let requests: Vec<(usize, &[usize])> = active.iter().map(|h| (source, h.ids.as_slice())).collect();
        let rows = scorer.next_log_probs(&requests)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, row) in rows.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                candidates.push((active[parent].score + lp, parent, tok));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (score, parent, tok) in candidates {
            let mut ids = active[parent].ids.clone();
            ids.push(tok);
            if tok == EOS {
                finished.push(Hyp { ids, score });
            } else {
                next.push(Hyp { ids, score });
            }
        }
        active = next;
    }
    finished.extend(active);
    let norm = |h: &Hyp| h.score / ((h.ids.len() - 1) as f64).powf(cfg.length_penalty);
    let best = finished
        .iter()
        .enumerate()
        .fold(0, |b, (i, h)| if norm(h) > norm(&finished[b]) { i } else { b });
    Ok(finish(finished.swap_remove(best).ids))
}
