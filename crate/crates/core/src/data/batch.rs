use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Entry, Query, Vocab, BOS, CONTEXT_PREFIX, EOS, PAD, WORD_PREFIX};

/// Which copy of the target word in the spliced input is treated as the
/// target representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOccurrence {
    /// The occurrence inside the context segment.
    #[default]
    Context,
    /// The copy that follows the `word:` prefix.
    WordPrefix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spliced {
    pub ids: Vec<usize>,
    pub target_positions: Vec<usize>,
}

/// Builds `word: W context: C` and returns the positions of the selected
/// copy of `W`.
pub fn splice(query: &Query, vocab: &Vocab, occurrence: TargetOccurrence) -> Spliced {
    let w = query.word_tokens();
    let mut ids = Vec::with_capacity(w.len() + query.context_tokens().len() + 2);
    ids.push(WORD_PREFIX);
    ids.extend(vocab.encode(w));
    ids.push(CONTEXT_PREFIX);
    ids.extend(vocab.encode(query.context_tokens()));
    let target_positions = match occurrence {
        TargetOccurrence::WordPrefix => (1..1 + w.len()).collect(),
        TargetOccurrence::Context => {
            let offset = w.len() + 2;
            let (i, j) = query.target_span();
            (offset + i..offset + j).collect()
        }
    };
    Spliced { ids, target_positions }
}

/// A padded mini-batch. Matrices are flattened row-major; masks are true at
/// real (non-pad) tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub encoder_ids: Vec<usize>,
    pub encoder_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
    pub decoder_in: Vec<usize>,
    pub decoder_gold: Vec<usize>,
    pub decoder_mask: Vec<bool>,
    /// Index of each row's entry in the slice given to [`make_batches`].
    pub entry_indices: Vec<usize>,
}

impl Batch {
    /// Builds one batch from the given entries, in order.
    pub fn from_entries(entries: &[&Entry], vocab: &Vocab, occurrence: TargetOccurrence) -> Self {
        let spliced: Vec<Spliced> = entries.iter().map(|e| splice(e.query(), vocab, occurrence)).collect();
        let defs: Vec<Vec<usize>> = entries.iter().map(|e| vocab.encode(e.definition_tokens())).collect();
        let n = entries.len();
        let src_len = spliced.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let tgt_len = defs.iter().map(|d| d.len() + 1).max().unwrap_or(0);
        let mut b = Self {
            size: n,
            src_len,
            tgt_len,
            encoder_ids: vec![PAD; n * src_len],
            encoder_mask: vec![false; n * src_len],
            target_mask: vec![false; n * src_len],
            decoder_in: vec![PAD; n * tgt_len],
            decoder_gold: vec![PAD; n * tgt_len],
            decoder_mask: vec![false; n * tgt_len],
            entry_indices: (0..n).collect(),
        };
        for (r, (s, d)) in spliced.iter().zip(&defs).enumerate() {
            let row = r * src_len;
            for (p, &id) in s.ids.iter().enumerate() {
                b.encoder_ids[row + p] = id;
                b.encoder_mask[row + p] = true;
            }
            for &p in &s.target_positions {
                b.target_mask[row + p] = true;
            }
            let row = r * tgt_len;
            b.decoder_in[row] = BOS;
            for (t, &id) in d.iter().enumerate() {
                b.decoder_in[row + t + 1] = id;
                b.decoder_gold[row + t] = id;
            }
            b.decoder_gold[row + d.len()] = EOS;
            for t in 0..=d.len() {
                b.decoder_mask[row + t] = true;
            }
        }
        b
    }

    /// Flattened encoder row indices (`sample * src_len + position`) of each
    /// sample's target span.
    pub fn target_rows(&self) -> Vec<Vec<usize>> {
        (0..self.size)
            .map(|r| (0..self.src_len).filter(|&p| self.target_mask[r * self.src_len + p]).map(|p| r * self.src_len + p).collect())
            .collect()
    }

    /// Flattened decoder row indices of each sample's non-pad positions.
    pub fn decoder_rows(&self) -> Vec<Vec<usize>> {
        (0..self.size)
            .map(|r| (0..self.tgt_len).filter(|&t| self.decoder_mask[r * self.tgt_len + t]).map(|t| r * self.tgt_len + t).collect())
            .collect()
    }

    /// Gold ids for the loss, `None` at padding.
    pub fn gold_targets(&self) -> Vec<Option<usize>> {
        self.decoder_gold.iter().zip(&self.decoder_mask).map(|(&g, &m)| m.then_some(g)).collect()
    }

    /// Fraction of samples whose target word (by encoder ids of the target
    /// span) also appears in another sample of the batch.
    pub fn duplicate_target_rate(&self) -> f64 {
        let keys: Vec<Vec<usize>> = self
            .target_rows()
            .iter()
            .map(|rows| rows.iter().map(|&i| self.encoder_ids[i]).collect())
            .collect();
        let mut counts: HashMap<&[usize], usize> = HashMap::new();
        for k in &keys {
            *counts.entry(k.as_slice()).or_default() += 1;
        }
        let dup = keys.iter().filter(|k| counts[k.as_slice()] > 1).count();
        dup as f64 / self.size.max(1) as f64
    }
}

/// Partitions `entries` into batches of `batch_size` (the last one may be
/// smaller), shuffled by `shuffle_seed` when given.
pub fn make_batches(
    entries: &[Entry],
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    occurrence: TargetOccurrence,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..entries.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&Entry> = idx.iter().map(|&i| &entries[i]).collect();
            let mut b = Batch::from_entries(&refs, vocab, occurrence);
            b.entry_indices = idx.to_vec();
            b
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{demo, DatasetFormat};
    use proptest::prelude::*;

    fn vocab_for(entries: &[Entry]) -> Vocab {
        Vocab::build(entries, 1, usize::MAX).unwrap()
    }

    #[test]
    fn splice_double_portion() {
        let e = Entry::from_text("double", "ate a double portion", "twice as great or many").unwrap();
        let v = vocab_for(std::slice::from_ref(&e));
        let s = splice(e.query(), &v, TargetOccurrence::Context);
        assert_eq!(v.decode(&s.ids).join(" "), "word: double context: ate a double portion");
        assert_eq!(s.target_positions, vec![5]);
        assert_eq!(v.token(s.ids[5]), "double");
        let w = splice(e.query(), &v, TargetOccurrence::WordPrefix);
        assert_eq!(w.target_positions, vec![1]);
    }

    #[test]
    fn splice_single_token_context_and_phrase() {
        let e = Entry::from_text("x", "x", "y").unwrap();
        let v = vocab_for(std::slice::from_ref(&e));
        assert_eq!(splice(e.query(), &v, TargetOccurrence::Context).target_positions, vec![3]);
        let p = Entry::from_text("boo bear", "you are my boo bear", "a loved one").unwrap();
        let v = vocab_for(std::slice::from_ref(&p));
        let s = splice(p.query(), &v, TargetOccurrence::Context);
        assert_eq!(s.target_positions, vec![7, 8]);
        assert_eq!(v.decode(&[s.ids[7], s.ids[8]]), ["boo", "bear"]);
    }

    fn corpus(n: usize) -> Vec<Entry> {
        let text = demo::tsv(&demo::generate().train);
        let mut es = crate::data::parse_dataset(&text, DatasetFormat::Tsv, true).unwrap().entries;
        es.truncate(n);
        es
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let es = corpus(33);
        let v = vocab_for(&es);
        let bs = make_batches(&es, &v, 16, Some(7), TargetOccurrence::Context);
        assert_eq!(bs.iter().map(|b| b.size).collect::<Vec<_>>(), vec![16, 16, 1]);
        let again = make_batches(&es, &v, 16, Some(7), TargetOccurrence::Context);
        assert_eq!(bs, again);
        let other = make_batches(&es, &v, 16, Some(8), TargetOccurrence::Context);
        assert_ne!(bs[0].entry_indices, other[0].entry_indices);
        let ones = make_batches(&es, &v, 1, None, TargetOccurrence::Context);
        assert!(ones.iter().all(|b| b.size == 1));
    }

    #[test]
    fn teacher_forcing_alignment() {
        let es = corpus(5);
        let v = vocab_for(&es);
        for b in make_batches(&es, &v, 5, None, TargetOccurrence::Context) {
            for r in 0..b.size {
                let row = r * b.tgt_len;
                let len = b.decoder_mask[row..row + b.tgt_len].iter().filter(|&&m| m).count();
                assert_eq!(b.decoder_in[row], BOS);
                assert_eq!(&b.decoder_in[row + 1..row + len], &b.decoder_gold[row..row + len - 1]);
                assert_eq!(b.decoder_gold[row + len - 1], EOS);
            }
        }
    }

    proptest! {
        #[test]
        fn batch_invariants(n in 1usize..50, bs in 1usize..20, seed in any::<u64>(), prefix in any::<bool>()) {
            let es = corpus(n);
            let v = vocab_for(&es);
            let occ = if prefix { TargetOccurrence::WordPrefix } else { TargetOccurrence::Context };
            let batches = make_batches(&es, &v, bs, Some(seed), occ);
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.entry_indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..es.len()).collect::<Vec<_>>());
            for b in &batches {
                for (r, rows) in b.target_rows().iter().enumerate() {
                    prop_assert!(!rows.is_empty());
                    prop_assert!(rows.windows(2).all(|w| w[1] == w[0] + 1));
                    prop_assert!(rows.iter().all(|&i| b.encoder_mask[i]));
                    let toks: Vec<String> = rows.iter().map(|&i| v.token(b.encoder_ids[i]).to_string()).collect();
                    prop_assert_eq!(&toks[..], es[b.entry_indices[r]].word_tokens());
                }
            }
        }
    }
}
