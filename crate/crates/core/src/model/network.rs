use rand::RngCore;

use super::{AttentionVars, BoundModel, FeedForwardVars, ModelConfig, ModelError, NormVars};
use crate::numerics::{AttentionLayout, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// A padded id matrix with its non-pad mask, both `batch × len` row-major.
#[derive(Clone, Copy, Debug)]
pub struct SeqView<'a> {
    pub ids: &'a [usize],
    pub mask: &'a [bool],
    pub batch: usize,
    pub len: usize,
}

impl<'a> SeqView<'a> {
    pub fn new(ids: &'a [usize], mask: &'a [bool], batch: usize, len: usize) -> Self {
        debug_assert_eq!(ids.len(), batch * len);
        debug_assert_eq!(mask.len(), batch * len);
        Self { ids, mask, batch, len }
    }
}

/// Fixed sinusoidal position table tiled over the batch: `[batch, len, d]`.
pub fn positional_encoding(batch: usize, len: usize, d: usize) -> Tensor {
    let mut row_block = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            row_block[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let data = row_block.iter().copied().cycle().take(batch * len * d).collect();
    Tensor::new(vec![batch, len, d], data).expect("positional table shape")
}

fn embed_tokens(tape: &Tape, m: &BoundModel, cfg: &ModelConfig, seq: SeqView<'_>) -> Result<Var, ModelError> {
    if seq.len > cfg.max_len {
        return Err(ModelError::SequenceTooLong { len: seq.len, max: cfg.max_len });
    }
    let d = cfg.d_model;
    let tok = tape.embed(m.embed, seq.ids, &[seq.batch, seq.len])?;
    let tok = tape.scale(tok, (d as f64).sqrt())?;
    let pe = tape.constant(positional_encoding(seq.batch, seq.len, d));
    Ok(tape.add(tok, pe)?)
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

fn norm(tape: &Tape, x: Var, n: NormVars) -> Result<Var, ModelError> {
    Ok(tape.layer_norm(x, n.gamma, n.beta, LN_EPS)?)
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    tape: &Tape,
    cfg: &ModelConfig,
    w: AttentionVars,
    query_in: Var,
    kv_in: Var,
    layout: AttentionLayout,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    let q = tape.matmul(query_in, w.wq)?;
    let k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;
    let drop = rng.map(|r| (cfg.dropout, r));
    let a = tape.attention(q, k, v, layout, drop)?;
    Ok(tape.matmul(a, w.wo)?)
}

fn feed_forward(tape: &Tape, cfg: &ModelConfig, w: FeedForwardVars, x: Var, rng: Option<&mut dyn RngCore>) -> Result<Var, ModelError> {
    let h = tape.add_row(tape.matmul(x, w.w1)?, w.b1)?;
    let h = tape.gelu(h)?;
    let out = tape.add_row(tape.matmul(h, w.w2)?, w.b2)?;
    match rng {
        Some(r) => Ok(tape.dropout(out, cfg.dropout, r)?),
        None => Ok(out),
    }
}

/// Runs the encoder stack; returns the final hidden states `[batch, len, d]`.
/// Passing `rng` enables dropout.
pub fn encode(
    tape: &Tape,
    m: &BoundModel,
    cfg: &ModelConfig,
    src: SeqView<'_>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    let mut x = embed_tokens(tape, m, cfg, src)?;
    let layout = AttentionLayout {
        batch: src.batch,
        q_len: src.len,
        k_len: src.len,
        heads: cfg.n_heads,
        causal: false,
        key_mask: src.mask.to_vec(),
    };
    for layer in &m.encoder {
        let a = norm(tape, x, layer.ln1)?;
        let a = attention_block(tape, cfg, layer.attn, a, a, layout.clone(), reborrow(&mut rng))?;
        x = tape.add(x, a)?;
        let f = norm(tape, x, layer.ln2)?;
        let f = feed_forward(tape, cfg, layer.ffn, f, reborrow(&mut rng))?;
        x = tape.add(x, f)?;
    }
    norm(tape, x, m.encoder_norm)
}

/// Per-sample `[r_i, d]` matrices of the rows flagged in `target_mask`.
pub fn extract_target(tape: &Tape, h: Var, target_mask: &[bool], batch: usize, len: usize) -> Result<Vec<Var>, ModelError> {
    (0..batch)
        .map(|b| {
            let rows: Vec<usize> = (0..len).filter(|&p| target_mask[b * len + p]).map(|p| b * len + p).collect();
            if rows.is_empty() {
                return Err(ModelError::EmptyTarget { sample: b });
            }
            Ok(tape.gather_rows(h, &rows)?)
        })
        .collect()
}

/// Runs the decoder stack under teacher forcing with causal self-attention
/// and cross-attention to `h`; returns the last hidden states `[batch, len, d]`.
pub fn decode_teacher_forced(
    tape: &Tape,
    m: &BoundModel,
    cfg: &ModelConfig,
    h: Var,
    src_mask: &[bool],
    tgt: SeqView<'_>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    let src_len = src_mask.len() / tgt.batch.max(1);
    let mut x = embed_tokens(tape, m, cfg, tgt)?;
    let self_layout = AttentionLayout {
        batch: tgt.batch,
        q_len: tgt.len,
        k_len: tgt.len,
        heads: cfg.n_heads,
        causal: true,
        key_mask: tgt.mask.to_vec(),
    };
    let cross_layout = AttentionLayout {
        batch: tgt.batch,
        q_len: tgt.len,
        k_len: src_len,
        heads: cfg.n_heads,
        causal: false,
        key_mask: src_mask.to_vec(),
    };
    for layer in &m.decoder {
        let a = norm(tape, x, layer.ln1)?;
        let a = attention_block(tape, cfg, layer.self_attn, a, a, self_layout.clone(), reborrow(&mut rng))?;
        x = tape.add(x, a)?;
        let c = norm(tape, x, layer.ln2)?;
        let c = attention_block(tape, cfg, layer.cross_attn, c, h, cross_layout.clone(), reborrow(&mut rng))?;
        x = tape.add(x, c)?;
        let f = norm(tape, x, layer.ln3)?;
        let f = feed_forward(tape, cfg, layer.ffn, f, reborrow(&mut rng))?;
        x = tape.add(x, f)?;
    }
    norm(tape, x, m.decoder_norm)
}

/// Raw vocabulary logits `[batch, len, |V|]`.
pub fn lm_head(tape: &Tape, m: &BoundModel, g: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul_nt(g, m.lm_head.unwrap_or(m.embed))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::toy(16);
        (cfg.clone(), ModelParams::init(&cfg, 5).unwrap())
    }

    fn run(cfg: &ModelConfig, p: &ModelParams, src: &[usize], smask: &[bool], tgt: &[usize], tmask: &[bool], n: usize) -> Vec<f64> {
        let tape = Tape::new();
        let m = p.bind_frozen(&tape, cfg);
        let s = src.len() / n;
        let t = tgt.len() / n;
        let h = encode(&tape, &m, cfg, SeqView::new(src, smask, n, s), None).unwrap();
        let g = decode_teacher_forced(&tape, &m, cfg, h, smask, SeqView::new(tgt, tmask, n, t), None).unwrap();
        let out = tape.value(g).data().to_vec();
        out
    }

    #[test]
    fn decoder_is_causal() {
        let (cfg, p) = setup();
        let src = [6, 7, 8];
        let sm = [true; 3];
        let a = run(&cfg, &p, &src, &sm, &[1, 9, 10, 11], &[true; 4], 1);
        let b = run(&cfg, &p, &src, &sm, &[1, 9, 13, 14], &[true; 4], 1);
        let d = cfg.d_model;
        assert_eq!(a[..2 * d], b[..2 * d]);
        assert_ne!(a[2 * d..], b[2 * d..]);
    }

    #[test]
    fn padding_does_not_leak() {
        let (cfg, p) = setup();
        let d = cfg.d_model;
        let short = run(&cfg, &p, &[6, 7], &[true, true], &[1, 9], &[true, true], 1);
        let padded = run(&cfg, &p, &[6, 7, 0, 0], &[true, true, false, false], &[1, 9, 0], &[true, true, false], 1);
        assert_eq!(short[..], padded[..2 * d]);
        let other_pad = run(&cfg, &p, &[6, 7, 12, 3], &[true, true, false, false], &[1, 9, 0], &[true, true, false], 1);
        assert_eq!(padded[..2 * d], other_pad[..2 * d]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let (cfg, p) = setup();
        let d = cfg.d_model;
        let (s1, s2) = ([6, 7, 8], [9, 10, 11]);
        let (t1, t2) = ([1, 12], [1, 13]);
        let both = run(&cfg, &p, &[s1, s2].concat(), &[true; 6], &[t1, t2].concat(), &[true; 4], 2);
        let swapped = run(&cfg, &p, &[s2, s1].concat(), &[true; 6], &[t2, t1].concat(), &[true; 4], 2);
        let alone = run(&cfg, &p, &s1, &[true; 3], &t1, &[true; 2], 1);
        assert_eq!(both[..2 * d], alone[..]);
        assert_eq!(both[..2 * d], swapped[2 * d..]);
        assert_eq!(both[2 * d..], swapped[..2 * d]);
    }

    #[test]
    fn dropout_is_seeded() {
        let mut cfg = ModelConfig::toy(16);
        cfg.dropout = 0.3;
        let p = ModelParams::init(&cfg, 5).unwrap();
        let go = |seed: u64| {
            let tape = Tape::new();
            let m = p.bind(&tape, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = encode(&tape, &m, &cfg, SeqView::new(&[6, 7, 8], &[true; 3], 1, 3), Some(&mut rng)).unwrap();
            let out = tape.value(h).data().to_vec();
            out
        };
        assert_eq!(go(1), go(1));
        assert_ne!(go(1), go(2));
    }

    #[test]
    fn positions_differ_per_row() {
        let pe = positional_encoding(2, 3, 4);
        assert_eq!(pe.shape(), &[2, 3, 4]);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe.data()[..12], pe.data()[12..]);
        assert_ne!(pe.data()[4..8], pe.data()[8..12]);
    }
}
