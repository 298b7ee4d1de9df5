use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy)]
enum Init {
    /// N(0, 1/fan_in) with fan_in the first dimension.
    Normal,
    Ones,
    Zeros,
}

/// Canonical parameter names and shapes, in binding order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![("embed".into(), vec![v, d], Init::Normal)];
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        out.push((format!("{p}.g"), vec![d], Init::Ones));
        out.push((format!("{p}.b"), vec![d], Init::Zeros));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d], Init::Normal));
        }
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        out.push((format!("{p}.w1"), vec![d, f], Init::Normal));
        out.push((format!("{p}.b1"), vec![f], Init::Zeros));
        out.push((format!("{p}.w2"), vec![f, d], Init::Normal));
        out.push((format!("{p}.b2"), vec![d], Init::Zeros));
    };
    for l in 0..cfg.encoder_layers {
        norm(&mut out, &format!("enc.{l}.ln1"));
        attn(&mut out, &format!("enc.{l}.self"));
        norm(&mut out, &format!("enc.{l}.ln2"));
        ffn(&mut out, &format!("enc.{l}.ffn"));
    }
    norm(&mut out, "enc.ln_f");
    for l in 0..cfg.decoder_layers {
        norm(&mut out, &format!("dec.{l}.ln1"));
        attn(&mut out, &format!("dec.{l}.self"));
        norm(&mut out, &format!("dec.{l}.ln2"));
        attn(&mut out, &format!("dec.{l}.cross"));
        norm(&mut out, &format!("dec.{l}.ln3"));
        ffn(&mut out, &format!("dec.{l}.ffn"));
    }
    norm(&mut out, "dec.ln_f");
    if !cfg.tie_embeddings {
        out.push(("lm_head".into(), vec![v, d], Init::Normal));
    }
    out
}

/// All learnable weights, in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Normal => {
                    // Embedding rows get unit expected norm; projections 1/sqrt(fan_in).
                    let fan = if name == "embed" || name == "lm_head" { shape[1] } else { shape[0] };
                    let dist = Normal::new(0.0, 1.0 / (fan as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { names, tensors })
    }

    /// Reassembles parameters from named tensors, checking them against
    /// the layout implied by `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let expected = layout(cfg);
        if expected.len() != named.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es, _), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(ModelError::ConfigMismatch(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape, cfg: &ModelConfig) -> BoundModel {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundModel::from_vars(cfg, &vars)
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &Tape, cfg: &ModelConfig) -> BoundModel {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        BoundModel::from_vars(cfg, &vars)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub ln1: NormVars,
    pub attn: AttentionVars,
    pub ln2: NormVars,
    pub ffn: FeedForwardVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerVars {
    pub ln1: NormVars,
    pub self_attn: AttentionVars,
    pub ln2: NormVars,
    pub cross_attn: AttentionVars,
    pub ln3: NormVars,
    pub ffn: FeedForwardVars,
}

/// Parameters as tape nodes, structured by role.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub embed: Var,
    pub encoder: Vec<EncoderLayerVars>,
    pub encoder_norm: NormVars,
    pub decoder: Vec<DecoderLayerVars>,
    pub decoder_norm: NormVars,
    pub lm_head: Option<Var>,
}

impl BoundModel {
    /// Interprets `vars` (in canonical order) as the model's parameters.
    ///
    /// # Panics
    /// If `vars` is shorter than the layout of `cfg`.
    pub fn from_vars(cfg: &ModelConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut take = || it.next().expect("too few parameter vars for config");
        let embed = take();
        fn norm(t: &mut dyn FnMut() -> Var) -> NormVars {
            NormVars { gamma: t(), beta: t() }
        }
        fn attn(t: &mut dyn FnMut() -> Var) -> AttentionVars {
            AttentionVars { wq: t(), wk: t(), wv: t(), wo: t() }
        }
        fn ffn(t: &mut dyn FnMut() -> Var) -> FeedForwardVars {
            FeedForwardVars { w1: t(), b1: t(), w2: t(), b2: t() }
        }
        let encoder = (0..cfg.encoder_layers)
            .map(|_| EncoderLayerVars { ln1: norm(&mut take), attn: attn(&mut take), ln2: norm(&mut take), ffn: ffn(&mut take) })
            .collect();
        let encoder_norm = norm(&mut take);
        let decoder = (0..cfg.decoder_layers)
            .map(|_| DecoderLayerVars {
                ln1: norm(&mut take),
                self_attn: attn(&mut take),
                ln2: norm(&mut take),
                cross_attn: attn(&mut take),
                ln3: norm(&mut take),
                ffn: ffn(&mut take),
            })
            .collect();
        let decoder_norm = norm(&mut take);
        let lm_head = (!cfg.tie_embeddings).then(&mut take);
        Self { vars: vars.to_vec(), embed, encoder, encoder_norm, decoder, decoder_norm, lm_head }
    }
}
