//! Dense `f64` tensors, a reverse-mode tape, finite-difference checking and
//! a stable binary format for named tensors.

pub mod gradcheck;
pub mod serialize;
mod tape;
mod tensor;

pub use tape::{AttentionLayout, Gradients, PoolKind, Reduction, Tape, TapeOptions, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("vector norm below 1e-12 (degenerate pooled representation)")]
    ZeroNorm,
    #[error("pooling over a segment with no unmasked rows")]
    AllMasked,
    #[error("every target position is padding")]
    AllPadded,
    #[error("{op} received an empty input")]
    EmptyInput { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tape already consumed by a backward pass")]
    TapeReused,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64, NumericsError> {
    if u.len() != v.len() || u.is_empty() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_sim",
            detail: format!("lengths {} and {}", u.len(), v.len()),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < tape::ZERO_NORM || nv < tape::ZERO_NORM {
        return Err(NumericsError::ZeroNorm);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Masked column-wise max over the rows of `m` whose flag is set.
pub fn max_pool_rows(m: &Tensor, row_mask: &[bool]) -> Result<Vec<f64>, NumericsError> {
    pool_rows_plain(m, row_mask, PoolKind::Max)
}

/// Masked column-wise mean over the rows of `m` whose flag is set.
pub fn mean_pool_rows(m: &Tensor, row_mask: &[bool]) -> Result<Vec<f64>, NumericsError> {
    pool_rows_plain(m, row_mask, PoolKind::Mean)
}

fn pool_rows_plain(m: &Tensor, row_mask: &[bool], kind: PoolKind) -> Result<Vec<f64>, NumericsError> {
    if row_mask.len() != m.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "pool_rows",
            detail: format!("{} rows, {} mask flags", m.rows(), row_mask.len()),
        });
    }
    let rows: Vec<usize> = (0..m.rows()).filter(|&r| row_mask[r]).collect();
    let tape = Tape::with_options(TapeOptions { check_finite: false, ..TapeOptions::default() });
    let v = tape.constant(m.clone());
    let out = tape.pool_rows(v, &[rows], kind)?;
    let data = tape.value(out).data().to_vec();
    Ok(data)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        tape::softmax_in_place(row);
    }
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = tape::log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}
