//! Training objectives: hierarchical cross-modal contrast, uni-modal
//! self-supervision, and multi-modal matching / masked modelling.

pub mod cm;
pub mod mm;
pub mod uni;

use candle_core::{Tensor, D};

use crate::error::{Result, VelvetError};
use crate::nn::logsumexp_last;

/// Cross-entropy of every row of `logits [N, N]` against its diagonal entry.
fn diagonal_ce(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dims()[0];
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let pos = (logits * eye)?.sum(D::Minus1)?;
    let lse = logsumexp_last(logits)?.squeeze(D::Minus1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Symmetric InfoNCE on a square score matrix with positives on the diagonal.
pub fn info_nce(logits: &Tensor) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if r != c {
        return Err(crate::nn::shape_err(format!("score matrix {r}x{c} is not square")));
    }
    let rows = diagonal_ce(logits)?;
    let cols = diagonal_ce(&logits.t()?.contiguous()?)?;
    Ok(((rows + cols)? * 0.5)?)
}

/// InfoNCE over cosine similarities of `a [N, D]` and `b [N, D]` scaled by `1/tau`.
pub fn clip_loss(a: &Tensor, b: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let n = a.dims()[0];
    if n < 2 {
        return Err(VelvetError::BatchTooSmall(n));
    }
    let sim = crate::nn::l2_normalize(a)?.matmul(&crate::nn::l2_normalize(b)?.t()?)?;
    info_nce(&sim.broadcast_div(tau)?)
}

/// Mean cross-entropy of `logits [P, V]` against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (p, v) = logits.dims2()?;
    if p != targets.len() {
        return Err(crate::nn::shape_err(format!("{p} logit rows for {} targets", targets.len())));
    }
    let mut onehot = vec![0f64; p * v];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * v + t as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (p, v), logits.device())?.to_dtype(logits.dtype())?;
    let picked = (logits * onehot)?.sum(D::Minus1)?;
    let lse = logsumexp_last(logits)?.squeeze(D::Minus1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Mean binary cross-entropy with logits, computed stably.
pub fn bce_with_logits(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let y = Tensor::from_slice(labels, logits.dims(), logits.device())?.to_dtype(logits.dtype())?;
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (logits * y)?)?.mean_all()?)
}
