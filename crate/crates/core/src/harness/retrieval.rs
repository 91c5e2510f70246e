use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::Sample;
use super::model::VelvetModel;
use crate::error::{Result, VelvetError};
use crate::nn::{l2_normalize, to_f64_vec};

/// Recall@K in both directions. `srr[i]` and `rsr[i]` pair with `ks[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    pub ks: Vec<usize>,
    /// scan → report
    pub srr: Vec<f64>,
    /// report → scan
    pub rsr: Vec<f64>,
    pub sim_sha256: String,
}

impl RetrievalReport {
    pub fn srr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.srr[i])
    }

    pub fn rsr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.rsr[i])
    }
}

/// 0-based rank of `target` among `scores`, with ties going to the lower index.
pub fn rank_of(scores: impl Iterator<Item = f64>, target: usize, target_score: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > target_score || (s == target_score && j < target))
        .count()
}

/// `sim[i * n + j]` is the score of scan `i` against report `j`.
pub fn recall_from_similarity(sim: &[f64], n: usize, ks: &[usize]) -> Result<RetrievalReport> {
    if n < 2 || sim.len() != n * n {
        return Err(VelvetError::BatchTooSmall(n));
    }
    let srr_rank: Vec<usize> = (0..n).map(|i| rank_of(sim[i * n..(i + 1) * n].iter().copied(), i, sim[i * n + i])).collect();
    let rsr_rank: Vec<usize> = (0..n).map(|j| rank_of((0..n).map(|i| sim[i * n + j]), j, sim[j * n + j])).collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    let mut h = Sha256::new();
    for v in sim {
        h.update(v.to_le_bytes());
    }
    let sim_sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(RetrievalReport {
        n,
        ks: ks.to_vec(),
        srr: ks.iter().map(|&k| frac(&srr_rank, k)).collect(),
        rsr: ks.iter().map(|&k| frac(&rsr_rank, k)).collect(),
        sim_sha256,
    })
}

/// Dot-product similarity of L2-normalised shared-space embeddings.
pub fn similarity(gv: &candle_core::Tensor, gt: &candle_core::Tensor) -> Result<Vec<f64>> {
    let gv = l2_normalize(gv)?;
    let gt = l2_normalize(gt)?;
    to_f64_vec(&gv.matmul(&gt.t()?)?)
}

/// Embed every pair and score Recall@K.
pub fn eval_retrieval(model: &VelvetModel, samples: &[Sample], ks: &[usize], batch: usize) -> Result<RetrievalReport> {
    let n = samples.len();
    if n < 2 {
        return Err(VelvetError::BatchTooSmall(n));
    }
    let mut gvs = Vec::new();
    let mut gts = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (gv, gt) = model.embed_pairs(&refs)?;
        gvs.push(gv);
        gts.push(gt);
    }
    let gv = candle_core::Tensor::cat(&gvs, 0)?;
    let gt = candle_core::Tensor::cat(&gts, 0)?;
    recall_from_similarity(&similarity(&gv, &gt)?, n, ks)
}
