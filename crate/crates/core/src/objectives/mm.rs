//! Multi-modal fusion decoder, image-report matching with in-batch hard
//! negatives, and vision-conditioned masked language modelling.

use candle_core::Tensor;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bce_with_logits;
use super::uni::{loss_mlm, MlmHead};
use crate::error::{Result, VelvetError};
use crate::vision::{VisionConfig, VisionPyramid};
use crate::nn::{index_tensor, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiModalConfig {
    pub num_decoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub memory: MemoryLevel,
}

impl Default for MultiModalConfig {
    fn default() -> Self {
        Self { num_decoder_layers: 2, heads: 12, ffn_mult: 4, memory: MemoryLevel::Top }
    }
}

/// Pyramid level whose tokens form the cross-attention memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MemoryLevel {
    #[default]
    Top,
    Mid,
}

impl MemoryLevel {
    pub fn tokens<'a>(&self, pyr: &'a VisionPyramid) -> &'a Tensor {
        match self {
            MemoryLevel::Top => &pyr.f_top,
            MemoryLevel::Mid => &pyr.f_mid,
        }
    }

    pub fn channels(&self, cfg: &VisionConfig) -> usize {
        match self {
            MemoryLevel::Top => cfg.c_top(),
            MemoryLevel::Mid => cfg.c_mid(),
        }
    }
}

/// Self-attention over text (tri-level mask kept), cross-attention to
/// vision tokens, feed-forward. Pre-norm residual throughout.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, dim, heads)?,
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dim)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    /// `x: [B, L, C]`, `bias: [B, 1, L, L]`, `memory: [B, T, C]` or `None`
    /// to skip the cross-attention sub-layer. Returns states and cross-attention probabilities.
    pub fn forward(&self, x: &Tensor, bias: &Tensor, memory: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
        let h = self.ln1.forward(x)?;
        let (a, _) = self.self_attn.forward(&h, &h, Some(bias))?;
        let mut x = (x + a)?;
        let mut probs = None;
        if let Some(mem) = memory {
            let (c, p) = self.cross_attn.forward(&self.ln2.forward(&x)?, mem, None)?;
            x = (x + c)?;
            probs = Some(p);
        }
        let x = (&x + self.ffn.forward(&self.ln3.forward(&x)?)?)?;
        Ok((x, probs))
    }
}

#[derive(Debug, Clone)]
pub struct MultiModalEncoder {
    pub memory: MemoryLevel,
    pub vis_proj: Linear,
    pub blocks: Vec<DecoderBlock>,
    /// Final norm on fused states; the pre-norm blocks leave the residual
    /// stream at embedding scale otherwise.
    pub norm: LayerNorm,
    /// Zero-initialised single-logit matching classifier on fused `[CLS]`.
    pub match_head: Linear,
    pub mlm_head: MlmHead,
}

impl MultiModalEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &MultiModalConfig,
        c_t: usize,
        c_vis: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(Self {
            memory: cfg.memory,
            vis_proj: Linear::new(ps, &format!("{name}.vis_proj"), c_vis, c_t, true)?,
            blocks: (0..cfg.num_decoder_layers)
                .map(|i| DecoderBlock::new(ps, &format!("{name}.block{i}"), c_t, cfg.heads, c_t * cfg.ffn_mult))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c_t)?,
            match_head: Linear::with_init(ps, &format!("{name}.match_head"), c_t, 1, true, Init::Zeros)?,
            mlm_head: MlmHead::new(ps, &format!("{name}.mlm_head"), c_t, vocab_size)?,
        })
    }

    /// Fuse text states `[B, L, C]` with vision tokens `[B, T, Cv]`.
    pub fn mm_encode(&self, text: &Tensor, bias: &Tensor, vision: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if vision.dims().get(1).copied().unwrap_or(0) == 0 {
            return Err(VelvetError::EmptyContext);
        }
        if text.dims()[0] != vision.dims()[0] {
            return Err(crate::nn::shape_err(format!(
                "{} text rows vs {} vision rows",
                text.dims()[0],
                vision.dims()[0]
            )));
        }
        let mem = self.vis_proj.forward(vision)?;
        let mut h = text.clone();
        let mut probs = Vec::new();
        for b in &self.blocks {
            let (next, p) = b.forward(&h, bias, Some(&mem))?;
            h = next;
            probs.extend(p);
        }
        Ok((self.norm.forward(&h)?, probs))
    }

    /// Decoder stack with every cross-attention sub-layer skipped.
    pub fn text_only(&self, text: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let mut h = text.clone();
        for b in &self.blocks {
            h = b.forward(&h, bias, None)?.0;
        }
        self.norm.forward(&h)
    }

    /// `[B]` matching logits from fused states.
    pub fn match_logits(&self, fused: &Tensor) -> Result<Tensor> {
        let cls = fused.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(self.match_head.forward(&cls)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiningDirection {
    /// Hard reports for scans on even steps, hard scans for reports on odd steps.
    #[default]
    Alternate,
    ScanToReport,
    ReportToScan,
    Both,
}

/// For each row `i` of the row-major `[n, n]` similarity, sample `j != i`
/// with probability proportional to `exp(sim[i][j])`.
pub fn mine_hard_negatives<R: Rng + ?Sized>(sim: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(VelvetError::BatchTooSmall(n));
    }
    if sim.len() != n * n {
        return Err(crate::nn::shape_err(format!("{} similarities for n = {n}", sim.len())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| if j == i { 0.0 } else { (v - max).exp() })
            .collect();
        let dist = WeightedIndex::new(&w).map_err(|e| VelvetError::Data(format!("mining weights: {e}")))?;
        out.push(dist.sample(rng));
    }
    Ok(out)
}

pub fn transpose_square(sim: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|k| sim[(k % n) * n + k / n]).collect()
}

/// Pair list for the matching loss: `(text index, vision index, label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchBatch {
    pub text_idx: Vec<usize>,
    pub vis_idx: Vec<usize>,
    pub labels: Vec<f64>,
}

/// Positives first, then one mined negative per positive for each active
/// direction. `sim[i][j]` compares scan `i` with report `j`.
pub fn build_match_batch<R: Rng + ?Sized>(
    sim: &[f64],
    n: usize,
    direction: MiningDirection,
    step: u64,
    rng: &mut R,
) -> Result<MatchBatch> {
    let mut mb = MatchBatch {
        text_idx: (0..n).collect(),
        vis_idx: (0..n).collect(),
        labels: vec![1.0; n],
    };
    let (s2r, r2s) = match direction {
        MiningDirection::Alternate => (step % 2 == 0, step % 2 == 1),
        MiningDirection::ScanToReport => (true, false),
        MiningDirection::ReportToScan => (false, true),
        MiningDirection::Both => (true, true),
    };
    if s2r {
        let neg = mine_hard_negatives(sim, n, rng)?;
        for (i, j) in neg.into_iter().enumerate() {
            mb.vis_idx.push(i);
            mb.text_idx.push(j);
            mb.labels.push(0.0);
        }
    }
    if r2s {
        let neg = mine_hard_negatives(&transpose_square(sim, n), n, rng)?;
        for (j, i) in neg.into_iter().enumerate() {
            mb.text_idx.push(j);
            mb.vis_idx.push(i);
            mb.labels.push(0.0);
        }
    }
    Ok(mb)
}

/// Gather rows of a batch-major tensor.
pub fn take_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    Ok(x.index_select(&index_tensor(&idx, x.device())?, 0)?)
}

pub fn loss_match(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    bce_with_logits(logits, labels)
}

pub fn loss_mm_mlm(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    loss_mlm(logits, targets)
}
