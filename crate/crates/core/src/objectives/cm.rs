//! Hierarchical cross-modal contrast at report, sentence and word level.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::{clip_loss, info_nce};
use crate::error::{Result, VelvetError};
use crate::nn::{l2_normalize, logsumexp_last, softmax_last, Init, Linear, ParamStore, MASK_NEG};
use crate::tribert::TextFeatureSet;
use crate::vision::swin::merge_gather_index;
use crate::vision::VisionPyramid;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 10.0;
pub const BOT_TOKEN_BUDGET: usize = 512;

/// Learnable temperature stored in log space and clamped on use.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_tau: Tensor,
}

impl Temperature {
    pub fn new(ps: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self { log_tau: ps.param(name, &[1], Init::Const(TAU_INIT.ln()))? })
    }

    /// `[1]` tensor holding `tau`.
    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())?.exp()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalPooling {
    #[default]
    Mean,
    /// Smooth maximum with sharpness [`LSE_BETA`].
    LogSumExp,
}

pub const LSE_BETA: f64 = 5.0;

/// Linear maps into the shared space, one pair per level.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub v_top: Linear,
    pub v_mid: Linear,
    pub v_bot: Linear,
    pub t_rep: Linear,
    pub t_sent: Linear,
    pub t_word: Linear,
    pub tau_top: Temperature,
    pub tau_mid: Temperature,
    pub tau_bot: Temperature,
}

impl ProjectionHeads {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_top: usize,
        c_mid: usize,
        c_bot: usize,
        c_t: usize,
        dim: usize,
    ) -> Result<Self> {
        let l = |ps: &mut ParamStore, n: &str, i: usize| Linear::new(ps, &format!("{name}.{n}"), i, dim, true);
        Ok(Self {
            v_top: l(ps, "v_top", c_top)?,
            v_mid: l(ps, "v_mid", c_mid)?,
            v_bot: l(ps, "v_bot", c_bot)?,
            t_rep: l(ps, "t_rep", c_t)?,
            t_sent: l(ps, "t_sent", c_t)?,
            t_word: l(ps, "t_word", c_t)?,
            tau_top: Temperature::new(ps, &format!("{name}.log_tau_top"))?,
            tau_mid: Temperature::new(ps, &format!("{name}.log_tau_mid"))?,
            tau_bot: Temperature::new(ps, &format!("{name}.log_tau_bot"))?,
        })
    }
}

/// 2×2×2 average pooling of `[N, r³, C]` tokens until at most `budget`
/// remain or the grid can no longer be halved.
pub fn pool_tokens(x: &Tensor, mut res: usize, budget: usize) -> Result<(Tensor, usize)> {
    let mut x = x.clone();
    while res.pow(3) > budget && res % 2 == 0 {
        let (n, l, c) = x.dims3()?;
        let idx: Vec<u32> = merge_gather_index(res).into_iter().map(|i| i as u32).collect();
        let idx = Tensor::from_vec(idx, l, x.device())?;
        x = x.index_select(&idx, 1)?.reshape((n, l / 8, 8, c))?.mean(2)?;
        res /= 2;
    }
    Ok((x, res))
}

pub fn loss_cm_top(g_v_top: &Tensor, g_t_rep: &Tensor, tau: &Tensor) -> Result<Tensor> {
    clip_loss(g_v_top, g_t_rep, tau)
}

/// Parameter-free single-head cross-attention of every text unit of every
/// report against every visual context.
///
/// `queries: [Nt, K, D]`, `mask: [Nt, K]`, `context: [Nv, T, D]`.
/// Returns `[Nv, Nt, K, D]` with masked query rows zeroed.
pub fn contextualize_all(queries: &Tensor, mask: &Tensor, context: &Tensor) -> Result<Tensor> {
    let (nt, k, d) = queries.dims3()?;
    let (nv, t, dc) = context.dims3()?;
    if t == 0 {
        return Err(VelvetError::EmptyContext);
    }
    if d != dc {
        return Err(crate::nn::shape_err(format!("query dim {d} vs context dim {dc}")));
    }
    let q = queries.reshape((1, nt * k, d))?.broadcast_as((nv, nt * k, d))?.contiguous()?;
    let scores = (q.matmul(&context.t()?)? * (1.0 / (d as f64).sqrt()))?;
    let out = softmax_last(&scores)?.matmul(context)?.reshape((nv, nt, k, d))?;
    Ok(out.broadcast_mul(&mask.reshape((1, nt, k, 1))?)?)
}

/// Paired form: query set `i` attends context `i` only. `[N, K, D]`.
pub fn contextualize(queries: &Tensor, mask: &Tensor, context: &Tensor) -> Result<Tensor> {
    let (n, k, d) = queries.dims3()?;
    if context.dims()[1] == 0 {
        return Err(VelvetError::EmptyContext);
    }
    let scores = (queries.matmul(&context.t()?)? * (1.0 / (d as f64).sqrt()))?;
    let out = softmax_last(&scores)?.matmul(context)?;
    Ok(out.broadcast_mul(&mask.reshape((n, k, 1))?)?)
}

/// Pair score matrix `A[i, j]` from per-unit cosines of the contextualized
/// units `g_tc [Nv, Nt, K, D]` and the originals `g_t [Nt, K, D]`.
pub fn local_similarity(
    g_tc: &Tensor,
    g_t: &Tensor,
    mask: &Tensor,
    pooling: LocalPooling,
) -> Result<Tensor> {
    let (nv, nt, k, d) = g_tc.dims4()?;
    let counts: Vec<f64> = mask.to_dtype(candle_core::DType::F64)?.sum(D::Minus1)?.to_vec1()?;
    if let Some(j) = counts.iter().position(|&c| c < 0.5) {
        return Err(VelvetError::NoValidUnits(j));
    }
    let a = l2_normalize(g_tc)?;
    let b = l2_normalize(g_t)?.reshape((1, nt, k, d))?;
    let cos = a.broadcast_mul(&b)?.sum(D::Minus1)?;
    let m = mask.reshape((1, nt, k))?;
    let count = Tensor::from_vec(counts.clone(), nt, mask.device())?.to_dtype(mask.dtype())?;
    let s = match pooling {
        LocalPooling::Mean => {
            cos.broadcast_mul(&m)?.sum(D::Minus1)?.broadcast_div(&count.reshape((1, nt))?)?
        }
        LocalPooling::LogSumExp => {
            let neg = ((m.ones_like()? - &m)? * MASK_NEG)?;
            let z = (cos * LSE_BETA)?.broadcast_add(&neg)?.contiguous()?;
            let lse = logsumexp_last(&z)?.squeeze(D::Minus1)?;
            let logc = count.log()?.reshape((1, nt))?;
            (lse.broadcast_sub(&logc)? * (1.0 / LSE_BETA))?
        }
    };
    Ok(s.reshape((nv, nt))?)
}

pub fn loss_cm_local(
    g_tc: &Tensor,
    g_t: &Tensor,
    mask: &Tensor,
    tau: &Tensor,
    pooling: LocalPooling,
) -> Result<Tensor> {
    let a = local_similarity(g_tc, g_t, mask, pooling)?;
    info_nce(&a.broadcast_div(tau)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmFlags {
    pub top: bool,
    pub mid: bool,
    pub bot: bool,
}

/// Per-level contrastive losses; `None` for disabled levels.
#[derive(Debug, Clone, Default)]
pub struct CmLosses {
    pub top: Option<Tensor>,
    pub mid: Option<Tensor>,
    pub bot: Option<Tensor>,
}

impl CmLosses {
    pub fn total(&self) -> Result<Option<Tensor>> {
        sum_present(&[&self.top, &self.mid, &self.bot])
    }
}

pub(crate) fn sum_present(parts: &[&Option<Tensor>]) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = None;
    for p in parts.iter().filter_map(|p| p.as_ref()) {
        acc = Some(match acc {
            None => p.clone(),
            Some(a) => (a + p)?,
        });
    }
    Ok(acc)
}

impl ProjectionHeads {
    /// Shared-space report and volume embeddings used for retrieval and mining.
    pub fn global(&self, pyr: &VisionPyramid, text: &TextFeatureSet) -> Result<(Tensor, Tensor)> {
        Ok((self.v_top.forward(&pyr.pooled_top)?, self.t_rep.forward(&text.rep)?))
    }

    pub fn loss_cm(
        &self,
        pyr: &VisionPyramid,
        text: &TextFeatureSet,
        flags: CmFlags,
        pooling: LocalPooling,
    ) -> Result<CmLosses> {
        let mut out = CmLosses::default();
        if flags.top {
            let (gv, gt) = self.global(pyr, text)?;
            out.top = Some(loss_cm_top(&gv, &gt, &self.tau_top.tau()?)?);
        }
        if flags.mid {
            let ctx = self.v_mid.forward(&pyr.f_mid)?;
            let q = self.t_sent.forward(&text.sent)?;
            let tc = contextualize_all(&q, &text.sent_valid, &ctx)?;
            out.mid = Some(loss_cm_local(&tc, &q, &text.sent_valid, &self.tau_mid.tau()?, pooling)?);
        }
        if flags.bot {
            let (pooled, _) = pool_tokens(&pyr.f_bot, pyr.res_bot, BOT_TOKEN_BUDGET)?;
            let ctx = self.v_bot.forward(&pooled)?;
            let q = self.t_word.forward(&text.word)?;
            let tc = contextualize_all(&q, &text.word_valid, &ctx)?;
            out.bot = Some(loss_cm_local(&tc, &q, &text.word_valid, &self.tau_bot.tau()?, pooling)?);
        }
        Ok(out)
    }
}
