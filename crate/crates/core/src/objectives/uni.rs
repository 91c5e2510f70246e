//! Uni-modal self-supervision: masked language modelling on reports and the
//! inpainting / rotation / contrastive trio on sub-volumes.

use candle_core::{Device, Tensor};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cm::Temperature;
use super::{clip_loss, cross_entropy};
use crate::error::{Result, VelvetError};
use crate::nn::{index_tensor, LayerNorm, Linear, ParamStore};
use crate::report_prep::Vocabulary;
use crate::tribert::{Role, TriBatch};
use crate::vision::swin::shuffle_gather_index;
use crate::vision::Volume;

pub const IGNORE_LABEL: i64 = -100;
pub const MASK_RATIO: f64 = 0.15;
pub const DROP_RATIO: f64 = 0.30;
pub const DROP_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTextBatch {
    /// `[n * len]`, corrupted copy of the batch ids.
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Vec<i64>,
    /// Flat positions `b * len + t` of selected tokens, ascending.
    pub positions: Vec<usize>,
    pub corruption: Vec<Corruption>,
}

impl MaskedTextBatch {
    pub fn targets(&self) -> Vec<u32> {
        self.positions.iter().map(|&p| self.labels[p] as u32).collect()
    }
}

/// Draw `round(ratio * m)` word positions per report (`m` = its word
/// tokens) and corrupt them 80/10/10 into `[MASK]` / random body token /
/// unchanged. Structural tokens are never selected.
pub fn mask_tokens<R: Rng + ?Sized>(
    batch: &TriBatch,
    vocab: &Vocabulary,
    ratio: f64,
    rng: &mut R,
) -> MaskedTextBatch {
    let mut input_ids = batch.token_ids.clone();
    let mut labels = vec![IGNORE_LABEL; input_ids.len()];
    let mut positions = Vec::new();
    let mut corruption = Vec::new();
    let body = vocab.first_body_id()..vocab.len() as u32;
    for b in 0..batch.n {
        let words: Vec<usize> = (0..batch.len)
            .filter(|&t| batch.role(b, t) == Role::Word)
            .map(|t| b * batch.len + t)
            .collect();
        let k = ((ratio * words.len() as f64).round() as usize).min(words.len());
        let mut picked: Vec<usize> = index::sample(rng, words.len(), k).into_iter().map(|i| words[i]).collect();
        picked.sort_unstable();
        for p in picked {
            labels[p] = input_ids[p] as i64;
            let u: f64 = rng.gen();
            let c = if u < 0.8 {
                input_ids[p] = vocab.mask_id();
                Corruption::Mask
            } else if u < 0.9 {
                input_ids[p] = rng.gen_range(body.clone());
                Corruption::Random
            } else {
                Corruption::Keep
            };
            positions.push(p);
            corruption.push(c);
        }
    }
    MaskedTextBatch { input_ids, labels, positions, corruption }
}

/// Vocabulary classifier applied at selected positions.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl MlmHead {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, vocab_size, true)?,
        })
    }

    /// `states: [N, len, C]`, flat positions into `N * len`. Returns `[P, V]`.
    pub fn logits_at(&self, states: &Tensor, positions: &[usize]) -> Result<Tensor> {
        if positions.is_empty() {
            return Err(VelvetError::NoMaskedPositions);
        }
        let (n, len, c) = states.dims3()?;
        let idx: Vec<u32> = positions.iter().map(|&p| p as u32).collect();
        let rows = states.reshape((n * len, c))?.index_select(&index_tensor(&idx, states.device())?, 0)?;
        self.proj.forward(&self.norm.forward(&rows)?)
    }
}

/// Mean cross-entropy over labelled positions.
pub fn loss_mlm(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(VelvetError::NoMaskedPositions);
    }
    cross_entropy(logits, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintingTask {
    pub corrupted: Volume,
    /// One flag per voxel, `true` where dropped.
    pub dropped: Vec<bool>,
    pub original: Volume,
}

impl InpaintingTask {
    pub fn drop_fraction(&self) -> f64 {
        self.dropped.iter().filter(|&&d| d).count() as f64 / self.dropped.len() as f64
    }
}

/// Zero random cubic blocks, in shuffled order, until at least `ratio` of
/// the voxels are gone.
pub fn make_inpainting<R: Rng + ?Sized>(
    vol: &Volume,
    block: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<InpaintingTask> {
    if block == 0 || vol.dims.iter().any(|&d| d % block != 0) {
        return Err(VelvetError::BadBlockSize { block, side: vol.dims[0] });
    }
    let nb = [vol.dims[0] / block, vol.dims[1] / block, vol.dims[2] / block];
    let mut order: Vec<usize> = (0..nb[0] * nb[1] * nb[2]).collect();
    order.shuffle(rng);
    let need = (ratio * vol.len() as f64).ceil() as usize;
    let mut dropped = vec![false; vol.len()];
    let mut count = 0;
    let mut corrupted = vol.clone();
    for b in order {
        if count >= need {
            break;
        }
        let (bz, by, bx) = (b / (nb[1] * nb[2]), b / nb[2] % nb[1], b % nb[2]);
        for z in bz * block..(bz + 1) * block {
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let i = vol.idx(z, y, x);
                    dropped[i] = true;
                    corrupted.data[i] = 0.0;
                }
            }
        }
        count += block.pow(3);
    }
    Ok(InpaintingTask { corrupted, dropped, original: vol.clone() })
}

/// Mean squared error over dropped voxels. All three are `[N, V]`; `mask`
/// holds 1 where dropped.
pub fn loss_inp(recon: &Tensor, original: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let se = (recon - original)?.sqr()?.mul(mask)?.sum_all()?;
    Ok(se.broadcast_div(&mask.sum_all()?)?)
}

/// Shallow transposed-convolution decoder from the top feature map back to
/// voxels. Each stage maps a token to its 2×2×2 children (a stride-2,
/// kernel-2 transposed convolution) and reorders them onto the doubled grid.
#[derive(Debug, Clone)]
pub struct ReconHead {
    pub ups: Vec<Linear>,
    pub out: Linear,
    shuffles: Vec<Tensor>,
    res_top: usize,
}

impl ReconHead {
    pub fn new(ps: &mut ParamStore, name: &str, c_top: usize, res_top: usize, side: usize) -> Result<Self> {
        if res_top == 0 || side % res_top != 0 || !(side / res_top).is_power_of_two() {
            return Err(VelvetError::Config(format!("cannot upsample {res_top}³ to {side}³ by doubling")));
        }
        let steps = (side / res_top).trailing_zeros() as usize;
        let mut ups = Vec::new();
        let mut shuffles = Vec::new();
        let mut c = c_top;
        let mut r = res_top;
        for s in 0..steps {
            let next = (c / 2).max(4);
            ups.push(Linear::new(ps, &format!("{name}.up{s}"), c, 8 * next, true)?);
            let idx: Vec<u32> = shuffle_gather_index(r).into_iter().map(|i| i as u32).collect();
            shuffles.push(index_tensor(&idx, ps.device())?);
            c = next;
            r *= 2;
        }
        Ok(Self { out: Linear::new(ps, &format!("{name}.out"), c, 1, true)?, ups, shuffles, res_top })
    }

    /// `f_top: [N, r³, C]` to `[N, side³]` voxel intensities.
    pub fn forward(&self, f_top: &Tensor) -> Result<Tensor> {
        let (n, l, _) = f_top.dims3()?;
        if l != self.res_top.pow(3) {
            return Err(crate::nn::shape_err(format!("recon head expects {}³ tokens, got {l}", self.res_top)));
        }
        let mut h = f_top.clone();
        let mut l = l;
        for (i, (up, sh)) in self.ups.iter().zip(&self.shuffles).enumerate() {
            let c = up.out_dim() / 8;
            h = up.forward(&h)?.reshape((n, l * 8, c))?.index_select(sh, 1)?;
            if i + 1 < self.ups.len() {
                h = h.gelu()?;
            }
            l *= 8;
        }
        Ok(self.out.forward(&h)?.reshape((n, l))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationAxis {
    /// Rotate within the x–y plane.
    #[default]
    Z,
    Y,
    X,
}

impl RotationAxis {
    fn plane(self) -> (usize, usize) {
        match self {
            RotationAxis::Z => (1, 2),
            RotationAxis::Y => (0, 2),
            RotationAxis::X => (0, 1),
        }
    }
}

/// Rotate by `k * 90°` in the plane orthogonal to `axis`.
pub fn rotate90(vol: &Volume, k: usize, axis: RotationAxis) -> Result<Volume> {
    let (a, b) = axis.plane();
    if vol.dims[a] != vol.dims[b] {
        return Err(VelvetError::NonSquarePlane(vol.dims[a], vol.dims[b]));
    }
    let n = vol.dims[a];
    let mut cur = vol.clone();
    for _ in 0..k % 4 {
        let mut next = Volume::zeros(cur.dims);
        for z in 0..cur.dims[0] {
            for y in 0..cur.dims[1] {
                for x in 0..cur.dims[2] {
                    let mut s = [z, y, x];
                    let (pa, pb) = (s[a], s[b]);
                    // out[.., i, j] = in[.., n-1-j, i]
                    s[a] = n - 1 - pb;
                    s[b] = pa;
                    let i = next.idx(z, y, x);
                    next.data[i] = cur.at(s[0], s[1], s[2]);
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationTask {
    pub rotated: Volume,
    pub label: usize,
}

pub fn make_rotation<R: Rng + ?Sized>(vol: &Volume, axis: RotationAxis, rng: &mut R) -> Result<RotationTask> {
    let label = rng.gen_range(0..4);
    Ok(RotationTask { rotated: rotate90(vol, label, axis)?, label })
}

pub fn loss_rot(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    cross_entropy(logits, labels)
}

/// Two-layer projection into the 512-d contrastive space plus its temperature.
#[derive(Debug, Clone)]
pub struct ContrastHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub tau: Temperature,
}

impl ContrastHead {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), c_in, dim, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim, true)?,
            tau: Temperature::new(ps, &format!("{name}.log_tau"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

pub fn loss_con(z1: &Tensor, z2: &Tensor, tau: &Tensor) -> Result<Tensor> {
    clip_loss(z1, z2, tau)
}

/// Vision self-supervision heads.
#[derive(Debug, Clone)]
pub struct VisionSslHeads {
    pub inp: ReconHead,
    pub rot: Linear,
    pub con: ContrastHead,
}

/// Flags as 0/1 values for use as a loss mask.
pub fn mask_tensor(flags: &[bool], shape: &[usize], dtype: candle_core::DType, dev: &Device) -> Result<Tensor> {
    let v: Vec<f32> = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}
