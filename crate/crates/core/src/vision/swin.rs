//! Hierarchical shifted-window transformer over cubic volumes.
//!
//! Tokens are kept channels-last as `[N, L, C]` with `L = r³` in z-major
//! order. Window partition, cyclic shift and patch merging are all expressed
//! as precomputed gather indices so autograd only ever sees `index_select`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Result, VelvetError};
use crate::nn::{
    index_tensor, shape_err, softmax_last, FeedForward, Init, LayerNorm, Linear, ParamStore,
    MASK_NEG,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub in_side: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl VisionConfig {
    pub fn swin_t(in_side: usize) -> Self {
        Self {
            in_side,
            patch: 2,
            embed_dim: 48,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window: 6,
            mlp_ratio: 4,
        }
    }

    pub fn swin_s(in_side: usize) -> Self {
        Self { depths: vec![2, 8, 8, 8], heads: vec![4, 8, 16, 32], ..Self::swin_t(in_side) }
    }

    pub fn swin_b(in_side: usize) -> Self {
        Self { embed_dim: 96, ..Self::swin_s(in_side) }
    }

    /// Smallest useful shape: 16³ input, 8 channels, one block per stage.
    pub fn tiny() -> Self {
        Self {
            in_side: 16,
            patch: 2,
            embed_dim: 8,
            depths: vec![1, 1, 1, 1],
            heads: vec![2, 2, 4, 4],
            window: 4,
            mlp_ratio: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, k: usize) -> usize {
        self.embed_dim << k
    }

    pub fn stage_res(&self, k: usize) -> usize {
        self.in_side / self.patch >> k
    }

    pub fn c_top(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn c_mid(&self) -> usize {
        self.stage_dim(self.num_stages() - 2)
    }

    pub fn c_bot(&self) -> usize {
        self.stage_dim(self.num_stages() - 3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VelvetError::Config(m));
        if self.depths.len() < 3 || self.depths.len() != self.heads.len() {
            return bad(format!("need >= 3 stages with matching heads, got {:?}/{:?}", self.depths, self.heads));
        }
        if self.patch == 0 || self.in_side % self.patch != 0 {
            return bad(format!("patch {} does not divide input side {}", self.patch, self.in_side));
        }
        let base = self.in_side / self.patch;
        if base % (1 << (self.num_stages() - 1)) != 0 {
            return bad(format!("token grid {base} cannot halve {} times", self.num_stages() - 1));
        }
        for k in 0..self.num_stages() {
            if self.heads[k] == 0 || self.stage_dim(k) % self.heads[k] != 0 {
                return bad(format!("stage {k}: dim {} not divisible by {} heads", self.stage_dim(k), self.heads[k]));
            }
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        Ok(())
    }
}

/// Window edge and shift used at grid resolution `res`.
pub fn effective_window(res: usize, window: usize) -> (usize, usize) {
    if res > window && res % window == 0 {
        (window, window / 2)
    } else {
        (res, 0)
    }
}

#[inline]
fn lin(r: usize, z: usize, y: usize, x: usize) -> usize {
    (z * r + y) * r + x
}

/// For each slot of the windowed layout, the source token in the unshifted
/// grid. Slot order is window-major (windows z-major), then position within
/// the window (z-major). A cyclic roll by `-shift` is folded in.
pub fn window_gather_index(res: usize, win: usize, shift: usize) -> Vec<usize> {
    let nw = res / win;
    let mut idx = Vec::with_capacity(res * res * res);
    for wz in 0..nw {
        for wy in 0..nw {
            for wx in 0..nw {
                for tz in 0..win {
                    for ty in 0..win {
                        for tx in 0..win {
                            let z = (wz * win + tz + shift) % res;
                            let y = (wy * win + ty + shift) % res;
                            let x = (wx * win + tx + shift) % res;
                            idx.push(lin(res, z, y, x));
                        }
                    }
                }
            }
        }
    }
    idx
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// `[nW, T, T]` booleans: may slot `a` attend slot `b` inside window `w`
/// after the roll. Tokens that wrapped around from the opposite face sit in
/// a different region and are kept apart.
pub fn shift_region_allowed(res: usize, win: usize, shift: usize) -> Vec<bool> {
    let nw = res / win;
    let t = win * win * win;
    let region = |c: usize| -> usize {
        if c < res - win {
            0
        } else if c < res - shift {
            1
        } else {
            2
        }
    };
    let mut out = Vec::with_capacity(nw * nw * nw * t * t);
    for wz in 0..nw {
        for wy in 0..nw {
            for wx in 0..nw {
                let labels: Vec<usize> = (0..t)
                    .map(|s| {
                        let (tz, ty, tx) = (s / (win * win), s / win % win, s % win);
                        let (z, y, x) = (wz * win + tz, wy * win + ty, wx * win + tx);
                        if shift == 0 {
                            0
                        } else {
                            region(z) * 9 + region(y) * 3 + region(x)
                        }
                    })
                    .collect();
                for a in 0..t {
                    for b in 0..t {
                        out.push(labels[a] == labels[b]);
                    }
                }
            }
        }
    }
    out
}

/// Index into the `(2w-1)³` relative-position table for each `(a, b)` pair
/// of window slots.
pub fn relative_position_index(win: usize) -> Vec<usize> {
    let t = win * win * win;
    let m = 2 * win - 1;
    let coord = |s: usize| [s / (win * win), s / win % win, s % win];
    let mut out = Vec::with_capacity(t * t);
    for a in 0..t {
        let ca = coord(a);
        for b in 0..t {
            let cb = coord(b);
            let d: Vec<usize> = (0..3).map(|i| ca[i] + win - 1 - cb[i]).collect();
            out.push((d[0] * m + d[1]) * m + d[2]);
        }
    }
    out
}

/// Source token for each `(output token, neighbour)` of a 2×2×2 merge.
/// Neighbours are ordered z-major over offsets in `{0,1}³`.
pub fn merge_gather_index(res: usize) -> Vec<usize> {
    let h = res / 2;
    let mut idx = Vec::with_capacity(res * res * res);
    for z in 0..h {
        for y in 0..h {
            for x in 0..h {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            idx.push(lin(res, 2 * z + dz, 2 * y + dy, 2 * x + dx));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse layout of [`merge_gather_index`]: for each token of the doubled
/// grid, its row in `[L * 8]` sub-token order.
pub fn shuffle_gather_index(res: usize) -> Vec<usize> {
    invert_permutation(&merge_gather_index(2 * res))
}

/// Voxel offsets of each patch token, patch-major then z-major inside it.
pub fn patch_gather_index(side: usize, patch: usize) -> Vec<usize> {
    let r = side / patch;
    let mut idx = Vec::with_capacity(side * side * side);
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                for a in 0..patch {
                    for b in 0..patch {
                        for c in 0..patch {
                            idx.push(lin(side, z * patch + a, y * patch + b, x * patch + c));
                        }
                    }
                }
            }
        }
    }
    idx
}

fn u32_index(v: &[usize], dev: &Device) -> Result<Tensor> {
    let v: Vec<u32> = v.iter().map(|&i| i as u32).collect();
    index_tensor(&v, dev)
}

/// Precomputed layout for one attention block.
#[derive(Debug, Clone)]
pub struct WindowGeometry {
    pub res: usize,
    pub win: usize,
    pub shift: usize,
    gather: Tensor,
    scatter: Tensor,
    /// `[1, nW, 1, T, T]` or `None` when no shift is applied.
    region_bias: Option<Tensor>,
}

impl WindowGeometry {
    pub fn new(res: usize, window: usize, shifted: bool, dtype: DType, dev: &Device) -> Result<Self> {
        let (win, s) = effective_window(res, window);
        let shift = if shifted { s } else { 0 };
        let g = window_gather_index(res, win, shift);
        let nw = (res / win).pow(3);
        let t = win.pow(3);
        let region_bias = if shift > 0 {
            let allowed = shift_region_allowed(res, win, shift);
            let vals: Vec<f64> = allowed.iter().map(|&a| if a { 0.0 } else { MASK_NEG }).collect();
            Some(Tensor::from_vec(vals, (1, nw, 1, t, t), dev)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            res,
            win,
            shift,
            gather: u32_index(&g, dev)?,
            scatter: u32_index(&invert_permutation(&g), dev)?,
            region_bias,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.res / self.win).pow(3)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win.pow(3)
    }
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2w-1)³, H]`
    pub rel_table: Tensor,
    pub heads: usize,
    rel_index: Tensor,
    win: usize,
}

impl WindowAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, win: usize) -> Result<Self> {
        let m = 2 * win - 1;
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, true)?,
            rel_table: ps.param(&format!("{name}.rel_table"), &[m * m * m, heads], Init::TruncNormal(0.02))?,
            heads,
            rel_index: u32_index(&relative_position_index(win), ps.device())?,
            win,
        })
    }

    /// `[H, T, T]` learned bias.
    pub fn relative_bias(&self) -> Result<Tensor> {
        let t = self.win.pow(3);
        Ok(self
            .rel_table
            .index_select(&self.rel_index, 0)?
            .reshape((t, t, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// `x: [N, L, C]` in grid order; returns the same layout.
    pub fn forward(&self, x: &Tensor, geo: &WindowGeometry) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        if geo.win != self.win {
            return Err(shape_err(format!("window {} built for {}", geo.win, self.win)));
        }
        let nw = geo.num_windows();
        let t = geo.tokens_per_window();
        let h = self.heads;
        let hd = c / h;
        let xw = x.index_select(&geo.gather, 1)?.reshape((n * nw, t, c))?;
        let qkv = self.qkv.forward(&xw)?.reshape((n * nw, t, 3, h, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?
            .broadcast_add(&self.relative_bias()?.unsqueeze(0)?)?;
        let scores = match &geo.region_bias {
            Some(b) => scores.reshape((n, nw, h, t, t))?.broadcast_add(b)?.reshape((n * nw, h, t, t))?,
            None => scores,
        };
        let ctx = softmax_last(&scores)?.matmul(&v)?;
        let ctx = ctx.transpose(1, 2)?.contiguous()?.reshape((n, nw * t, c))?;
        let out = self.proj.forward(&ctx)?;
        Ok(out.index_select(&geo.scatter, 1)?.reshape((n, l, c))?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: FeedForward,
    pub geometry: WindowGeometry,
}

impl SwinBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, &self.geometry)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
    index: Tensor,
}

impl PatchMerge {
    /// `[N, r³, C] -> [N, (r/2)³, 2C]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let g = x.index_select(&self.index, 1)?.reshape((n, l / 8, 8 * c))?;
        self.reduce.forward(&self.norm.forward(&g)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerge>,
}

/// Last three stage outputs, each `[N, L, C]` tokens on a cubic grid.
#[derive(Debug, Clone)]
pub struct VisionPyramid {
    pub f_bot: Tensor,
    pub f_mid: Tensor,
    pub f_top: Tensor,
    /// `[N, c_top]`
    pub pooled_top: Tensor,
    pub res_bot: usize,
    pub res_mid: usize,
    pub res_top: usize,
}

impl VisionPyramid {
    /// Channels-first `[N, C, r, r, r]` view of a token map.
    pub fn spatial(tokens: &Tensor, res: usize) -> Result<Tensor> {
        let (n, _, c) = tokens.dims3()?;
        Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((n, c, res, res, res))?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinEncoder3d {
    pub cfg: VisionConfig,
    pub patch_embed: Linear,
    pub stages: Vec<SwinStage>,
    pub norm_bot: LayerNorm,
    pub norm_mid: LayerNorm,
    pub norm_top: LayerNorm,
    patch_index: Tensor,
}

impl SwinEncoder3d {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = ps.dtype();
        let dev = ps.device().clone();
        let p3 = cfg.patch.pow(3);
        let patch_embed = Linear::new(ps, &format!("{name}.patch_embed"), p3, cfg.embed_dim, true)?;
        let mut stages = Vec::new();
        for k in 0..cfg.num_stages() {
            let (dim, res) = (cfg.stage_dim(k), cfg.stage_res(k));
            let (win, _) = effective_window(res, cfg.window);
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[k] {
                let p = format!("{name}.stage{k}.block{b}");
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(ps, &format!("{p}.norm1"), dim)?,
                    attn: WindowAttention::new(ps, &format!("{p}.attn"), dim, cfg.heads[k], win)?,
                    norm2: LayerNorm::new(ps, &format!("{p}.norm2"), dim)?,
                    mlp: FeedForward::new(ps, &format!("{p}.mlp"), dim, dim * cfg.mlp_ratio)?,
                    geometry: WindowGeometry::new(res, cfg.window, b % 2 == 1, dtype, &dev)?,
                });
            }
            let merge = if k + 1 < cfg.num_stages() {
                let p = format!("{name}.stage{k}.merge");
                Some(PatchMerge {
                    norm: LayerNorm::new(ps, &format!("{p}.norm"), 8 * dim)?,
                    reduce: Linear::new(ps, &format!("{p}.reduce"), 8 * dim, 2 * dim, false)?,
                    index: u32_index(&merge_gather_index(res), &dev)?,
                })
            } else {
                None
            };
            stages.push(SwinStage { blocks, merge });
        }
        Ok(Self {
            norm_bot: LayerNorm::new(ps, &format!("{name}.norm_bot"), cfg.c_bot())?,
            norm_mid: LayerNorm::new(ps, &format!("{name}.norm_mid"), cfg.c_mid())?,
            norm_top: LayerNorm::new(ps, &format!("{name}.norm_top"), cfg.c_top())?,
            patch_index: u32_index(&patch_gather_index(cfg.in_side, cfg.patch), &dev)?,
            patch_embed,
            stages,
            cfg,
        })
    }

    /// Stack volumes into `[N, side³]`.
    pub fn batch_volumes(&self, vols: &[&Volume], dtype: DType, dev: &Device) -> Result<Tensor> {
        let side = self.cfg.in_side;
        let mut data = Vec::with_capacity(vols.len() * side.pow(3));
        for v in vols {
            if v.dims != [side; 3] {
                return Err(shape_err(format!("volume {:?} but encoder expects {side}³", v.dims)));
            }
            data.extend_from_slice(&v.data);
        }
        Ok(Tensor::from_vec(data, (vols.len(), side.pow(3)), dev)?.to_dtype(dtype)?)
    }

    /// `[N, side³]` (or `[N, side, side, side]`) to patch tokens `[N, L, C]`.
    pub fn embed_patches(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dims()[0];
        let side = self.cfg.in_side;
        if x.elem_count() != n * side.pow(3) || n == 0 {
            return Err(shape_err(format!("input {:?} does not hold {side}³ volumes", x.dims())));
        }
        let flat = x.reshape((n, side.pow(3)))?;
        let l = self.cfg.stage_res(0).pow(3);
        let p3 = self.cfg.patch.pow(3);
        let g = flat.index_select(&self.patch_index, 1)?.reshape((n, l, p3))?;
        self.patch_embed.forward(&g)
    }

    /// Raw stage outputs before merging, one per stage.
    pub fn stage_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.embed_patches(x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
            if let Some(m) = &stage.merge {
                h = m.forward(&h)?;
            }
        }
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor) -> Result<VisionPyramid> {
        let outs = self.stage_outputs(x)?;
        let s = outs.len();
        let f_top = self.norm_top.forward(&outs[s - 1])?;
        Ok(VisionPyramid {
            f_bot: self.norm_bot.forward(&outs[s - 3])?,
            f_mid: self.norm_mid.forward(&outs[s - 2])?,
            pooled_top: f_top.mean(1)?,
            f_top,
            res_bot: self.cfg.stage_res(s - 3),
            res_mid: self.cfg.stage_res(s - 2),
            res_top: self.cfg.stage_res(s - 1),
        })
    }
}

/// Mean over the token axis of `[N, L, C]`.
pub fn token_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus2)?)
}
