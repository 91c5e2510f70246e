//! Small neural-network toolkit on top of `candle_core` tensors.
//!
//! Layers own plain `Tensor` handles that share storage with the `Var`s held
//! by a [`ParamStore`], so optimizer updates are visible to every layer
//! without re-binding.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VelvetError};

/// Additive logit used for disallowed attention pairs. Large enough that
/// `exp` underflows to exactly zero in both f32 and f64.
pub const MASK_NEG: f64 = -1.0e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Named, ordered collection of trainable variables.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(VelvetError::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut self.rng);
                        if x.abs() <= 2.0 * std {
                            break x;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Overwrite a parameter by name. Used by tests and checkpoint restore.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| VelvetError::Config(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn fork_rng(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng.gen())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_init(ps, name, in_dim, out_dim, bias, Init::TruncNormal(0.02))
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| shape_err("linear on a scalar"))?;
        if in_dim != self.in_dim() {
            return Err(shape_err(format!(
                "linear expects {} input features, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    /// `[rows, dim]`
    pub table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: ps.param(&format!("{name}.table"), &[rows, dim], Init::TruncNormal(0.02))?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    /// Look up `ids` (any shape) and append the feature axis.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dims()[1]);
        Ok(out.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(VelvetError::Config(format!(
                "{name}: dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, dim, true)?,
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, dim, true)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    /// `x_q: [B, Lq, C]`, `x_kv: [B, Lk, Ckv]`, `bias` broadcastable to
    /// `[B, H, Lq, Lk]`. Returns the output and the attention probabilities.
    pub fn forward(
        &self,
        x_q: &Tensor,
        x_kv: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, c) = x_q.dims3()?;
        let lk = x_kv.dims()[1];
        if lk == 0 {
            return Err(VelvetError::EmptyContext);
        }
        let hd = c / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x_q)?, lq)?;
        let k = split(self.k.forward(x_kv)?, lk)?;
        let v = split(self.v.forward(x_kv)?, lk)?;
        let (ctx, probs) = scaled_dot_attention(&q, &k, &v, bias)?;
        let merged = ctx.transpose(1, 2)?.contiguous()?.reshape((b, lq, c))?;
        Ok((self.o.forward(&merged)?, probs))
    }
}

/// `softmax(q kᵀ / sqrt(d) + bias) v` over the last two axes.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let d = *q.dims().last().unwrap() as f64;
    let mut scores = (q.matmul(&k.t()?)? * (1.0 / d.sqrt()))?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let probs = softmax_last(&scores)?;
    Ok((probs.matmul(v)?, probs))
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-sum-exp over the last axis, keeping it as size 1.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_add(&max)?)
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `[len]` u32 index tensor.
pub fn index_tensor(idx: &[u32], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(idx, idx.len(), device)?)
}

/// Turn a boolean "may attend" mask into an additive bias of 0 / [`MASK_NEG`].
pub fn additive_mask(
    allowed: &[bool],
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let vals: Vec<f64> = allowed
        .iter()
        .map(|&a| if a { 0.0 } else { MASK_NEG })
        .collect();
    Ok(Tensor::from_vec(vals, shape, device)?.to_dtype(dtype)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub(crate) fn shape_err(msg: impl Into<String>) -> VelvetError {
    VelvetError::ShapeMismatch(msg.into())
}
