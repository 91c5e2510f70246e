//! Binary checkpoint container.
//!
//! Layout: `VELVETCK` magic, `u32` format version, `u64` header length,
//! JSON header, raw little-endian `f64` payload, then a SHA-256 of every
//! preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::model::VelvetModel;
use super::optim::AdamSlot;
use super::train::{RngStreams, Trainer};
use crate::error::{Result, VelvetError};
use crate::nn::to_f64_vec;
use crate::report_prep::Vocabulary;

pub const MAGIC: &[u8; 8] = b"VELVETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub name: String,
    pub step: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub order: Vec<usize>,
    /// ChaCha word positions of the data, aug, mask′, mask″ and mining streams.
    pub rng_word_pos: Vec<String>,
    pub best_val: Option<f64>,
    pub params: Vec<TensorEntry>,
    pub adam: Vec<AdamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Vec<f64>>,
    /// `(m, v)` per parameter.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Result<Self> {
        let mut params = BTreeMap::new();
        let mut entries = Vec::new();
        for (name, var) in t.model.ps.vars() {
            entries.push(TensorEntry { name: name.clone(), shape: var.dims().to_vec() });
            params.insert(name.clone(), to_f64_vec(var.as_tensor())?);
        }
        let mut moments = BTreeMap::new();
        let mut adam = Vec::new();
        for (name, slot) in &t.state.opt.state {
            adam.push(AdamEntry { name: name.clone(), step: slot.step, shape: slot.m.dims().to_vec() });
            moments.insert(name.clone(), (to_f64_vec(&slot.m)?, to_f64_vec(&slot.v)?));
        }
        let s = &t.state;
        Ok(Self {
            header: CheckpointHeader {
                config: t.cfg.clone(),
                vocab: t.model.vocab.tokens().to_vec(),
                step: s.step,
                epoch: s.epoch,
                cursor: s.cursor,
                order: s.order.clone(),
                rng_word_pos: s.rngs.positions().iter().map(|p| p.to_string()).collect(),
                best_val: s.best_val,
                params: entries,
                adam,
            },
            params,
            moments,
        })
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.header.vocab.clone())
    }

    fn load_params(&self, model: &VelvetModel) -> Result<()> {
        let dtype = model.dtype();
        for e in &self.header.params {
            let var = model
                .ps
                .get(&e.name)
                .ok_or_else(|| VelvetError::CorruptFile(format!("unknown parameter {}", e.name)))?;
            if var.dims() != e.shape.as_slice() {
                return Err(VelvetError::CorruptFile(format!("{}: shape {:?} vs model {:?}", e.name, e.shape, var.dims())));
            }
            let t = Tensor::from_vec(self.params[&e.name].clone(), e.shape.as_slice(), var.device())?;
            var.set(&t.to_dtype(dtype)?)?;
        }
        if self.header.params.len() != model.ps.vars().len() {
            return Err(VelvetError::CorruptFile("parameter set differs from model".into()));
        }
        Ok(())
    }

    /// Rebuild a model with the stored configuration and weights.
    pub fn model(&self) -> Result<VelvetModel> {
        let model = VelvetModel::new(&self.header.config, self.vocab()?)?;
        self.load_params(&model)?;
        Ok(model)
    }

    pub fn restore_into(&self, t: &mut Trainer) -> Result<()> {
        self.load_params(&t.model)?;
        let h = &self.header;
        let dtype: DType = t.model.dtype();
        let dev = t.model.device();
        t.state.opt.state.clear();
        for e in &h.adam {
            let (m, v) = &self.moments[&e.name];
            let mk = |x: &Vec<f64>| -> Result<Tensor> {
                Ok(Tensor::from_vec(x.clone(), e.shape.as_slice(), &dev)?.to_dtype(dtype)?)
            };
            t.state.opt.state.insert(e.name.clone(), AdamSlot { step: e.step, m: mk(m)?, v: mk(v)? });
        }
        let mut pos = [0u128; 5];
        if h.rng_word_pos.len() != 5 {
            return Err(VelvetError::CorruptFile("expected five RNG positions".into()));
        }
        for (p, s) in pos.iter_mut().zip(&h.rng_word_pos) {
            *p = s.parse().map_err(|_| VelvetError::CorruptFile(format!("bad RNG position {s}")))?;
        }
        t.state.rngs = RngStreams::restore(h.config.seed, pos);
        t.state.step = h.step;
        t.state.epoch = h.epoch;
        t.state.cursor = h.cursor;
        t.state.order = h.order.clone();
        t.state.best_val = h.best_val;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.params {
            for v in &self.params[&e.name] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in &self.header.adam {
            let (m, v) = &self.moments[&e.name];
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| VelvetError::CorruptFile(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(VelvetError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])?;
        let mut vals = body[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = vals.by_ref().take(n).collect();
            if v.len() != n {
                return Err(corrupt("payload too short"));
            }
            Ok(v)
        };
        let mut params = BTreeMap::new();
        for e in &header.params {
            params.insert(e.name.clone(), take(e.shape.iter().product())?);
        }
        let mut moments = BTreeMap::new();
        for e in &header.adam {
            let n = e.shape.iter().product();
            let m = take(n)?;
            moments.insert(e.name.clone(), (m, take(n)?));
        }
        if (body.len() - header_end) % 8 != 0 || vals.next().is_some() {
            return Err(corrupt("trailing payload"));
        }
        Ok(Self { header, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
