//! Sentence-aware transformer text encoder.
//!
//! Each report becomes `[CLS] [SENT_1] w.. [SENT_2] w.. ...`. Sentence tokens
//! only see `[CLS]` and their own sentence; `[CLS]` and word tokens see every
//! real token. Report, sentence and word features are read off the final
//! hidden states.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VelvetError};
use crate::nn::{
    additive_mask, index_tensor, shape_err, Embedding, FeedForward, LayerNorm,
    MultiHeadAttention, ParamStore,
};
use crate::report_prep::{TokenizedReport, Vocabulary, MAX_NUM_SENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriBertConfig {
    pub feature_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_num_sent: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
}

impl TriBertConfig {
    pub fn tribert_s(vocab_size: usize) -> Self {
        Self {
            feature_dim: 768,
            num_layers: 6,
            num_heads: 12,
            max_num_sent: MAX_NUM_SENT,
            max_len: 1024,
            vocab_size,
            ffn_mult: 4,
        }
    }

    pub fn tribert_b(vocab_size: usize) -> Self {
        Self { num_layers: 12, ..Self::tribert_s(vocab_size) }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            feature_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_num_sent: MAX_NUM_SENT,
            max_len: 256,
            vocab_size,
            ffn_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.feature_dim % self.num_heads != 0 {
            return Err(VelvetError::Config(format!(
                "feature_dim {} must be divisible by num_heads {}",
                self.feature_dim, self.num_heads
            )));
        }
        if self.max_num_sent == 0 || self.max_num_sent > MAX_NUM_SENT {
            return Err(VelvetError::Config("max_num_sent must be in 1..=50".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Cls,
    /// `[SENT_i]`, 1-based.
    Sent(usize),
    Word,
    Pad,
}

/// Batched encoder input. All per-position arrays are row-major `[n, len]`;
/// `attn_mask` is `[n, len, len]` with `true` meaning "query may attend key".
#[derive(Debug, Clone, PartialEq)]
pub struct TriBatch {
    pub n: usize,
    pub len: usize,
    pub token_ids: Vec<u32>,
    pub sentence_type_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub pad_mask: Vec<bool>,
    pub roles: Vec<Role>,
    pub attn_mask: Vec<bool>,
    /// Sequence positions of `[SENT_i]` per report.
    pub sent_positions: Vec<Vec<usize>>,
    /// Word spans per report in sequence coordinates.
    pub word_spans: Vec<Vec<(usize, usize)>>,
}

impl TriBatch {
    pub fn max_sentences(&self) -> usize {
        self.sent_positions.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn max_words(&self) -> usize {
        self.word_spans.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn role(&self, b: usize, t: usize) -> Role {
        self.roles[b * self.len + t]
    }

    pub fn allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.attn_mask[(b * self.len + q) * self.len + k]
    }

    /// Additive attention bias `[n, 1, len, len]`.
    pub fn attn_bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        additive_mask(&self.attn_mask, &[self.n, 1, self.len, self.len], dtype, device)
    }

    /// Keep only the listed reports, in the given order.
    pub fn select(&self, rows: &[usize]) -> TriBatch {
        let pick = |v: &Vec<u32>| -> Vec<u32> {
            rows.iter().flat_map(|&r| v[r * self.len..(r + 1) * self.len].to_vec()).collect()
        };
        let ll = self.len * self.len;
        TriBatch {
            n: rows.len(),
            len: self.len,
            token_ids: pick(&self.token_ids),
            sentence_type_ids: pick(&self.sentence_type_ids),
            position_ids: pick(&self.position_ids),
            pad_mask: rows
                .iter()
                .flat_map(|&r| self.pad_mask[r * self.len..(r + 1) * self.len].to_vec())
                .collect(),
            roles: rows
                .iter()
                .flat_map(|&r| self.roles[r * self.len..(r + 1) * self.len].to_vec())
                .collect(),
            attn_mask: rows
                .iter()
                .flat_map(|&r| self.attn_mask[r * ll..(r + 1) * ll].to_vec())
                .collect(),
            sent_positions: rows.iter().map(|&r| self.sent_positions[r].clone()).collect(),
            word_spans: rows.iter().map(|&r| self.word_spans[r].clone()).collect(),
        }
    }
}

/// Lay out `[CLS] ([SENT_i] tokens_i)*`, right-padded to the longest report.
pub fn build_tri_batch(
    reports: &[TokenizedReport],
    vocab: &Vocabulary,
    cfg: &TriBertConfig,
) -> Result<TriBatch> {
    let mut seqs = Vec::with_capacity(reports.len());
    for (r_idx, r) in reports.iter().enumerate() {
        if r.num_sentences() > cfg.max_num_sent {
            return Err(VelvetError::CapExceeded(format!(
                "report {r_idx} has {} sentences, cap is {}",
                r.num_sentences(),
                cfg.max_num_sent
            )));
        }
        let mut ids = vec![vocab.cls_id()];
        let mut types = vec![0u32];
        let mut roles = vec![Role::Cls];
        let mut sent_pos = Vec::new();
        let mut spans = Vec::new();
        for (s, &(w0, w1)) in r.sentence_spans.iter().enumerate() {
            let i = s + 1;
            sent_pos.push(ids.len());
            ids.push(vocab.sent_id(i));
            types.push(i as u32);
            roles.push(Role::Sent(i));
            for w in w0..w1 {
                let (a, b) = r.word_spans[w];
                let start = ids.len();
                for &tok in &r.token_ids[a..b] {
                    ids.push(tok);
                    types.push(i as u32);
                    roles.push(Role::Word);
                }
                spans.push((start, ids.len()));
            }
        }
        if ids.len() > cfg.max_len {
            return Err(VelvetError::CapExceeded(format!(
                "report {r_idx} needs {} positions, cap is {}",
                ids.len(),
                cfg.max_len
            )));
        }
        seqs.push((ids, types, roles, sent_pos, spans));
    }
    let n = seqs.len();
    let len = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0);
    let mut batch = TriBatch {
        n,
        len,
        token_ids: Vec::with_capacity(n * len),
        sentence_type_ids: Vec::with_capacity(n * len),
        position_ids: Vec::with_capacity(n * len),
        pad_mask: Vec::with_capacity(n * len),
        roles: Vec::with_capacity(n * len),
        attn_mask: Vec::new(),
        sent_positions: Vec::with_capacity(n),
        word_spans: Vec::with_capacity(n),
    };
    for (ids, types, roles, sent_pos, spans) in seqs {
        let real = ids.len();
        batch.token_ids.extend(ids);
        batch.sentence_type_ids.extend(types);
        batch.roles.extend(roles);
        batch.token_ids.extend(std::iter::repeat(vocab.pad_id()).take(len - real));
        batch.sentence_type_ids.extend(std::iter::repeat(0).take(len - real));
        batch.roles.extend(std::iter::repeat(Role::Pad).take(len - real));
        batch.position_ids.extend(0..len as u32);
        batch.pad_mask.extend((0..len).map(|t| t < real));
        batch.sent_positions.push(sent_pos);
        batch.word_spans.push(spans);
    }
    batch.attn_mask = build_tri_mask(&batch);
    Ok(batch)
}

/// Tri-level mask: `[CLS]` and word queries see all real tokens; `[SENT_i]`
/// sees `[CLS]`, itself and the words of sentence `i`. Padding rows and
/// columns are all false.
pub fn build_tri_mask(batch: &TriBatch) -> Vec<bool> {
    let len = batch.len;
    let mut mask = vec![false; batch.n * len * len];
    for b in 0..batch.n {
        let base = b * len;
        for q in 0..len {
            let row = &mut mask[(base + q) * len..(base + q + 1) * len];
            match batch.roles[base + q] {
                Role::Pad => {}
                Role::Cls | Role::Word => {
                    for (k, m) in row.iter_mut().enumerate() {
                        *m = batch.roles[base + k] != Role::Pad;
                    }
                }
                Role::Sent(i) => {
                    for (k, m) in row.iter_mut().enumerate() {
                        *m = match batch.roles[base + k] {
                            Role::Cls => true,
                            Role::Pad => false,
                            _ => batch.sentence_type_ids[base + k] as usize == i,
                        };
                    }
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    /// Pre-norm block. Returns new states and the attention probabilities.
    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.ln1.forward(x)?;
        let (a, probs) = self.attn.forward(&h, &h, Some(bias))?;
        let x = (x + a)?;
        let x = (&x + self.ffn.forward(&self.ln2.forward(&x)?)?)?;
        Ok((x, probs))
    }
}

/// Report-, sentence- and word-level text features.
#[derive(Debug, Clone)]
pub struct TextFeatureSet {
    /// `[N, C]` final `[CLS]` states.
    pub rep: Tensor,
    /// `[N, S, C]`, zero where `sent_valid` is false.
    pub sent: Tensor,
    /// `[N, S]` of 0/1 in the model dtype.
    pub sent_valid: Tensor,
    /// `[N, W, C]` means over each word's sub-word states.
    pub word: Tensor,
    pub word_valid: Tensor,
    /// `[N, len, C]`
    pub token_states: Tensor,
    /// Per-layer attention probabilities `[N, H, len, len]` when requested.
    pub attentions: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TriBert {
    pub cfg: TriBertConfig,
    pub tok_emb: Embedding,
    /// Row 0 is the `[CLS]` type; rows `1..=max_num_sent` are sentences.
    pub type_emb: Embedding,
    pub pos_emb: Embedding,
    pub layers: Vec<EncoderLayer>,
}

impl TriBert {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: TriBertConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_dim;
        Ok(Self {
            cfg,
            tok_emb: Embedding::new(ps, &format!("{name}.tok_emb"), cfg.vocab_size, c)?,
            type_emb: Embedding::new(ps, &format!("{name}.type_emb"), cfg.max_num_sent + 1, c)?,
            pos_emb: Embedding::new(ps, &format!("{name}.pos_emb"), cfg.max_len, c)?,
            layers: (0..cfg.num_layers)
                .map(|i| {
                    EncoderLayer::new(
                        ps,
                        &format!("{name}.layer{i}"),
                        c,
                        cfg.num_heads,
                        c * cfg.ffn_mult,
                    )
                })
                .collect::<Result<_>>()?,
        })
    }

    fn device(&self) -> &Device {
        self.tok_emb.table.device()
    }

    fn dtype(&self) -> DType {
        self.tok_emb.table.dtype()
    }

    fn check_batch(&self, batch: &TriBatch, ids: &[u32]) -> Result<()> {
        if batch.n == 0 || batch.len == 0 {
            return Err(shape_err("cannot encode an empty batch"));
        }
        if batch.len > self.cfg.max_len {
            return Err(shape_err(format!(
                "sequence length {} exceeds position table {}",
                batch.len, self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(shape_err(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if let Some(&bad) = batch
            .sentence_type_ids
            .iter()
            .find(|&&t| t as usize > self.cfg.max_num_sent)
        {
            return Err(shape_err(format!("sentence type {bad} outside table")));
        }
        Ok(())
    }

    /// Token + sentence-type + position embeddings, `[N, len, C]`.
    pub fn embed(&self, batch: &TriBatch, ids: &[u32]) -> Result<Tensor> {
        self.check_batch(batch, ids)?;
        let dev = self.device();
        let shape = (batch.n, batch.len);
        let tok = Tensor::from_slice(ids, shape, dev)?;
        let typ = Tensor::from_slice(&batch.sentence_type_ids, shape, dev)?;
        let pos = Tensor::from_slice(&batch.position_ids, shape, dev)?;
        let x = (self.tok_emb.forward(&tok)? + self.type_emb.forward(&typ)?)?;
        Ok((x + self.pos_emb.forward(&pos)?)?)
    }

    /// Run the transformer stack on precomputed input embeddings.
    pub fn encode_embeddings(
        &self,
        x: &Tensor,
        batch: &TriBatch,
        keep_attn: bool,
    ) -> Result<TextFeatureSet> {
        let bias = batch.attn_bias(self.dtype(), self.device())?;
        let mut h = x.clone();
        let mut attentions = Vec::new();
        for layer in &self.layers {
            let (next, probs) = layer.forward(&h, &bias)?;
            h = next;
            if keep_attn {
                attentions.push(probs);
            }
        }
        let mut feats = self.features(&h, batch)?;
        feats.attentions = attentions;
        Ok(feats)
    }

    pub fn encode(&self, batch: &TriBatch) -> Result<TextFeatureSet> {
        self.encode_ids(batch, &batch.token_ids, false)
    }

    /// Encode with substituted token ids (e.g. a masked copy of the batch).
    pub fn encode_ids(&self, batch: &TriBatch, ids: &[u32], keep_attn: bool) -> Result<TextFeatureSet> {
        let x = self.embed(batch, ids)?;
        self.encode_embeddings(&x, batch, keep_attn)
    }

    /// Read report, sentence and word features off final states.
    pub fn features(&self, states: &Tensor, batch: &TriBatch) -> Result<TextFeatureSet> {
        let (n, len, c) = states.dims3()?;
        let dev = self.device();
        let dtype = self.dtype();
        let flat = states.reshape((n * len, c))?;

        let rep_idx: Vec<u32> = (0..n).map(|b| (b * len) as u32).collect();
        let rep = flat.index_select(&index_tensor(&rep_idx, dev)?, 0)?;

        let s_max = batch.max_sentences().max(1);
        let mut s_idx = vec![0u32; n * s_max];
        let mut s_valid = vec![0f64; n * s_max];
        for (b, pos) in batch.sent_positions.iter().enumerate() {
            for (s, &p) in pos.iter().enumerate() {
                s_idx[b * s_max + s] = (b * len + p) as u32;
                s_valid[b * s_max + s] = 1.0;
            }
        }
        let sent_valid = Tensor::from_vec(s_valid, (n, s_max), dev)?.to_dtype(dtype)?;
        let sent = flat
            .index_select(&index_tensor(&s_idx, dev)?, 0)?
            .reshape((n, s_max, c))?
            .broadcast_mul(&sent_valid.unsqueeze(2)?)?;

        let w_max = batch.max_words().max(1);
        let mut avg = vec![0f64; n * w_max * len];
        let mut w_valid = vec![0f64; n * w_max];
        for (b, spans) in batch.word_spans.iter().enumerate() {
            for (w, &(a, e)) in spans.iter().enumerate() {
                let inv = 1.0 / (e - a) as f64;
                for t in a..e {
                    avg[(b * w_max + w) * len + t] = inv;
                }
                w_valid[b * w_max + w] = 1.0;
            }
        }
        let avg = Tensor::from_vec(avg, (n, w_max, len), dev)?.to_dtype(dtype)?;
        let word = avg.matmul(states)?;
        let word_valid = Tensor::from_vec(w_valid, (n, w_max), dev)?.to_dtype(dtype)?;

        Ok(TextFeatureSet {
            rep,
            sent,
            sent_valid,
            word,
            word_valid,
            token_states: states.clone(),
            attentions: Vec::new(),
        })
    }
}
