use std::fmt::Write as _;
use std::path::Path;

use super::model::VelvetModel;
use crate::error::Result;
use crate::nn::to_f64_vec;
use crate::report_prep::{prepare_report, TextCaps};

/// Final-layer text self-attention for one report.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub tokens: Vec<String>,
    /// Per head, row-major `len × len`; row = query.
    pub heads: Vec<Vec<f64>>,
}

impl AttentionMaps {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Header row of token labels, then one row per query token.
    pub fn head_csv(&self, h: usize) -> String {
        let n = self.len();
        let quote = |t: &str| format!("\"{}\"", t.replace('"', "\"\""));
        let mut out = String::from("query");
        for t in &self.tokens {
            out.push(',');
            out.push_str(&quote(t));
        }
        out.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&quote(t));
            for v in &self.heads[h][i * n..(i + 1) * n] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// 8-bit grayscale, darker for higher weight, scaled per head by its maximum.
    pub fn head_gray(&self, h: usize) -> Vec<u8> {
        let m = &self.heads[h];
        let max = m.iter().copied().fold(0.0f64, f64::max);
        m.iter()
            .map(|&v| {
                let w = if max > 0.0 { v / max } else { 0.0 };
                (255.0 * (1.0 - w)).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for h in 0..self.heads.len() {
            let p = dir.join(format!("head{h}.csv"));
            std::fs::write(&p, self.head_csv(h))?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub fn attention_maps(model: &VelvetModel, text: &str, caps: &TextCaps) -> Result<AttentionMaps> {
    let report = prepare_report(text, &model.vocab, caps)?;
    let batch = model.tri_batch(&[&report])?;
    let feats = model.text.encode_ids(&batch, &batch.token_ids, true)?;
    let last = feats.attentions.last().expect("encoder has at least one layer");
    // [1, H, L, L]
    let (_, heads, len, _) = last.dims4()?;
    let flat = to_f64_vec(last)?;
    let tokens = batch.token_ids.iter().map(|&t| model.vocab.token(t).to_string()).collect();
    let heads = (0..heads).map(|h| flat[h * len * len..(h + 1) * len * len].to_vec()).collect();
    Ok(AttentionMaps { tokens, heads })
}
