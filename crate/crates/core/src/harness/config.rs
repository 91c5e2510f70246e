use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::losses::{LossFlags, COMPONENTS};
use crate::error::{Result, VelvetError};
use crate::objectives::cm::LocalPooling;
use crate::objectives::mm::{MemoryLevel, MiningDirection, MultiModalConfig};
use crate::objectives::uni::RotationAxis;
use crate::report_prep::TextCaps;
use crate::tribert::TriBertConfig;
use crate::vision::{AugmentConfig, VisionConfig};

/// Flat run configuration. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Overrides `epochs * steps_per_epoch` for the schedule and stop point.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub precision: String,

    pub vis_inp: bool,
    pub vis_rot: bool,
    pub vis_con: bool,
    pub lan_mlm: bool,
    pub cm_top: bool,
    pub cm_mid: bool,
    pub cm_bot: bool,
    pub mm_match: bool,
    pub mm_mlm: bool,
    /// Per-component multipliers; missing entries are 1.
    pub loss_weights: BTreeMap<String, f64>,

    pub text_preset: String,
    pub text_dim: Option<usize>,
    pub text_layers: Option<usize>,
    pub text_heads: Option<usize>,
    pub max_len: Option<usize>,
    pub max_sentences: usize,
    pub max_words_per_sentence: usize,
    pub max_words_per_report: usize,

    pub vision_preset: String,
    pub volume_side: usize,
    pub vision_embed_dim: Option<usize>,
    pub vision_depths: Option<Vec<usize>>,
    pub vision_heads: Option<Vec<usize>>,
    pub vision_window: Option<usize>,
    pub mlp_ratio: Option<usize>,

    pub shared_dim: usize,
    pub local_pooling: LocalPooling,
    pub mm_layers: usize,
    pub mm_heads: Option<usize>,
    pub mining: MiningDirection,
    pub mm_memory: MemoryLevel,

    pub mask_ratio: f64,
    pub drop_ratio: f64,
    pub drop_block: usize,
    pub rotation_axis: RotationAxis,
    pub crop: Option<usize>,
    pub shift_prob: f64,
    pub scale_prob: f64,
    pub flip_prob: f64,

    pub val_fraction: f64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch_size: 10,
            max_steps: None,
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            lr_min: 0.0,
            precision: "f32".into(),
            vis_inp: true,
            vis_rot: true,
            vis_con: true,
            lan_mlm: true,
            cm_top: true,
            cm_mid: true,
            cm_bot: true,
            mm_match: true,
            mm_mlm: true,
            loss_weights: BTreeMap::new(),
            text_preset: "tribert_s".into(),
            text_dim: None,
            text_layers: None,
            text_heads: None,
            max_len: None,
            max_sentences: 50,
            max_words_per_sentence: 200,
            max_words_per_report: 512,
            vision_preset: "swin_t".into(),
            volume_side: 96,
            vision_embed_dim: None,
            vision_depths: None,
            vision_heads: None,
            vision_window: None,
            mlp_ratio: None,
            shared_dim: 512,
            local_pooling: LocalPooling::Mean,
            mm_layers: 2,
            mm_heads: None,
            mining: MiningDirection::Alternate,
            mm_memory: MemoryLevel::Top,
            mask_ratio: 0.15,
            drop_ratio: 0.30,
            drop_block: 16,
            rotation_axis: RotationAxis::Z,
            crop: None,
            shift_prob: 0.5,
            scale_prob: 0.5,
            flip_prob: 0.5,
            val_fraction: 0.0,
            log_every: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| VelvetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Small encoders for CPU smoke runs and tests: 16-d text, 8-channel
    /// vision on 16³ volumes.
    pub fn tiny() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-3,
            text_preset: "tiny".into(),
            vision_preset: "tiny".into(),
            volume_side: 16,
            shared_dim: 16,
            mm_layers: 1,
            drop_block: 4,
            ..Self::default()
        }
    }

    /// Named ablation regimes: `clip` (report-level contrast only),
    /// `clip_mm` (plus matching and fused MLM) and `full`.
    pub fn with_regime(mut self, regime: &str) -> Result<Self> {
        let on: &[&str] = match regime {
            "clip" => &["cm_top"],
            "clip_mm" => &["cm_top", "mm_match", "mm_mlm"],
            "full" => &COMPONENTS,
            other => return Err(VelvetError::Config(format!("unknown regime {other}"))),
        };
        let mut flags = [false; 9];
        for (i, name) in COMPONENTS.iter().enumerate() {
            flags[i] = on.contains(name);
        }
        self.set_flags(LossFlags(flags));
        Ok(self)
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags([
            self.vis_inp,
            self.vis_rot,
            self.vis_con,
            self.lan_mlm,
            self.cm_top,
            self.cm_mid,
            self.cm_bot,
            self.mm_match,
            self.mm_mlm,
        ])
    }

    pub fn set_flags(&mut self, f: LossFlags) {
        let [a, b, c, d, e, g, h, i, j] = f.0;
        self.vis_inp = a;
        self.vis_rot = b;
        self.vis_con = c;
        self.lan_mlm = d;
        self.cm_top = e;
        self.cm_mid = g;
        self.cm_bot = h;
        self.mm_match = i;
        self.mm_mlm = j;
    }

    pub fn weights(&self) -> [f64; 9] {
        std::array::from_fn(|i| *self.loss_weights.get(COMPONENTS[i]).unwrap_or(&1.0))
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.precision.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            p => Err(VelvetError::Config(format!("unsupported precision {p}"))),
        }
    }

    pub fn caps(&self) -> TextCaps {
        TextCaps {
            max_sentences: self.max_sentences,
            max_words_per_sentence: self.max_words_per_sentence,
            max_words_per_report: self.max_words_per_report,
        }
    }

    pub fn text_config(&self, vocab_size: usize) -> Result<TriBertConfig> {
        let mut c = match self.text_preset.as_str() {
            "tribert_s" => TriBertConfig::tribert_s(vocab_size),
            "tribert_b" => TriBertConfig::tribert_b(vocab_size),
            "tiny" => TriBertConfig::tiny(vocab_size),
            p => return Err(VelvetError::Config(format!("unknown text preset {p}"))),
        };
        c.feature_dim = self.text_dim.unwrap_or(c.feature_dim);
        c.num_layers = self.text_layers.unwrap_or(c.num_layers);
        c.num_heads = self.text_heads.unwrap_or(c.num_heads);
        c.max_len = self.max_len.unwrap_or(c.max_len);
        c.max_num_sent = self.max_sentences;
        c.validate()?;
        Ok(c)
    }

    pub fn vision_config(&self) -> Result<VisionConfig> {
        let mut c = match self.vision_preset.as_str() {
            "swin_t" => VisionConfig::swin_t(self.volume_side),
            "swin_s" => VisionConfig::swin_s(self.volume_side),
            "swin_b" => VisionConfig::swin_b(self.volume_side),
            "tiny" => VisionConfig { in_side: self.volume_side, ..VisionConfig::tiny() },
            p => return Err(VelvetError::Config(format!("unknown vision preset {p}"))),
        };
        if let Some(d) = self.vision_embed_dim {
            c.embed_dim = d;
        }
        if let Some(d) = &self.vision_depths {
            c.depths = d.clone();
        }
        if let Some(h) = &self.vision_heads {
            c.heads = h.clone();
        }
        c.window = self.vision_window.unwrap_or(c.window);
        c.mlp_ratio = self.mlp_ratio.unwrap_or(c.mlp_ratio);
        c.validate()?;
        Ok(c)
    }

    pub fn mm_config(&self, text: &TriBertConfig) -> MultiModalConfig {
        MultiModalConfig {
            num_decoder_layers: self.mm_layers,
            heads: self.mm_heads.unwrap_or(text.num_heads),
            ffn_mult: text.ffn_mult,
            memory: self.mm_memory,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        let mut a = AugmentConfig::for_side(self.volume_side);
        if let Some(c) = self.crop {
            a.crop = c;
        }
        a.shift_prob = self.shift_prob;
        a.scale_prob = self.scale_prob;
        a.flip_prob = self.flip_prob;
        a
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VelvetError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2; in-batch contrast needs pairs", self.batch_size));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer hyper-parameters out of range".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return bad(format!("drop_ratio {} outside [0, 1)", self.drop_ratio));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if let Some(k) = self.loss_weights.keys().find(|k| !COMPONENTS.contains(&k.as_str())) {
            return bad(format!("unknown loss weight key {k}"));
        }
        if !self.flags().0.iter().any(|&f| f) {
            return bad("every loss component is disabled".into());
        }
        if self.volume_side % self.drop_block != 0 {
            return bad(format!("drop_block {} does not divide volume_side {}", self.drop_block, self.volume_side));
        }
        self.dtype()?;
        self.vision_config()?;
        self.text_config(64)?;
        Ok(())
    }
}
