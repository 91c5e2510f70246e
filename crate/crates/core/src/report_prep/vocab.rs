use std::collections::HashMap;
use std::path::Path;

use crate::error::{Result, VelvetError};

pub const MAX_NUM_SENT: usize = 50;
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

const DEFAULT_VOCAB: &str = include_str!("default_vocab.txt");

/// WordPiece vocabulary. Specials occupy the first ids in the fixed order
/// `[PAD] [UNK] [CLS] [MASK] [SENT_1] .. [SENT_50]`; body pieces follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

pub fn sent_token(i: usize) -> String {
    format!("[SENT_{i}]")
}

fn expected_specials() -> Vec<String> {
    let mut v: Vec<String> = [PAD, UNK, CLS, MASK].iter().map(|s| s.to_string()).collect();
    v.extend((1..=MAX_NUM_SENT).map(sent_token));
    v
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = expected_specials();
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(VelvetError::Data(
                "vocabulary must start with [PAD],[UNK],[CLS],[MASK],[SENT_1]..[SENT_50]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(VelvetError::Data(format!("empty token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VelvetError::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Built-in vocabulary covering common radiology terms, the synthetic
    /// report templates, and single-character fallback pieces.
    pub fn default_vocab() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn cls_id(&self) -> u32 {
        2
    }

    pub fn mask_id(&self) -> u32 {
        3
    }

    /// Id of `[SENT_i]`, `i` in `1..=50`.
    pub fn sent_id(&self, i: usize) -> u32 {
        assert!((1..=MAX_NUM_SENT).contains(&i), "sentence index {i} out of range");
        (3 + i) as u32
    }

    pub fn first_body_id(&self) -> u32 {
        (4 + MAX_NUM_SENT) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.first_body_id()
    }

    /// Body id lookup; specials are never returned.
    pub fn body_id(&self, piece: &str) -> Option<u32> {
        self.id(piece).filter(|&id| !self.is_special(id))
    }
}
