use serde::{Deserialize, Serialize};

use super::segment::SentenceList;
use super::vocab::{Vocabulary, MAX_NUM_SENT};

/// Length caps applied during tokenization, counted in words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCaps {
    pub max_sentences: usize,
    pub max_words_per_sentence: usize,
    pub max_words_per_report: usize,
}

impl Default for TextCaps {
    fn default() -> Self {
        Self {
            max_sentences: MAX_NUM_SENT,
            max_words_per_sentence: 200,
            max_words_per_report: 512,
        }
    }
}

/// Sub-word token ids of a report's body (no specials) with word and
/// sentence bookkeeping.
///
/// `word_spans[w]` is a half-open range of token positions; `sentence_spans[s]`
/// is a half-open range of word indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenizedReport {
    pub token_ids: Vec<u32>,
    pub word_spans: Vec<(usize, usize)>,
    pub sentence_spans: Vec<(usize, usize)>,
}

impl TokenizedReport {
    pub fn num_sentences(&self) -> usize {
        self.sentence_spans.len()
    }

    pub fn num_words(&self) -> usize {
        self.word_spans.len()
    }

    /// Token ids of sentence `s` in order.
    pub fn sentence_tokens(&self, s: usize) -> &[u32] {
        let (w0, w1) = self.sentence_spans[s];
        if w0 == w1 {
            return &[];
        }
        let start = self.word_spans[w0].0;
        let end = self.word_spans[w1 - 1].1;
        &self.token_ids[start..end]
    }

    pub fn sentence_word_counts(&self) -> Vec<usize> {
        self.sentence_spans.iter().map(|(a, b)| b - a).collect()
    }
}

const MAX_CHARS_PER_WORD: usize = 100;

/// Lower-case a whitespace word and strip punctuation at its edges.
pub fn normalize_word(word: &str) -> String {
    let lower = word.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| c.is_ascii_punctuation());
    if trimmed.is_empty() {
        lower
    } else {
        trimmed.to_string()
    }
}

/// Greedy longest-match-first WordPiece. Returns `[UNK]` alone when the word
/// cannot be fully covered.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() || chars.len() > MAX_CHARS_PER_WORD {
        return vec![vocab.unk_id()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let sub: String = chars[start..end].iter().collect();
            let candidate = if start > 0 { format!("##{sub}") } else { sub };
            if let Some(id) = vocab.body_id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    pieces
}

/// Tokenize a segmented report, applying caps sentence-first then word-first.
/// Word spans are never split.
pub fn tokenize(sentences: &SentenceList, vocab: &Vocabulary, caps: &TextCaps) -> TokenizedReport {
    let mut out = TokenizedReport::default();
    let mut words_total = 0usize;
    for sentence in sentences.sentences.iter().take(caps.max_sentences) {
        if words_total >= caps.max_words_per_report {
            break;
        }
        let budget = caps
            .max_words_per_sentence
            .min(caps.max_words_per_report - words_total);
        let first_word = out.word_spans.len();
        for word in sentence.split_whitespace().take(budget) {
            let start = out.token_ids.len();
            out.token_ids.extend(wordpiece(&normalize_word(word), vocab));
            out.word_spans.push((start, out.token_ids.len()));
        }
        let n = out.word_spans.len() - first_word;
        if n == 0 {
            continue;
        }
        words_total += n;
        out.sentence_spans.push((first_word, out.word_spans.len()));
    }
    out
}

/// Map a tokenized report back to words, one `Vec` per sentence.
pub fn detokenize(report: &TokenizedReport, vocab: &Vocabulary) -> Vec<Vec<String>> {
    report
        .sentence_spans
        .iter()
        .map(|&(w0, w1)| {
            (w0..w1)
                .map(|w| {
                    let (a, b) = report.word_spans[w];
                    report.token_ids[a..b]
                        .iter()
                        .map(|&id| {
                            let t = vocab.token(id);
                            t.strip_prefix("##").unwrap_or(t).to_string()
                        })
                        .collect::<String>()
                })
                .collect()
        })
        .collect()
}
