use serde::{Deserialize, Serialize};

use crate::error::{Result, VelvetError};

/// Characters that end a sentence. Runs of newlines also end one.
pub const SENTENCE_DELIMITERS: [char; 4] = ['.', '!', '?', ';'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReport {
    pub id: String,
    pub text: String,
}

/// Ordered sentences of a report, each with at least two words.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceList {
    pub sentences: Vec<String>,
}

impl SentenceList {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn word_counts(&self) -> Vec<usize> {
        self.sentences
            .iter()
            .map(|s| s.split_whitespace().count())
            .collect()
    }
}

fn is_delimiter(c: char) -> bool {
    SENTENCE_DELIMITERS.contains(&c) || c == '\n' || c == '\r'
}

/// Split report text into sentences on sentence-final punctuation and line
/// breaks, dropping fragments with fewer than two words.
pub fn segment_report(text: &str) -> Result<SentenceList> {
    let sentences: Vec<String> = text
        .split(is_delimiter)
        .map(|s| s.split_whitespace().collect::<Vec<_>>())
        .filter(|words| words.len() >= 2)
        .map(|words| words.join(" "))
        .collect();
    if sentences.is_empty() {
        return Err(VelvetError::EmptyReport);
    }
    Ok(SentenceList { sentences })
}
