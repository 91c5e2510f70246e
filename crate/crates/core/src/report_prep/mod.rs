//! Report text preparation: sentence segmentation, WordPiece tokenization
//! with word/sentence bookkeeping, and corpus statistics.

mod segment;
mod stats;
mod tokenize;
mod vocab;

use std::io::{BufRead, Write};
use std::path::Path;

pub use segment::{segment_report, RawReport, SentenceList, SENTENCE_DELIMITERS};
pub use stats::{corpus_stats, quantile_sorted, StatsTable, Summary, STAT_COLUMNS, STAT_ROWS};
pub use tokenize::{
    detokenize, normalize_word, tokenize, wordpiece, TextCaps, TokenizedReport,
};
pub use vocab::{sent_token, Vocabulary, CLS, MASK, MAX_NUM_SENT, PAD, UNK};

use crate::error::{Result, VelvetError};

/// Segment and tokenize in one go.
pub fn prepare_report(text: &str, vocab: &Vocabulary, caps: &TextCaps) -> Result<TokenizedReport> {
    Ok(tokenize(&segment_report(text)?, vocab, caps))
}

/// Read `{"id": .., "text": ..}` objects, one per line. Blank lines are skipped.
pub fn read_reports_jsonl(path: &Path) -> Result<Vec<RawReport>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RawReport = serde_json::from_str(&line)
            .map_err(|e| VelvetError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if r.text.trim().is_empty() {
            return Err(VelvetError::Data(format!("report {} has empty text", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_reports_jsonl(path: &Path, reports: &[RawReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
