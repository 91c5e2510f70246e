use std::fmt::Write as _;

use super::tokenize::TokenizedReport;
use crate::error::{Result, VelvetError};

pub const STAT_COLUMNS: [&str; 6] = ["max", "min", "mean", "25% quartiles", "median", "75% quartiles"];
pub const STAT_ROWS: [&str; 6] = [
    "# of words",
    "# of sentences",
    "max length of sentence",
    "min length of sentence",
    "mean length of sentence",
    "median length of sentence",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            max: *v.last().unwrap(),
            min: v[0],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q25: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q75: quantile_sorted(&v, 0.75),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.max, self.min, self.mean, self.q25, self.median, self.q75]
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Report statistics laid out as six rows by six summary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsTable {
    pub rows: Vec<(String, Summary)>,
}

impl StatsTable {
    pub fn get(&self, row: &str) -> Option<&Summary> {
        self.rows.iter().find(|(name, _)| name == row).map(|(_, s)| s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(",");
        out.push_str(&STAT_COLUMNS.join(","));
        out.push('\n');
        for (name, s) in &self.rows {
            out.push_str(name);
            for v in s.as_array() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn median_of(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

pub fn corpus_stats(reports: &[TokenizedReport]) -> Result<StatsTable> {
    let reports: Vec<&TokenizedReport> =
        reports.iter().filter(|r| r.num_sentences() > 0).collect();
    if reports.is_empty() {
        return Err(VelvetError::EmptyCorpus);
    }
    let mut words = Vec::new();
    let mut sents = Vec::new();
    let mut max_len = Vec::new();
    let mut min_len = Vec::new();
    let mut mean_len = Vec::new();
    let mut median_len = Vec::new();
    for r in reports {
        let lens: Vec<f64> = r.sentence_word_counts().into_iter().map(|n| n as f64).collect();
        words.push(r.num_words() as f64);
        sents.push(lens.len() as f64);
        max_len.push(lens.iter().copied().fold(f64::MIN, f64::max));
        min_len.push(lens.iter().copied().fold(f64::MAX, f64::min));
        mean_len.push(lens.iter().sum::<f64>() / lens.len() as f64);
        median_len.push(median_of(&lens));
    }
    let cols = [words, sents, max_len, min_len, mean_len, median_len];
    Ok(StatsTable {
        rows: STAT_ROWS
            .iter()
            .zip(cols.iter())
            .map(|(name, v)| (name.to_string(), Summary::of(v)))
            .collect(),
    })
}
