use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::losses::{LossBundle, COMPONENTS};
use crate::error::Result;

/// Append-only CSV log, one row per logged step. Disabled components are
/// left blank.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

pub fn header() -> String {
    let mut cols = vec!["split", "step", "epoch", "lr"];
    cols.extend(COMPONENTS);
    cols.push("total");
    cols.join(",")
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{}", header())?;
        }
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, split: &str, step: u64, epoch: u64, lr: f64, b: &LossBundle) -> Result<()> {
        let cells: Vec<String> = b.values.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()).collect();
        writeln!(self.file, "{split},{step},{epoch},{lr},{},{}", cells.join(","), b.total)?;
        Ok(())
    }

    /// Row with only the total filled.
    pub fn append_value(&mut self, split: &str, step: u64, epoch: u64, total: f64) -> Result<()> {
        writeln!(self.file, "{split},{step},{epoch},,{}{total}", ",".repeat(COMPONENTS.len()))?;
        Ok(())
    }
}
