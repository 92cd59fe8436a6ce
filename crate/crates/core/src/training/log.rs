use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const LOSS_LOG_HEADER: [&str; 11] = [
    "epoch",
    "step",
    "lr",
    "adv_g_OH",
    "adv_g_HO",
    "adv_d_H",
    "adv_d_O",
    "cycle",
    "embedding",
    "coronary",
    "total_g",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "adv_g_OH")]
    pub adv_g_oh: f64,
    #[serde(rename = "adv_g_HO")]
    pub adv_g_ho: f64,
    #[serde(rename = "adv_d_H")]
    pub adv_d_h: f64,
    #[serde(rename = "adv_d_O")]
    pub adv_d_o: f64,
    pub cycle: f64,
    pub embedding: f64,
    pub coronary: f64,
    pub total_g: f64,
}

impl LossRecord {
    pub fn new(epoch: usize, step: usize, lr: f64, l: &LossBreakdown) -> Self {
        Self {
            epoch,
            step,
            lr,
            adv_g_oh: l.adv_g_oh,
            adv_g_ho: l.adv_g_ho,
            adv_d_h: l.adv_d_h,
            adv_d_o: l.adv_d_o,
            cycle: l.cycle,
            embedding: l.embedding,
            coronary: l.coronary,
            total_g: l.total_g,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            adv_g_oh: self.adv_g_oh,
            adv_g_ho: self.adv_g_ho,
            adv_d_h: self.adv_d_h,
            adv_d_o: self.adv_d_o,
            cycle: self.cycle,
            embedding: self.embedding,
            coronary: self.coronary,
            total_g: self.total_g,
        }
    }
}

/// Appending CSV writer; flushes after every record so a crash loses at
/// most the step in flight.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl LossLog {
    /// Opens `path`, keeping only records from epochs before `keep_before`
    /// (all of them are dropped when it is 0).
    pub fn open(path: &Path, keep_before: usize) -> Result<Self> {
        let kept = if keep_before > 0 && path.exists() {
            read_loss_log(path)?
                .into_iter()
                .filter(|r| r.epoch < keep_before)
                .collect()
        } else {
            Vec::new()
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        };
        log.writer
            .write_record(LOSS_LOG_HEADER)
            .map_err(|e| Error::format(path, e))?;
        for r in &kept {
            log.push(r)?;
        }
        log.flush()?;
        Ok(log)
    }

    pub fn push(&mut self, r: &LossRecord) -> Result<()> {
        self.writer.serialize(r).map_err(|e| Error::format(&self.path, e))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::format(path, format!("line 1: {e}")))?
        .clone();
    if header.iter().ne(LOSS_LOG_HEADER.iter().copied()) {
        return Err(Error::format(
            path,
            format!("line 1: expected header {}", LOSS_LOG_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::format(path, format!("line {line}: {e}"))
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let rec: LossRecord = row
            .deserialize(Some(&header))
            .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_and_truncate_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("losses.csv");
        let mut log = LossLog::open(&p, 0).unwrap();
        for e in 0..3 {
            let mut b = LossBreakdown::default();
            b.total_g = e as f64 + 0.1;
            log.push(&LossRecord::new(e, 0, 1e-4, &b)).unwrap();
        }
        drop(log);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,step,lr,adv_g_OH,adv_g_HO,adv_d_H,adv_d_O,cycle,embedding,coronary,total_g\n"));
        assert_eq!(read_loss_log(&p).unwrap().len(), 3);
        drop(LossLog::open(&p, 2).unwrap());
        let back = read_loss_log(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].total_g, 1.1);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(
            &p,
            format!(
                "{}\n0,0,1,1,1,1,1,1,1,1,1\n0,1,x,1,1,1,1,1,1,1,1\n",
                LOSS_LOG_HEADER.join(",")
            ),
        )
        .unwrap();
        let err = read_loss_log(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
