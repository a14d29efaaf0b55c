use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Writes JSON-lines metric records to a file.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    stage: String,
    seed: u64,
}

impl MetricsLog {
    /// Creates (or truncates) `path`, creating parent directories.
    pub fn open(path: &Path, stage: &str, seed: u64) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            stage: stage.to_string(),
            seed,
        })
    }

    pub fn record(&mut self, epoch: Option<usize>, metric: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            stage: self.stage.clone(),
            epoch,
            metric: metric.to_string(),
            value,
            seed: self.seed,
        };
        log::info!("{} {metric} = {value}", self.stage);
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs/metrics.jsonl");
        {
            let mut log = MetricsLog::open(&path, "train", 4).unwrap();
            log.record(Some(1), "loss", 0.5).unwrap();
            log.record(None, "accuracy", 1.0).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"stage":"train","epoch":1,"metric":"loss","value":0.5,"seed":4}"#
        );
        let recs = read_metrics(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].epoch, None);
    }
}
