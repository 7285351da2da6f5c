//! Line-delimited JSON metrics. Each record is written with a single
//! `write_all`, so a crash never leaves a partial line behind.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::EpochStats;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Pretrain,
    Align,
    Eval,
}

/// Distribution metrics of one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub reward_mean: f64,
    pub reward_max: f64,
    pub reward_se: f64,
    /// Exact `TV(P_T(theta), P_T(p*))` for discrete chains.
    pub tv_optimal: Option<f64>,
    /// Exact `TV(P_T(theta), R/Z)`.
    pub tv_target: Option<f64>,
    pub kl_optimal: Option<f64>,
    pub kl_target: Option<f64>,
    /// `TV(P_T(p*), R/Z)` under the fixed source.
    pub floor: Option<f64>,
    /// Monte Carlo TV of the sample histogram to `P_T(p*)` and its standard error.
    pub tv_optimal_mc: Option<f64>,
    pub tv_mc_se: Option<f64>,
    /// KL of the 2D sample histogram to the tempered target on the grid.
    pub hist_kl: Option<f64>,
    /// Fraction of samples inside the histogram grid.
    pub hist_coverage: Option<f64>,
}

/// One metrics line. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub algorithm: Option<String>,
    pub task: String,
    pub epoch: usize,
    pub step: usize,
    pub trajectories: usize,
    pub wall_clock: Option<f64>,
    pub beta: Option<f64>,
    pub reward_mean: Option<f64>,
    pub reward_max: Option<f64>,
    pub reward_std: Option<f64>,
    pub loss: Option<f64>,
    pub fl_db: Option<f64>,
    pub dag_kl: Option<f64>,
    pub kl_reg: Option<f64>,
    pub ddpo: Option<f64>,
    pub grad_norm_theta: Option<f64>,
    pub grad_norm_phi: Option<f64>,
    pub eval: Option<EvalMetrics>,
}

impl MetricsRecord {
    pub fn empty(kind: RecordKind, task: &str) -> Self {
        MetricsRecord {
            kind,
            algorithm: None,
            task: task.to_string(),
            epoch: 0,
            step: 0,
            trajectories: 0,
            wall_clock: None,
            beta: None,
            reward_mean: None,
            reward_max: None,
            reward_std: None,
            loss: None,
            fl_db: None,
            dag_kl: None,
            kl_reg: None,
            ddpo: None,
            grad_norm_theta: None,
            grad_norm_phi: None,
            eval: None,
        }
    }

    /// `epoch` in records is 1-based: the number of completed epochs.
    pub fn from_epoch(stats: &EpochStats, algorithm: &str, task: &str) -> Self {
        MetricsRecord {
            algorithm: Some(algorithm.to_string()),
            epoch: stats.epoch + 1,
            step: stats.step,
            trajectories: stats.trajectories,
            beta: Some(stats.beta),
            reward_mean: Some(stats.reward_mean),
            reward_max: Some(stats.reward_max),
            reward_std: Some(stats.reward_std),
            fl_db: stats.fl_db,
            dag_kl: stats.dag_kl,
            kl_reg: stats.kl_reg,
            ddpo: stats.ddpo,
            grad_norm_theta: Some(stats.grad_norm_theta),
            grad_norm_phi: stats.grad_norm_phi,
            ..MetricsRecord::empty(RecordKind::Align, task)
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// Append-only writer for one metrics file.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    last: Option<(usize, usize)>,
}

impl MetricsWriter {
    /// Starts a fresh file, replacing any previous one.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter { path: path.to_path_buf(), file, last: None })
    }

    /// Continues an existing file after dropping records past `(epoch, step)`,
    /// which a crashed run may have written after its last checkpoint.
    pub fn resume(path: &Path, epoch: usize, step: usize) -> Result<Self> {
        let (mut body, mut last) = (String::new(), None);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (line, rec) in text.lines().filter(|l| !l.trim().is_empty()).zip(read_metrics(path)?) {
                if (rec.epoch, rec.step) <= (epoch, step) {
                    body.push_str(line);
                    body.push('\n');
                    last = Some((rec.epoch, rec.step));
                }
            }
        }
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter { path: path.to_path_buf(), file, last })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let key = (record.epoch, record.step);
        if let Some(last) = self.last {
            if key < last {
                return Err(Error::Contract(format!("metrics must be monotone: {key:?} after {last:?}")));
            }
        }
        self.file.write_all(record.to_line().as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last = Some(key);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: bad metrics record: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, step: usize) -> MetricsRecord {
        MetricsRecord { epoch, step, reward_mean: Some(0.5), ..MetricsRecord::empty(RecordKind::Align, "t") }
    }

    #[test]
    fn key_order_is_fixed() {
        let line = rec(1, 8).to_line();
        let kind = line.find("\"kind\"").unwrap();
        let epoch = line.find("\"epoch\"").unwrap();
        let eval = line.find("\"eval\"").unwrap();
        assert!(kind < epoch && epoch < eval);
        assert!(line.ends_with("}\n") && line.matches('\n').count() == 1);
        assert!(line.contains("\"wall_clock\":null"));
    }

    #[test]
    fn round_trip_and_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&rec(1, 8)).unwrap();
        w.write(&rec(2, 16)).unwrap();
        assert!(w.write(&rec(1, 8)).is_err());
        assert_eq!(read_metrics(&path).unwrap(), vec![rec(1, 8), rec(2, 16)]);
    }

    #[test]
    fn resume_drops_records_past_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for e in 1..=3 {
            w.write(&rec(e, 8 * e)).unwrap();
        }
        let mut w = MetricsWriter::resume(&path, 2, 16).unwrap();
        assert!(w.write(&rec(1, 8)).is_err());
        w.write(&rec(3, 24)).unwrap();
        let got: Vec<usize> = read_metrics(&path).unwrap().iter().map(|r| r.epoch).collect();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}not json\n", rec(1, 1).to_line())).unwrap();
        let err = read_metrics(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
