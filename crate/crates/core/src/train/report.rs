//! Run reports.
//!
//! A run directory holds `epochs.jsonl` (one [`EpochRecord`] per line,
//! appended as training progresses), `summary.json` ([`RunSummary`]) and
//! `timing.json` (wall-clock seconds). The first two depend only on the
//! configuration and seeds; timing is kept apart so they stay bitwise
//! reproducible.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::sparsity::PartitionSparsity;

pub const EPOCH_FORMAT: &str = "diffgate-epoch/1";
pub const SUMMARY_FORMAT: &str = "diffgate-summary/1";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub format: String,
    /// 1-based.
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches.
    pub data_loss: f64,
    /// Mean training risk (data loss plus weighted expected L0).
    pub total_risk: f64,
    pub test_error_pct: f64,
    pub test_loss: f64,
    pub partitions: Vec<PartitionSparsity>,
    pub flops_forward: u64,
    pub flops_pruned: u64,
    pub active_parameters: u64,
    pub architecture: String,
}

impl EpochRecord {
    pub fn total_active(&self) -> usize {
        self.partitions.iter().map(|p| p.n_active).sum()
    }

    pub fn expected_l0(&self) -> f64 {
        self.partitions.iter().map(|p| p.expected_l0).sum()
    }
}

/// The reported state at one chosen epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPick {
    pub epoch: usize,
    pub test_error_pct: f64,
    pub test_loss: f64,
    pub architecture: String,
    pub flops_pruned: u64,
}

impl From<&EpochRecord> for EpochPick {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            test_error_pct: r.test_error_pct,
            test_loss: r.test_loss,
            architecture: r.architecture.clone(),
            flops_pruned: r.flops_pruned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format: String,
    pub epochs: usize,
    pub total_parameters: u64,
    pub flops_forward: u64,
    /// Lowest test error; the earliest epoch wins ties.
    pub best: EpochPick,
    pub last: EpochPick,
}

impl RunSummary {
    pub fn from_epochs(records: &[EpochRecord], total_parameters: u64) -> Option<Self> {
        let last = records.last()?;
        let best = records
            .iter()
            .min_by(|a, b| a.test_error_pct.total_cmp(&b.test_error_pct))
            .expect("non-empty");
        Some(Self {
            format: SUMMARY_FORMAT.into(),
            epochs: records.len(),
            total_parameters,
            flops_forward: last.flops_forward,
            best: best.into(),
            last: last.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub timing: Timing,
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report serializes")
}

impl RunReport {
    /// Exact `epochs.jsonl` contents.
    pub fn epochs_jsonl(&self) -> String {
        self.epochs.iter().map(|r| json_line(r) + "\n").collect()
    }

    /// Exact `summary.json` contents.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n"
    }

    /// Reads a run directory written by training.
    pub fn read(dir: &Path) -> Result<Self, TrainError> {
        let io = |path: PathBuf| move |source| TrainError::Io { path, source };
        let path = dir.join(EPOCHS_FILE);
        let file = File::open(&path).map_err(io(path.clone()))?;
        let mut epochs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(path.clone()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: EpochRecord = serde_json::from_str(&line)
                .map_err(|e| TrainError::Report(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if r.format != EPOCH_FORMAT {
                return Err(TrainError::Report(format!(
                    "unknown epoch format {:?}",
                    r.format
                )));
            }
            epochs.push(r);
        }
        let read_json = |name: &str| -> Result<String, TrainError> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(io(p))
        };
        let summary: RunSummary = serde_json::from_str(&read_json(SUMMARY_FILE)?)
            .map_err(|e| TrainError::Report(format!("{SUMMARY_FILE}: {e}")))?;
        if summary.format != SUMMARY_FORMAT {
            return Err(TrainError::Report(format!(
                "unknown summary format {:?}",
                summary.format
            )));
        }
        let timing = match read_json(TIMING_FILE) {
            Ok(t) => serde_json::from_str(&t)
                .map_err(|e| TrainError::Report(format!("{TIMING_FILE}: {e}")))?,
            Err(_) => Timing {
                wall_clock_secs: f64::NAN,
            },
        };
        Ok(Self {
            epochs,
            summary,
            timing,
        })
    }

    /// Plain-text table of the run.
    pub fn render(&self) -> String {
        let mut out = String::from(
            "epoch  data_loss  total_risk  test_err%  test_loss  active  flops_pruned  architecture\n",
        );
        for r in &self.epochs {
            out += &format!(
                "{:>5}  {:>9.5}  {:>10.5}  {:>9.2}  {:>9.5}  {:>6}  {:>12}  {}\n",
                r.epoch,
                r.data_loss,
                r.total_risk,
                r.test_error_pct,
                r.test_loss,
                r.total_active(),
                r.flops_pruned,
                r.architecture
            );
        }
        let s = &self.summary;
        for (label, p) in [("best", &s.best), ("last", &s.last)] {
            out += &format!(
                "{label}: epoch {} test error {:.2}% architecture {} flops {} of {}\n",
                p.epoch, p.test_error_pct, p.architecture, p.flops_pruned, s.flops_forward
            );
        }
        if self.timing.wall_clock_secs.is_finite() {
            out += &format!("wall clock: {:.1} s\n", self.timing.wall_clock_secs);
        }
        out
    }
}

/// Appends epoch records to a run directory as they are produced.
pub struct RunWriter {
    dir: PathBuf,
    epochs: File,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join(EPOCHS_FILE);
        let epochs = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|source| TrainError::Io { path, source })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            epochs,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        let path = self.dir.join(EPOCHS_FILE);
        writeln!(self.epochs, "{}", json_line(record))
            .and_then(|()| self.epochs.flush())
            .map_err(|source| TrainError::Io { path, source })
    }

    pub fn write_file(&self, name: &str, contents: &str) -> Result<(), TrainError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| TrainError::Io { path, source })
    }

    pub fn finish(&self, report: &RunReport) -> Result<(), TrainError> {
        self.write_file(SUMMARY_FILE, &report.summary_json())?;
        self.write_file(
            TIMING_FILE,
            &(serde_json::to_string_pretty(&report.timing).expect("timing serializes") + "\n"),
        )
    }
}
