//! Experiment reports: ordered metric records plus wall-clock per phase.
//!
//! Records serialize to `metrics.jsonl` (one object per line) and are
//! bit-stable for a fixed config and seed. Timings go to a separate file.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub epoch: u64,
    pub name: String,
    pub value: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<Record>,
    pub phases: Vec<Phase>,
    /// Human-readable lines for `summary.txt`.
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, config_hash: impl Into<String>, seed: u64) -> Self {
        ExperimentReport {
            name: name.into(),
            config_hash: config_hash.into(),
            seed,
            ..Default::default()
        }
    }

    pub fn log(&mut self, step: u64, epoch: u64, name: impl Into<String>, value: f64) {
        self.records.push(Record {
            step,
            epoch,
            name: name.into(),
            value,
            config_hash: self.config_hash.clone(),
        });
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    /// Runs `f`, recording its wall-clock time under `name`.
    pub fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        self.phases.push(Phase {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    /// `(step, value)` pairs of metric `name`, in log order.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn first(&self, name: &str) -> Option<f64> {
        self.records.iter().find(|r| r.name == name).map(|r| r.value)
    }

    /// Appends another report's records and phases, prefixing names.
    pub fn absorb(&mut self, prefix: &str, other: &ExperimentReport) {
        for r in &other.records {
            self.log(r.step, r.epoch, format!("{prefix}/{}", r.name), r.value);
        }
        for p in &other.phases {
            self.phases.push(Phase {
                name: format!("{prefix}/{}", p.name),
                seconds: p.seconds,
            });
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.name);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "config hash: {}", self.config_hash);
        for line in &self.notes {
            let _ = writeln!(s, "{line}");
        }
        s
    }

    /// Writes `metrics.jsonl`, `summary.txt` and `timings.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.jsonl"), self.to_jsonl())?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&self.phases)?)?;
        Ok(())
    }
}
