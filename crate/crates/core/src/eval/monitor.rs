use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricReport};
use crate::graph::Day;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEntry {
    pub day: Day,
    pub metrics: MetricReport,
}

/// Population standard deviation; zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Daily metric log, one JSON line per entry when backed by a file.
#[derive(Debug, Clone, Default)]
pub struct DailyMonitor {
    entries: Vec<MonitorEntry>,
    log_path: Option<PathBuf>,
}

impl DailyMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed. Existing lines are loaded.
    pub fn with_log(path: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let path = path.into();
        let entries = match std::fs::File::open(&path) {
            Ok(f) => crate::graph::read_jsonl(std::io::BufReader::new(f))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            entries,
            log_path: Some(path),
        })
    }

    pub fn record(&mut self, day: Day, metrics: MetricReport) -> Result<(), EvalError> {
        let entry = MonitorEntry { day, metrics };
        if let Some(path) = &self.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&entry).map_err(|e| std::io::Error::other(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[MonitorEntry] {
        &self.entries
    }

    /// Standard deviation of precision@k over the last `window` entries.
    pub fn precision_stability(&self, window: usize) -> f64 {
        let start = self.entries.len().saturating_sub(window);
        let xs: Vec<f64> = self.entries[start..]
            .iter()
            .map(|e| e.metrics.precision_at_k)
            .collect();
        std_dev(&xs)
    }
}
