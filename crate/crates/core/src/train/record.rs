//! Per-epoch run records and their on-disk forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::losses::LossBreakdown;

pub const METRICS_HEADER: &str = "epoch,margin,reconstruction,lstm_ce,total,train_acc,test_acc";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's sequences.
    pub loss: LossBreakdown,
    pub train_acc: f64,
    /// `None` when the test split is empty.
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub labels: Vec<String>,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_test_acc: Option<f64>,
    pub stopped_early: bool,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn new(config: &TrainConfig, labels: Vec<String>, train_sequences: usize, test_sequences: usize) -> Self {
        RunRecord {
            config: config.clone(),
            seed: config.seed,
            labels,
            train_sequences,
            test_sequences,
            epochs: Vec::new(),
            best_epoch: None,
            best_test_acc: None,
            stopped_early: false,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn push(&mut self, epoch: EpochRecord) {
        self.wall_clock_seconds += epoch.seconds;
        self.epochs.push(epoch);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }

    /// Timing-free CSV, identical across identical runs.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            let test = e.test_acc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.epoch, e.loss.margin, e.loss.reconstruction, e.loss.lstm, e.loss.total, e.train_acc, test
            );
        }
        s
    }

    /// Writes `metrics.csv` and `run.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("run.json"), json)?;
        Ok(())
    }
}

/// Trailing moving averages over `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
