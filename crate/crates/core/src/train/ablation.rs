//! Trains every loss configuration under the same seeds and data.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::trainer::{train, Dataset};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::losses::LossConfig;

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub loss_config: LossConfig,
    /// Best test accuracy (train accuracy when there is no test split).
    pub accuracy: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub epochs: usize,
    /// `ok`, or the error that stopped the run.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("loss_config,loss_function,accuracy,final_train_acc,epochs,status\n");
        let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},\"{}\"",
                r.loss_config,
                r.loss_config.description(),
                opt(r.accuracy),
                opt(r.final_train_acc),
                r.epochs,
                r.status.replace('"', "'")
            );
        }
        s
    }
}

/// Runs the four configurations in table order. A failed run is recorded in
/// its row and the remaining runs continue. With `out`, each run writes into
/// `<out>/<code>/` and the table goes to `<out>/ablation.csv`.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(4);
    for lc in LossConfig::ALL {
        let mut cfg = base.clone();
        cfg.loss_config = lc;
        let dir = out.map(|d| d.join(lc.code()));
        let row = match train(&cfg, data, dir.as_deref()) {
            Ok(o) => AblationRow {
                loss_config: lc,
                accuracy: o.record.best_test_acc,
                final_train_acc: o.record.last().map(|e| e.train_acc),
                epochs: o.record.epochs.len(),
                status: "ok".into(),
            },
            Err(e) => {
                log::warn!("ablation run {lc} failed: {e}");
                AblationRow {
                    loss_config: lc,
                    accuracy: None,
                    final_train_acc: None,
                    epochs: 0,
                    status: e.to_string(),
                }
            }
        };
        rows.push(row);
        if let Some(d) = out {
            std::fs::create_dir_all(d)?;
            std::fs::write(d.join(ABLATION_FILE), AblationReport { rows: rows.clone() }.to_csv())?;
        }
    }
    Ok(AblationReport { rows })
}
