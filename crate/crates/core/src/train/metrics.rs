//! Classification accuracy and confusion matrices.

use std::fmt::Write as _;

use serde::Serialize;

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_pairs(labels: Vec<String>, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = ConfusionMatrix::new(labels);
        for (t, p) in pairs {
            m.record(t, p);
        }
        m
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalised percentages in aligned columns.
    pub fn to_table(&self) -> String {
        let norm = self.row_normalized();
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:width$}", "");
        for l in &self.labels {
            let _ = write!(s, "  {l:>width$}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&norm) {
            let _ = write!(s, "{l:width$}");
            for v in row {
                let _ = write!(s, "  {:>w$.1}%", v * 100.0, w = width - 1);
            }
            s.push('\n');
        }
        s
    }
}
