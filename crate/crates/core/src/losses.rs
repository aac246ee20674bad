//! Margin, reconstruction and LSTM losses, and the four ways of combining them.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Upper margin: the true class capsule should be at least this long.
pub const MARGIN_PRESENT: f64 = 0.9;
/// Lower margin: absent class capsules should be at most this long.
pub const MARGIN_ABSENT: f64 = 0.1;
/// Down-weighting of the absent-class term.
pub const ABSENT_WEIGHT: f64 = 0.5;
pub const RECONSTRUCTION_WEIGHT: f64 = 0.0005;
pub const CROSS_ENTROPY_WEIGHT: f64 = 0.5;
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss applied to the LSTM's class distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LstmHeadLoss {
    CrossEntropy,
    /// The margin loss with the LSTM probabilities standing in for capsule lengths.
    Margin,
}

/// The four loss combinations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LossConfig {
    /// `mm`: capsule margin + LSTM margin.
    MarginMargin,
    /// `mrm`: capsule margin + reconstruction + LSTM margin.
    MarginReconMargin,
    /// `mrc`: capsule margin + reconstruction + LSTM cross-entropy (the joint loss).
    MarginReconCrossEntropy,
    /// `mc`: capsule margin + LSTM cross-entropy.
    MarginCrossEntropy,
}

impl LossConfig {
    pub const ALL: [LossConfig; 4] = [
        LossConfig::MarginMargin,
        LossConfig::MarginReconMargin,
        LossConfig::MarginReconCrossEntropy,
        LossConfig::MarginCrossEntropy,
    ];

    pub fn code(self) -> &'static str {
        match self {
            LossConfig::MarginMargin => "mm",
            LossConfig::MarginReconMargin => "mrm",
            LossConfig::MarginReconCrossEntropy => "mrc",
            LossConfig::MarginCrossEntropy => "mc",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            LossConfig::MarginMargin => "margin (capsule) + margin (lstm)",
            LossConfig::MarginReconMargin => "margin (capsule) + reconstruction (capsule) + margin (lstm)",
            LossConfig::MarginReconCrossEntropy => "margin (capsule) + reconstruction (capsule) + cross entropy (lstm)",
            LossConfig::MarginCrossEntropy => "margin (capsule) + cross entropy (lstm)",
        }
    }

    pub fn uses_reconstruction(self) -> bool {
        matches!(self, LossConfig::MarginReconMargin | LossConfig::MarginReconCrossEntropy)
    }

    pub fn lstm_head(self) -> LstmHeadLoss {
        match self {
            LossConfig::MarginMargin | LossConfig::MarginReconMargin => LstmHeadLoss::Margin,
            _ => LstmHeadLoss::CrossEntropy,
        }
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LossConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossConfig::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| Error::Config(format!("loss_config must be one of mm, mrm, mrc, mc; got `{s}`")))
    }
}

/// Per-component loss values. Disabled components are reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub margin: f64,
    pub reconstruction: f64,
    /// LSTM head loss: cross-entropy, or the margin loss under `mm`/`mrm`.
    pub lstm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.margin.is_finite() && self.reconstruction.is_finite() && self.lstm.is_finite() && self.total.is_finite()
    }

    /// Name of the first non-finite component, for divergence diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("margin", self.margin),
            ("reconstruction", self.reconstruction),
            ("lstm", self.lstm),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossBreakdown {
            margin: self.margin * k,
            reconstruction: self.reconstruction * k,
            lstm: self.lstm * k,
            total: self.total * k,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.margin += other.margin;
        self.reconstruction += other.reconstruction;
        self.lstm += other.lstm;
        self.total += other.total;
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::Label { label, num_classes });
    }
    Ok(())
}

/// Margin loss summed over classes, from a `[N]` vector of lengths (or probabilities).
pub fn margin_from_lengths<T: Element>(tape: &mut Tape<T>, lengths: Var, label: usize) -> Result<Var> {
    let n = tape.data(lengths).len();
    check_label(label, n)?;
    let mut present = vec![T::zero(); n];
    present[label] = T::one();
    let absent: Vec<T> = (0..n)
        .map(|c| if c == label { T::zero() } else { T::from_acc(ABSENT_WEIGHT) })
        .collect();
    let present = tape.constant(Tensor::vector(present));
    let absent = tape.constant(Tensor::vector(absent));

    let below = tape.affine(lengths, -1.0, MARGIN_PRESENT);
    let below = tape.relu(below);
    let below = tape.mul(below, below)?;
    let above = tape.affine(lengths, 1.0, -MARGIN_ABSENT);
    let above = tape.relu(above);
    let above = tape.mul(above, above)?;

    let p = tape.dot(below, present)?;
    let a = tape.dot(above, absent)?;
    tape.add(p, a)
}

/// Margin loss of a `[N, D]` capsule matrix against the true class.
pub fn margin_loss<T: Element>(tape: &mut Tape<T>, capsules: Var, label: usize) -> Result<Var> {
    let lengths = tape.norm_last(capsules);
    let n = tape.shape(capsules)[0];
    let lengths = tape.reshape(lengths, &[n])?;
    margin_from_lengths(tape, lengths, label)
}

/// `0.0005 · mean((r - a)²)` over all pixels.
pub fn reconstruction_loss<T: Element>(tape: &mut Tape<T>, original: Var, reconstructed: Var) -> Result<Var> {
    if tape.shape(original) != tape.shape(reconstructed) {
        return Err(Error::dim(
            "reconstruction_loss",
            format!(
                "original {:?} vs reconstruction {:?}",
                tape.shape(original),
                tape.shape(reconstructed)
            ),
        ));
    }
    let diff = tape.sub(reconstructed, original)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    Ok(tape.scale(mse, RECONSTRUCTION_WEIGHT))
}

/// `0.5 · -log(pred[label])` with the log argument floored at 1e-12.
pub fn lstm_loss<T: Element>(tape: &mut Tape<T>, pred: Var, label: usize) -> Result<Var> {
    check_label(label, tape.data(pred).len())?;
    let logp = tape.log(pred, LOG_FLOOR);
    let picked = tape.select(logp, label)?;
    Ok(tape.scale(picked, -CROSS_ENTROPY_WEIGHT))
}

/// Sums the components enabled by `cfg`.
pub fn total_loss(cfg: LossConfig, margin: f64, reconstruction: f64, lstm: f64) -> LossBreakdown {
    let reconstruction = if cfg.uses_reconstruction() { reconstruction } else { 0.0 };
    LossBreakdown {
        margin,
        reconstruction,
        lstm,
        total: margin + reconstruction + lstm,
    }
}
