//! Accuracy and expected/maximum calibration error.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_BINS: usize = 10;
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Fraction correct; 0 for empty bins.
    pub accuracy: f64,
    /// Mean confidence; 0 for empty bins.
    pub confidence: f64,
}

impl BinStats {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.confidence).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStats>,
    pub ece: f64,
    pub mce: f64,
    pub samples: usize,
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// 1-based bin `m` with `conf ∈ ((m−1)/M, m/M]`, clamped to `[1, M]`.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let m_f = bins as f64;
    let mut m = ((conf * m_f).ceil() as usize).clamp(1, bins);
    // the product can land one ulp on the wrong side of an edge
    while m > 1 && conf <= (m - 1) as f64 / m_f {
        m -= 1;
    }
    while m < bins && conf > m as f64 / m_f {
        m += 1;
    }
    m
}

fn check_inputs(probs: &[f64], classes: usize, labels: &[usize]) -> Result<usize> {
    if classes == 0 {
        return Err(invalid!("need at least one class"));
    }
    if probs.len() % classes != 0 {
        return Err(invalid!(
            "probability buffer of length {} is not a multiple of {classes} classes",
            probs.len()
        ));
    }
    let n = probs.len() / classes;
    if n == 0 {
        return Err(invalid!("no predictions"));
    }
    if labels.len() != n {
        return Err(invalid!("{n} prediction rows but {} labels", labels.len()));
    }
    for (i, row) in probs.chunks_exact(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if !((s - 1.0).abs() <= ROW_SUM_TOLERANCE) || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(invalid!("row {i} is not a probability distribution (sum {s})"));
        }
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(invalid!("label {y} at row {i} is out of range for {classes} classes"));
    }
    Ok(n)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    let n = check_inputs(probs, classes, labels)?;
    let correct = probs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / n as f64)
}

/// Bins predictions by confidence and reports per-bin stats, ECE and MCE.
pub fn compute_calibration(
    probs: &[f64],
    classes: usize,
    labels: &[usize],
    bins: usize,
) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(invalid!("bin count must be positive"));
    }
    let n = check_inputs(probs, classes, labels)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (row, &y) in probs.chunks_exact(classes).zip(labels) {
        let pred = argmax(row);
        let conf = row[pred];
        let m = bin_index(conf, bins) - 1;
        count[m] += 1;
        conf_sum[m] += conf;
        if pred == y {
            correct[m] += 1;
        }
    }
    let mut report = CalibrationReport {
        bins: Vec::with_capacity(bins),
        ece: 0.0,
        mce: 0.0,
        samples: n,
    };
    for m in 0..bins {
        let (accuracy, confidence) = if count[m] > 0 {
            (
                correct[m] as f64 / count[m] as f64,
                conf_sum[m] / count[m] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        let stats = BinStats {
            lower: m as f64 / bins as f64,
            upper: (m + 1) as f64 / bins as f64,
            count: count[m],
            accuracy,
            confidence,
        };
        if stats.count > 0 {
            let gap = stats.gap();
            report.ece += stats.count as f64 / n as f64 * gap;
            report.mce = report.mce.max(gap);
        }
        report.bins.push(stats);
    }
    Ok(report)
}
