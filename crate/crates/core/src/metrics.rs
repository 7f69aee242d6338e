//! Calibration and discrimination metrics over (confidence, outcome) pairs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Predicted probability that the answer is correct.
    pub p: f64,
    /// Observed correctness.
    pub correct: bool,
}

impl EvalRecord {
    pub fn new(p: f64, correct: bool) -> Self {
        Self { p, correct }
    }

    fn outcome(&self) -> f64 {
        self.correct as u8 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction correct in the bin (0 when empty).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub ece: f64,
    pub brier: f64,
    pub acc: f64,
    /// `None` when the records contain no correct answer.
    pub aucpr: Option<f64>,
    /// `None` when only one outcome class is present.
    pub auroc: Option<f64>,
    pub bins: Vec<CalibrationBin>,
}

fn check(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("evaluation records", "no records"));
    }
    if let Some(r) = records.iter().find(|r| !(r.p.is_finite() && (0.0..=1.0).contains(&r.p))) {
        return Err(Error::invalid("evaluation records", format!("confidence {} is outside [0, 1]", r.p)));
    }
    Ok(())
}

/// Bin index for `p` under bins `((j-1)/b, j/b]`, with 0 placed in the first bin.
pub fn bin_index(p: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut idx = ((p * b).ceil() as usize).saturating_sub(1).min(bins - 1);
    while idx > 0 && p <= idx as f64 / b {
        idx -= 1;
    }
    while idx + 1 < bins && p > (idx + 1) as f64 / b {
        idx += 1;
    }
    idx
}

/// Expected calibration error over `bins` equal-width bins, with the bin table.
pub fn ece(records: &[EvalRecord], bins: usize) -> Result<(f64, Vec<CalibrationBin>)> {
    check(records)?;
    if bins == 0 {
        return Err(Error::invalid("bins", "must be positive"));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct_sum = vec![0.0f64; bins];
    for r in records {
        let j = bin_index(r.p, bins);
        counts[j] += 1;
        conf_sum[j] += r.p;
        correct_sum[j] += r.outcome();
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    let table = (0..bins)
        .map(|j| {
            let count = counts[j];
            let (confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[j] / count as f64, correct_sum[j] / count as f64)
            };
            total += count as f64 / n * (confidence - accuracy).abs();
            CalibrationBin {
                lower: j as f64 / bins as f64,
                upper: (j + 1) as f64 / bins as f64,
                count,
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok((total, table))
}

pub fn brier(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    Ok(records.iter().map(|r| (r.p - r.outcome()).powi(2)).sum::<f64>() / records.len() as f64)
}

/// Fraction of correct answers, independent of confidence.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    Ok(records.iter().map(EvalRecord::outcome).sum::<f64>() / records.len() as f64)
}

/// Fraction of answers whose thresholded confidence matches the outcome,
/// i.e. the accuracy of the confidence score read as a correctness classifier.
pub fn classification_accuracy(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    check(records)?;
    let hits = records.iter().filter(|r| (r.p >= threshold) == r.correct).count();
    Ok(hits as f64 / records.len() as f64)
}

fn sorted_desc(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.p.partial_cmp(&a.p).unwrap_or(Ordering::Equal));
    sorted
}

/// Probability that a random correct answer outranks a random incorrect one,
/// ties counting one half.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    let positives = records.iter().filter(|r| r.correct).count();
    let negatives = records.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both correct and incorrect answers"));
    }
    let sorted = sorted_desc(records);
    // Walk tie groups from the top, counting negatives strictly below.
    let mut wins = 0.0;
    let mut negatives_above = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < sorted.len() && sorted[j].p == sorted[i].p {
            if sorted[j].correct {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        let negatives_below = negatives - negatives_above - neg;
        wins += pos as f64 * (negatives_below as f64 + 0.5 * neg as f64);
        negatives_above += neg;
        i = j;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

/// Average precision: sum over descending score thresholds of
/// `(recall gain) * precision`, each tie group treated as one threshold.
pub fn aucpr(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    let positives = records.iter().filter(|r| r.correct).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("AUCPR needs at least one correct answer"));
    }
    let sorted = sorted_desc(records);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let mut group_tp = 0;
        while j < sorted.len() && sorted[j].p == sorted[i].p {
            group_tp += sorted[j].correct as usize;
            j += 1;
        }
        tp += group_tp;
        seen += j - i;
        if group_tp > 0 {
            ap += group_tp as f64 / positives as f64 * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// All metrics at once. Discrimination metrics that are undefined for the
/// given outcomes are reported as `None`.
pub fn evaluate(records: &[EvalRecord], bins: usize) -> Result<MetricReport> {
    let (ece, table) = ece(records, bins)?;
    Ok(MetricReport {
        n: records.len(),
        ece,
        brier: brier(records)?,
        acc: accuracy(records)?,
        aucpr: aucpr(records).ok(),
        auroc: auroc(records).ok(),
        bins: table,
    })
}
