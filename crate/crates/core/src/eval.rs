//! Classification and calibration metrics over prediction records.
//!
//! Confidence bins are equal-width and right-inclusive: with `n` bins over
//! `[lo, hi]`, bin `b` holds confidences in `(lo + b w, lo + (b + 1) w]`,
//! and the first bin also holds `lo` itself.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::objectives::flog;
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
    pub correct: bool,
}

impl PredictionRecord {
    pub fn new(probs: Vec<f64>, label: usize) -> Result<Self> {
        if label >= probs.len() {
            return Err(Error::Shape(format!("label {label} with {} classes", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { layer: "probs".into() });
        }
        let top = argmax(&probs);
        Ok(Self {
            confidence: probs[top],
            correct: top == label,
            probs,
            label,
        })
    }
}

fn nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// Percentage of wrong predictions.
pub fn error_rate(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records)?;
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(100.0 * (1.0 - correct as f64 / records.len() as f64))
}

/// Multiclass Brier score: mean of the squared distance to the one-hot label.
pub fn brier(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records)?;
    let total: f64 = records
        .iter()
        .map(|r| {
            r.probs
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == r.label { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Mean negative log-likelihood of the label.
pub fn nll(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().map(|r| -flog(r.probs[r.label])).sum::<f64>() / records.len() as f64)
}

/// Index of the right-inclusive bin holding `c`, or `None` outside `[lo, hi]`.
pub fn bin_index(c: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(lo..=hi).contains(&c) {
        return None;
    }
    let edge = |b: usize| lo + (hi - lo) * b as f64 / bins as f64;
    let guess = (((c - lo) / (hi - lo)) * bins as f64).ceil() as isize - 1;
    let mut b = guess.clamp(0, bins as isize - 1) as usize;
    while b > 0 && c <= edge(b) {
        b -= 1;
    }
    while b + 1 < bins && c > edge(b + 1) {
        b += 1;
    }
    Some(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean confidence (0 for an empty bin).
    pub mean_confidence: f64,
    /// Fraction correct (0 for an empty bin).
    pub accuracy: f64,
}

/// Reliability-diagram bins over `[lo, hi]`. Records whose confidence falls
/// outside the range are left out.
pub fn reliability_bins(records: &[PredictionRecord], bins: usize, lo: f64, hi: f64) -> Result<Vec<ReliabilityBin>> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("bin range [{lo}, {hi}] not within [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for r in records {
        if let Some(b) = bin_index(r.confidence, lo, hi, bins) {
            count[b] += 1;
            conf[b] += r.confidence;
            hits[b] += if r.correct { 1.0 } else { 0.0 };
        }
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
            ReliabilityBin {
                low: lo + (hi - lo) * b as f64 / bins as f64,
                high: lo + (hi - lo) * (b + 1) as f64 / bins as f64,
                count: n,
                mean_confidence: avg(conf[b]),
                accuracy: avg(hits[b]),
            }
        })
        .collect())
}

/// Expected calibration error in percent, over `[0, 1]`.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let table = reliability_bins(records, bins, 0.0, 1.0)?;
    let total = records.len() as f64;
    Ok(100.0
        * table
            .iter()
            .map(|b| b.count as f64 / total * (b.accuracy - b.mean_confidence).abs())
            .sum::<f64>())
}

/// Writes the bin table as comma-separated text.
pub fn write_reliability_csv(bins: &[ReliabilityBin], path: &Path) -> Result<()> {
    let mut out = String::from("bin_low,bin_high,count,mean_confidence,accuracy\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.low, b.high, b.count, b.mean_confidence, b.accuracy
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Flat metrics record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub error_rate: f64,
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
}

pub fn summarize(records: &[PredictionRecord], ece_bins: usize) -> Result<Summary> {
    Ok(Summary {
        count: records.len(),
        error_rate: error_rate(records)?,
        ece: ece(records, ece_bins)?,
        brier: brier(records)?,
        nll: nll(records)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value of the t-test for `r = 0`.
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation with its two-sided p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Precondition("correlation needs at least 3 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Precondition("correlation undefined for a constant series".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Precondition(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { r, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(probs: &[f64], label: usize) -> PredictionRecord {
        PredictionRecord::new(probs.to_vec(), label).unwrap()
    }

    #[test]
    fn error_rate_examples() {
        let all: Vec<_> = (0..4).map(|_| rec(&[0.9, 0.1], 0)).collect();
        assert_eq!(error_rate(&all).unwrap(), 0.0);
        let half: Vec<_> = (0..10).map(|i| rec(&[0.9, 0.1], i % 2)).collect();
        assert_eq!(error_rate(&half).unwrap(), 50.0);
        assert!(error_rate(&[]).is_err());
    }

    #[test]
    fn ece_examples() {
        let perfect: Vec<_> = (0..5).map(|i| rec(&[0.0, 1.0, 0.0], 1 + 0 * i)).collect();
        assert_eq!(ece(&perfect, 10).unwrap(), 0.0);
        let four = [rec(&[0.8, 0.2], 0), rec(&[0.8, 0.2], 0), rec(&[0.8, 0.2], 1), rec(&[0.8, 0.2], 1)];
        assert!((ece(&four, 1).unwrap() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn brier_and_nll_examples() {
        assert_eq!(brier(&[rec(&[0.0, 1.0], 1)]).unwrap(), 0.0);
        assert_eq!(brier(&[rec(&[1.0, 0.0], 1)]).unwrap(), 2.0);
        assert_eq!(nll(&[rec(&[0.0, 1.0], 1)]).unwrap(), 0.0);
        assert!((nll(&[rec(&[0.5, 0.5], 1)]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bins_are_right_inclusive() {
        assert_eq!(bin_index(0.0, 0.0, 1.0, 10), Some(0));
        assert_eq!(bin_index(0.1, 0.0, 1.0, 10), Some(0));
        assert_eq!(bin_index(0.10000001, 0.0, 1.0, 10), Some(1));
        assert_eq!(bin_index(0.3, 0.0, 1.0, 10), Some(2));
        assert_eq!(bin_index(1.0, 0.0, 1.0, 10), Some(9));
        assert_eq!(bin_index(0.6, 0.0, 0.5, 10), None);
        assert_eq!(bin_index(0.5, 0.0, 0.5, 10), Some(9));
    }

    #[test]
    fn pearson_known_values() {
        let c = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert_eq!(c.p_value, 0.0);
        // r = 0.8 with n = 5: t = 0.8 sqrt(3 / 0.36) = 2.3094, two-sided p = 0.1041.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 0.8).abs() < 1e-12);
        assert!((c.p_value - 0.1041).abs() < 1e-3);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    proptest! {
        #[test]
        fn metric_ranges_and_permutation(
            raw in prop::collection::vec((prop::collection::vec(0.01f64..1.0, 4), 0usize..4), 1..40),
            rot in 0usize..40,
        ) {
            let records: Vec<_> = raw
                .iter()
                .map(|(w, l)| {
                    let s: f64 = w.iter().sum();
                    rec(&w.iter().map(|v| v / s).collect::<Vec<_>>(), *l)
                })
                .collect();
            let e = ece(&records, 10).unwrap();
            prop_assert!((0.0..=100.0).contains(&e));
            let b = brier(&records).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
            prop_assert!(nll(&records).unwrap() >= 0.0);
            let mut rotated = records.clone();
            rotated.rotate_left(rot % records.len());
            prop_assert!((ece(&rotated, 10).unwrap() - e).abs() < 1e-9);
        }
    }
}
