//! Calibration metrics: expected calibration error, Brier score and
//! binary cross-entropy of confidence against 0/1 correctness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_CE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub brier: f64,
    pub ce: f64,
    pub n_bins: usize,
    pub n_samples: usize,
}

fn check(scores: &[f64], correct: &[bool]) -> Result<()> {
    if scores.len() != correct.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: correct.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("calibration input".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Range(*s));
    }
    Ok(())
}

/// Bin index under equal-width bins `[i/n, (i+1)/n)`, last bin closed.
pub fn bin_index(score: f64, n_bins: usize) -> usize {
    ((score * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn ece(scores: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    check(scores, correct)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&s, &c) in scores.iter().zip(correct) {
        let b = bin_index(s, n_bins);
        count[b] += 1;
        conf_sum[b] += s;
        hits[b] += usize::from(c);
    }
    let n = scores.len() as f64;
    let total = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum();
    Ok(total)
}

pub fn brier(scores: &[f64], correct: &[bool]) -> Result<f64> {
    check(scores, correct)?;
    let sum: f64 = scores
        .iter()
        .zip(correct)
        .map(|(&s, &c)| {
            let d = s - if c { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

pub fn ce(scores: &[f64], correct: &[bool], eps: f64) -> Result<f64> {
    check(scores, correct)?;
    if !(eps > 0.0 && eps < 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "eps must lie in (0, 1e-3), got {eps}"
        )));
    }
    let sum: f64 = scores
        .iter()
        .zip(correct)
        .map(|(&s, &c)| {
            let p = s.clamp(eps, 1.0 - eps);
            if c {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

pub fn report(scores: &[f64], correct: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    Ok(CalibrationReport {
        ece: ece(scores, correct, n_bins)?,
        brier: brier(scores, correct)?,
        ce: ce(scores, correct, DEFAULT_CE_EPS)?,
        n_bins,
        n_samples: scores.len(),
    })
}
