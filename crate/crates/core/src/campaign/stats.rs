//! Accuracy, running means and the convergence check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Prediction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("{predictions} predictions but {reference} reference entries")]
    LengthMismatch { predictions: usize, reference: usize },
    #[error("series is empty")]
    Empty,
    #[error("convergence window must be at least 2, got {0}")]
    Window(usize),
}

/// What predictions are scored against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Labels(&'a [u32]),
    Predictions(&'a [Prediction]),
}

impl Reference<'_> {
    fn len(&self) -> usize {
        match self {
            Reference::Labels(l) => l.len(),
            Reference::Predictions(p) => p.len(),
        }
    }
}

/// Fraction of predictions agreeing with the reference. Invalid predictions
/// never agree, on either side.
pub fn accuracy(predictions: &[Prediction], reference: Reference<'_>) -> Result<f64, StatsError> {
    if predictions.len() != reference.len() {
        return Err(StatsError::LengthMismatch {
            predictions: predictions.len(),
            reference: reference.len(),
        });
    }
    if predictions.is_empty() {
        return Err(StatsError::Empty);
    }
    let hits = match reference {
        Reference::Labels(labels) => predictions
            .iter()
            .zip(labels)
            .filter(|(p, &l)| p.matches_label(l as usize))
            .count(),
        Reference::Predictions(other) => predictions.iter().zip(other).filter(|(p, &o)| p.agrees_with(o)).count(),
    };
    Ok(hits as f64 / predictions.len() as f64)
}

/// Cumulative moving average: `out[n]` is the mean of the first `n + 1`
/// inputs, from a left-to-right running sum.
///
/// Each value is clamped into the range of the inputs it averages, which
/// only ever removes rounding error (a true mean cannot leave that range).
pub fn cma(series: &[f64]) -> Result<Vec<f64>, StatsError> {
    if series.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sum = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    Ok(series
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            sum += x;
            lo = lo.min(x);
            hi = hi.max(x);
            (sum / (i + 1) as f64).clamp(lo, hi)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// True when the last `window` values of `cma_series` span at most
/// `epsilon`. Shorter series are reported as not converged.
pub fn converged(cma_series: &[f64], window: usize, epsilon: f64) -> Result<Convergence, StatsError> {
    if window < 2 {
        return Err(StatsError::Window(window));
    }
    if cma_series.len() < window {
        return Ok(Convergence {
            converged: false,
            note: Some(format!("insufficient trials: {} < window {window}", cma_series.len())),
        });
    }
    let tail = &cma_series[cma_series.len() - window..];
    let (lo, hi) = tail
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(Convergence {
        converged: hi - lo <= epsilon,
        note: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation (divisor `n`).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean (the final [`cma`] value, so the two agree exactly), population
/// standard deviation, minimum and maximum.
pub fn summarize(samples: &[f64]) -> Result<Summary, StatsError> {
    let mean = *cma(samples)?.last().expect("non-empty");
    let n = samples.len() as f64;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(Summary {
        mean,
        std: var.sqrt(),
        min: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
