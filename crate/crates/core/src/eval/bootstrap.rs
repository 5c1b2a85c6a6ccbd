use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::exec::{self, ExecMode};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean computed relative to `shift`, which is exact for constant data.
fn shifted_mean(values: impl Iterator<Item = f64>, shift: f64, n: usize) -> f64 {
    shift + values.map(|v| v - shift).sum::<f64>() / n as f64
}

/// Percentile bootstrap of the mean. Resample `r` draws from its own seeded
/// stream, so the interval is identical in sequential and parallel mode.
pub fn bootstrap_ci(
    scores: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
    mode: ExecMode,
) -> Result<ConfidenceInterval, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoScores);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::Level(level));
    }
    if n_resamples == 0 {
        return Err(EvalError::NoResamples);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = scores.len();
    let shift = scores[0];
    let mut means = exec::map_range(mode, n_resamples, |r| {
        let mut rng = seeds::rng(seed, &[r as u64]);
        shifted_mean((0..n).map(|_| scores[rng.gen_range(0..n)]), shift, n)
    });
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        low: percentile(&means, tail),
        high: percentile(&means, 1.0 - tail),
    })
}
