use serde::{Deserialize, Serialize};

use super::{EvalError, ScorePoint};

/// Upper bound of the offset search.
pub const B_MAX: f64 = 1.0e7;
/// The offset is kept at least this far above `-min(x)`.
pub const B_EPSILON: f64 = 1.0e-6;

const GRID: usize = 400;
const GOLDEN_ITERS: usize = 200;

/// y = a·ln(x + b) + c, with the residual sum of squares of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub residual: f64,
}

impl LogLinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * (x + self.b).ln() + self.c
    }
}

/// Exact least-squares (a, c) for a fixed offset `b`, plus the residual.
/// Returns `None` if `x + b` is not positive for every point.
pub fn fit_linear_at(xs: &[f64], ys: &[f64], b: f64) -> Option<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let mut us = Vec::with_capacity(xs.len());
    for &x in xs {
        if !(x + b > 0.0) {
            return None;
        }
        us.push((x + b).ln());
    }
    let mu = us.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (u, y) in us.iter().zip(ys) {
        sxy += (u - mu) * (y - my);
        sxx += (u - mu) * (u - mu);
    }
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c = my - a * mu;
    let rss = us
        .iter()
        .zip(ys)
        .map(|(u, y)| {
            let r = y - (a * u + c);
            r * r
        })
        .sum();
    Some((a, c, rss))
}

/// Least-squares fit of y = a·ln(x + b) + c.
///
/// For fixed b the problem is linear in (a, c) and solved exactly; b is found
/// by a log-spaced grid over (−min(x) + ε, B_MAX] followed by golden-section
/// refinement around the best grid cell.
pub fn fit_log_linear(points: &[ScorePoint]) -> Result<LogLinearFit, EvalError> {
    if points
        .iter()
        .any(|p| !p.avg_tokens.is_finite() || !p.metric_value.is_finite())
    {
        return Err(EvalError::NonFinite);
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.avg_tokens).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EvalError::TooFewPoints(distinct.len()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.avg_tokens).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.metric_value).collect();
    let min_x = distinct[0];

    // Search over s = ln(b + min_x), so b = exp(s) - min_x.
    let lo = B_EPSILON.ln();
    let hi = (B_MAX + min_x).ln().max(lo + 1.0);
    let to_b = |s: f64| s.exp() - min_x;
    let rss = |s: f64| fit_linear_at(&xs, &ys, to_b(s)).map_or(f64::INFINITY, |r| r.2);

    let step = (hi - lo) / GRID as f64;
    let grid: Vec<f64> = (0..=GRID).map(|i| rss(lo + step * i as f64)).collect();
    let best = (0..grid.len())
        .min_by(|&i, &j| grid[i].total_cmp(&grid[j]))
        .expect("grid non-empty");

    let mut left = lo + step * best.saturating_sub(1) as f64;
    let mut right = (lo + step * (best + 1) as f64).min(hi);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = right - ratio * (right - left);
    let mut x2 = left + ratio * (right - left);
    let (mut f1, mut f2) = (rss(x1), rss(x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            right = x2;
            x2 = x1;
            f2 = f1;
            x1 = right - ratio * (right - left);
            f1 = rss(x1);
        } else {
            left = x1;
            x1 = x2;
            f1 = f2;
            x2 = left + ratio * (right - left);
            f2 = rss(x2);
        }
    }
    let mut s_best = if f1 <= f2 { x1 } else { x2 };
    if grid[best] < rss(s_best) {
        s_best = lo + step * best as f64;
    }
    let b = to_b(s_best);
    let (a, c, residual) = fit_linear_at(&xs, &ys, b).expect("b inside the feasible range");
    Ok(LogLinearFit { a, b, c, residual })
}
