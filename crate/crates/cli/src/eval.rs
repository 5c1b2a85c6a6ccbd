use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use chainrag::eval::{
    bootstrap_ci, fit_log_linear, pareto_frontier, ConfidenceInterval, LogLinearFit, ScorePoint,
};
use chainrag::{seeds, ExecMode};
use serde::Serialize;

use crate::config::EvalConfig;
use crate::decode::{is_results_file, ResultLine};
use crate::jsonl::read_jsonl;
use crate::run::RunClock;

pub const CURVE_FILE: &str = "curve.csv";

pub fn summary_file_name(label: &str) -> String {
    format!("summary_{label}.json")
}

/// Aggregate scores for one results file; metrics are percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub label: String,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@20")]
    pub recall_20: f64,
    #[serde(rename = "recall@100")]
    pub recall_100: f64,
    pub avg_tokens: f64,
    /// Bootstrap interval of EM.
    pub ci: ConfidenceInterval,
    pub ci_level: f64,
    pub n_resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub label: String,
    pub avg_tokens: f64,
    pub metric: f64,
    pub is_pareto: bool,
    pub fit_a: Option<f64>,
    pub fit_b: Option<f64>,
    pub fit_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub summaries: Vec<Summary>,
    pub curve: Vec<CurveRow>,
    pub fit: Option<LogLinearFit>,
    pub warnings: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn label_of(path: &Path, lines: &[ResultLine]) -> String {
    lines.first().map(|l| l.label.clone()).unwrap_or_else(|| {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("results");
        stem.strip_prefix("results_").unwrap_or(stem).to_string()
    })
}

pub fn summarize(
    label: String,
    lines: &[ResultLine],
    eval: &EvalConfig,
    seed: u64,
) -> Result<Summary> {
    ensure!(!lines.is_empty(), "no results for {label}");
    let pct = |f: fn(&ResultLine) -> f64| 100.0 * mean(lines.iter().map(f));
    let em: Vec<f64> = lines.iter().map(|l| 100.0 * f64::from(l.em)).collect();
    let ci = bootstrap_ci(
        &em,
        eval.n_resamples,
        eval.ci_level,
        seeds::derive(seed, &[seeds::text_hash(&label)]),
        ExecMode::Parallel,
    )?;
    Ok(Summary {
        n: lines.len(),
        em: pct(|l| f64::from(l.em)),
        f1: pct(|l| l.f1),
        recall_10: pct(|l| f64::from(l.recall_at_10)),
        recall_20: pct(|l| f64::from(l.recall_at_20)),
        recall_100: pct(|l| f64::from(l.recall_at_100)),
        avg_tokens: mean(lines.iter().map(|l| l.tokens.total() as f64)),
        ci,
        ci_level: eval.ci_level,
        n_resamples: eval.n_resamples,
        label,
    })
}

/// Pareto flags over (avg_tokens, EM) and a log-linear fit through the
/// frontier when it has at least three points.
pub fn curve(summaries: &[Summary]) -> (Vec<CurveRow>, Option<LogLinearFit>, Vec<String>) {
    let points: Vec<ScorePoint> = summaries
        .iter()
        .map(|s| ScorePoint::new(s.label.clone(), s.avg_tokens, s.em))
        .collect();
    let frontier = pareto_frontier(&points);
    let mut warnings = Vec::new();
    let fit = if frontier.len() >= 3 {
        match fit_log_linear(&frontier) {
            Ok(f) => Some(f),
            Err(e) => {
                warnings.push(format!(
                    "log-linear fit failed: {e}; fit columns left empty"
                ));
                None
            }
        }
    } else {
        warnings.push(format!(
            "only {} Pareto point(s); at least 3 are needed for a fit, fit columns left empty",
            frontier.len()
        ));
        None
    };
    let rows = summaries
        .iter()
        .map(|s| CurveRow {
            label: s.label.clone(),
            avg_tokens: s.avg_tokens,
            metric: s.em,
            is_pareto: frontier.iter().any(|p| p.label == s.label),
            fit_a: fit.map(|f| f.a),
            fit_b: fit.map(|f| f.b),
            fit_c: fit.map(|f| f.c),
        })
        .collect();
    (rows, fit, warnings)
}

/// Directories expand to the `results_*.jsonl` files they hold, in name order.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| is_results_file(f))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            ensure!(p.exists(), "results file {} does not exist", p.display());
            out.push(p.clone());
        }
    }
    ensure!(!out.is_empty(), "no results files given");
    Ok(out)
}

/// Writes one summary JSON per results file plus the shared curve CSV.
pub fn cmd_eval(
    inputs: &[PathBuf],
    output_dir: &Path,
    eval: &EvalConfig,
    seed: u64,
) -> Result<EvalOutput> {
    let clock = RunClock::start("eval");
    let files = expand_inputs(inputs)?;
    std::fs::create_dir_all(output_dir)?;
    let mut summaries = Vec::new();
    for path in &files {
        let lines: Vec<ResultLine> = read_jsonl(path)?;
        let summary = summarize(label_of(path, &lines), &lines, eval, seed)
            .with_context(|| format!("summarizing {}", path.display()))?;
        let out = output_dir.join(summary_file_name(&summary.label));
        std::fs::write(&out, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
        summaries.push(summary);
    }
    let (rows, fit, warnings) = curve(&summaries);
    for w in &warnings {
        tracing::warn!("{w}");
    }
    let curve_path = output_dir.join(CURVE_FILE);
    let mut writer = csv::Writer::from_path(&curve_path)
        .with_context(|| format!("writing {}", curve_path.display()))?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    clock.finish(
        output_dir,
        seed,
        &serde_json::json!({ "inputs": files, "n_resamples": eval.n_resamples, "ci_level": eval.ci_level }),
    )?;
    Ok(EvalOutput {
        summaries,
        curve: rows,
        fit,
        warnings,
    })
}

pub fn report(out: &EvalOutput) -> String {
    let mut s = String::new();
    for (sum, row) in out.summaries.iter().zip(&out.curve) {
        s += &format!(
            "{}: n={} EM {:.1} [{:.1}, {:.1}] F1 {:.1} R@10 {:.1} R@20 {:.1} R@100 {:.1} avg tokens {:.1}{}\n",
            sum.label,
            sum.n,
            sum.em,
            sum.ci.low,
            sum.ci.high,
            sum.f1,
            sum.recall_10,
            sum.recall_20,
            sum.recall_100,
            sum.avg_tokens,
            if row.is_pareto { " (pareto)" } else { "" }
        );
    }
    if let Some(f) = out.fit {
        s += &format!(
            "fit: EM = {:.4} * ln(tokens + {:.4}) + {:.4}\n",
            f.a, f.b, f.c
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(label: &str, avg_tokens: f64, em: f64) -> Summary {
        Summary {
            label: label.into(),
            n: 1,
            em,
            f1: em,
            recall_10: 0.0,
            recall_20: 0.0,
            recall_100: 0.0,
            avg_tokens,
            ci: ConfidenceInterval { low: em, high: em },
            ci_level: 0.95,
            n_resamples: 1,
        }
    }

    #[test]
    fn fit_needs_three_frontier_points() {
        let pts: Vec<Summary> = [(100.0, 10.0), (200.0, 20.0), (400.0, 25.0), (300.0, 5.0)]
            .iter()
            .enumerate()
            .map(|(i, &(t, m))| summary(&format!("s{i}"), t, m))
            .collect();
        let (rows, fit, warnings) = curve(&pts);
        assert_eq!(
            rows.iter().map(|r| r.is_pareto).collect::<Vec<_>>(),
            [true, true, true, false]
        );
        let fit = fit.unwrap();
        assert!(warnings.is_empty());
        assert!(rows
            .iter()
            .all(|r| r.fit_a == Some(fit.a) && r.fit_c == Some(fit.c)));

        let (rows, fit, warnings) = curve(&pts[..2]);
        assert!(fit.is_none() && rows.iter().all(|r| r.fit_a.is_none()));
        assert_eq!(warnings.len(), 1);
    }
}
