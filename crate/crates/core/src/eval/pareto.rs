use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    /// (prompt + generated) tokens per instance.
    pub avg_tokens: f64,
    pub metric_value: f64,
    pub label: String,
}

impl ScorePoint {
    pub fn new(label: impl Into<String>, avg_tokens: f64, metric_value: f64) -> Self {
        Self {
            avg_tokens,
            metric_value,
            label: label.into(),
        }
    }

    /// `other` reaches a higher metric for no more tokens, or the same metric for fewer.
    pub fn is_dominated_by(&self, other: &ScorePoint) -> bool {
        (other.metric_value > self.metric_value && other.avg_tokens <= self.avg_tokens)
            || (other.metric_value >= self.metric_value && other.avg_tokens < self.avg_tokens)
    }
}

/// Non-dominated points, sorted by tokens ascending (then metric descending, then label).
///
/// Sort-and-sweep: after ordering by tokens ascending and metric descending,
/// a point survives iff its metric beats the best metric among strictly
/// cheaper points and it is the best at its own token count.
pub fn pareto_frontier(points: &[ScorePoint]) -> Vec<ScorePoint> {
    let mut sorted: Vec<&ScorePoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.avg_tokens
            .total_cmp(&b.avg_tokens)
            .then_with(|| b.metric_value.total_cmp(&a.metric_value))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut out = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let tokens = sorted[i].avg_tokens;
        let top = sorted[i].metric_value;
        let mut j = i;
        while j < sorted.len() && sorted[j].avg_tokens == tokens {
            if sorted[j].metric_value == top && top > best_cheaper {
                out.push(sorted[j].clone());
            }
            j += 1;
        }
        best_cheaper = best_cheaper.max(top);
        i = j;
    }
    out
}
