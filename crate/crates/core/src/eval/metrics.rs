use std::collections::HashMap;

use crate::retrieval::{RankedList, Retriever};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// SQuAD-style normalization: lowercase, strip ASCII punctuation, drop the
/// articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized prediction equals any normalized gold answer.
pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> u8 {
    let p = normalize_answer(pred);
    u8::from(golds.iter().any(|g| normalize_answer(g.as_ref()) == p))
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1, maximized over gold answers. 0 when `golds` is empty.
pub fn f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(pred, g.as_ref()))
        .fold(0.0, f64::max)
}

/// 1 iff any of the top-`k` documents' normalized text contains a normalized
/// gold answer. Titles are not matched; empty golds never match.
pub fn recall_at_k<S: AsRef<str>>(
    fused: &RankedList,
    golds: &[S],
    corpus: &dyn Retriever,
    k: usize,
) -> u8 {
    let golds: Vec<String> = golds
        .iter()
        .map(|g| normalize_answer(g.as_ref()))
        .filter(|g| !g.is_empty())
        .collect();
    if golds.is_empty() {
        return 0;
    }
    let hit = fused.doc_ids().take(k).any(|id| {
        corpus.document(id).is_some_and(|d| {
            let text = normalize_answer(&d.text);
            golds.iter().any(|g| text.contains(g.as_str()))
        })
    });
    u8::from(hit)
}
