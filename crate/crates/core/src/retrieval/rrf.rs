use std::collections::BTreeMap;

use super::{RankedEntry, RankedList, RetrievalError};

pub const RRF_DEFAULT_K: u32 = 60;
pub const RRF_DEFAULT_DEPTH: usize = 100;

/// Reciprocal rank fusion: score(d) = Σ 1/(k_rrf + rank_d) over the top
/// `depth` entries of every list containing d, ranks starting at 1.
///
/// Per-document contributions are summed in ascending rank order, so the
/// fused scores (and therefore the tie-breaking by doc_id) do not depend on
/// the order of `rankings`.
pub fn rrf_merge(
    rankings: &[RankedList],
    k_rrf: u32,
    depth: usize,
) -> Result<RankedList, RetrievalError> {
    if rankings.is_empty() {
        return Err(RetrievalError::NoRankings);
    }
    let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for list in rankings {
        for (i, entry) in list.entries().iter().take(depth).enumerate() {
            ranks.entry(entry.doc_id.as_str()).or_default().push(i + 1);
        }
    }
    let k = f64::from(k_rrf);
    let mut fused: Vec<RankedEntry> = ranks
        .into_iter()
        .map(|(doc_id, mut rs)| {
            rs.sort_unstable();
            let score = rs.iter().map(|&r| 1.0 / (k + r as f64)).sum();
            RankedEntry {
                doc_id: doc_id.to_string(),
                score,
            }
        })
        .collect();
    fused.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    Ok(RankedList { entries: fused })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(ids: &[&str]) -> RankedList {
        let n = ids.len();
        RankedList::new(
            ids.iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    doc_id: id.to_string(),
                    score: (n - i) as f64,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_ranking_keeps_order() {
        let out = rrf_merge(&[list(&["c", "a", "b"])], 60, 100).unwrap();
        assert_eq!(out.doc_ids().collect::<Vec<_>>(), vec!["c", "a", "b"]);
    }

    #[test]
    fn direct_formula() {
        let out = rrf_merge(&[list(&["x", "y"]), list(&["y", "z", "x"])], 60, 100).unwrap();
        let x = out.entries().iter().find(|e| e.doc_id == "x").unwrap();
        assert!((x.score - (1.0 / 61.0 + 1.0 / 63.0)).abs() < 1e-15);
    }

    #[test]
    fn depth_truncates_each_list() {
        let out = rrf_merge(&[list(&["a", "b", "c"])], 60, 2).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            rrf_merge(&[], 60, 10),
            Err(RetrievalError::NoRankings)
        ));
    }
}
