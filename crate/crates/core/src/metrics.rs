//! Ranked-retrieval metrics at a cutoff `k`.
//!
//! All functions look at the first `min(k, |pred|)` predicted elements.
//! Precision always divides by the requested `k`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn top(pred: &[usize], k: usize) -> &[usize] {
    &pred[..pred.len().min(k)]
}

fn hits(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> usize {
    top(pred, k).iter().filter(|e| truth.contains(e)).count()
}

pub fn precision_at_k(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    hits(pred, truth, k) as f64 / k as f64
}

/// Zero when `truth` is empty.
pub fn recall_at_k(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    hits(pred, truth, k) as f64 / truth.len() as f64
}

pub fn hit_at_k(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> f64 {
    if hits(pred, truth, k) > 0 {
        1.0
    } else {
        0.0
    }
}

/// Average precision over the relevant elements found in the top `k`;
/// zero when none is found.
pub fn ap_at_k(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (j, e) in top(pred, k).iter().enumerate() {
        if truth.contains(e) {
            found += 1;
            sum += found as f64 / (j + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

/// Reciprocal rank of the first relevant element in the top `k`, else 0.
pub fn rr_at_k(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> f64 {
    top(pred, k)
        .iter()
        .position(|e| truth.contains(e))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// The five metrics of one query, or their means over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub hit: f64,
    pub map: f64,
    pub mrr: f64,
}

impl Scores {
    pub fn compute(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> Self {
        Scores {
            precision: precision_at_k(pred, truth, k),
            recall: recall_at_k(pred, truth, k),
            hit: hit_at_k(pred, truth, k),
            map: ap_at_k(pred, truth, k),
            mrr: rr_at_k(pred, truth, k),
        }
    }

    /// Unweighted mean; `EmptyRun` for no scores.
    pub fn mean(scores: &[Scores]) -> Result<Scores> {
        if scores.is_empty() {
            return Err(Error::EmptyRun);
        }
        let n = scores.len() as f64;
        let mut acc = Scores::default();
        for s in scores {
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.hit += s.hit;
            acc.map += s.map;
            acc.mrr += s.mrr;
        }
        Ok(Scores {
            precision: acc.precision / n,
            recall: acc.recall / n,
            hit: acc.hit / n,
            map: acc.map / n,
            mrr: acc.mrr / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unitmap::{lift_ground_truth, lift_ranking, Granularity};
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    /// Brute-force reference: builds the relevance vector position by
    /// position and evaluates each textbook definition on it.
    fn oracle(pred: &[usize], truth: &BTreeSet<usize>, k: usize) -> Scores {
        let rel: Vec<bool> = (0..k).map(|j| pred.get(j).is_some_and(|e| truth.contains(e))).collect();
        let tp = rel.iter().filter(|r| **r).count();
        let p_at = |j: usize| rel[..j].iter().filter(|r| **r).count() as f64 / j as f64;
        let ap_num: f64 = (1..=k).filter(|&j| rel[j - 1]).map(p_at).sum();
        let first = (1..=k).find(|&j| rel[j - 1]);
        Scores {
            precision: tp as f64 / k as f64,
            recall: if truth.is_empty() { 0.0 } else { tp as f64 / truth.len() as f64 },
            hit: if tp >= 1 { 1.0 } else { 0.0 },
            map: if tp == 0 { 0.0 } else { ap_num / tp as f64 },
            mrr: first.map_or(0.0, |j| 1.0 / j as f64),
        }
    }

    #[test]
    fn hand_case() {
        let s = Scores::compute(&[3, 1, 2], &set(&[1]), 3);
        assert_eq!(s.precision, 1.0 / 3.0);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.hit, 1.0);
        assert_eq!(s.map, 0.5);
        assert_eq!(s.mrr, 0.5);
    }

    #[test]
    fn rank_one_and_misses() {
        let s = Scores::compute(&[4], &set(&[4]), 1);
        assert_eq!(s, Scores { precision: 1.0, recall: 1.0, hit: 1.0, map: 1.0, mrr: 1.0 });
        assert_eq!(Scores::compute(&[1, 2], &set(&[5]), 2), Scores::default());
        assert_eq!(Scores::compute(&[1, 2], &set(&[]), 2).recall, 0.0);
    }

    #[test]
    fn superset_truth_gives_ap_one() {
        assert_eq!(ap_at_k(&[2, 5, 1], &set(&[1, 2, 5, 7]), 3), 1.0);
    }

    #[test]
    fn short_prediction_keeps_k_denominator() {
        assert_eq!(precision_at_k(&[1], &set(&[1]), 5), 0.2);
    }

    #[test]
    fn mean_over_queries() {
        assert!(matches!(Scores::mean(&[]), Err(Error::EmptyRun)));
        let one = Scores::compute(&[3, 1, 2], &set(&[1]), 3);
        assert_eq!(Scores::mean(&[one]).unwrap(), one);
        let a = Scores { map: 1.0, ..Scores::default() };
        let b = Scores::default();
        assert_eq!(Scores::mean(&[a, b]).unwrap().map, 0.5);
    }

    fn instance() -> impl Strategy<Value = (Vec<usize>, BTreeSet<usize>, usize)> {
        (1usize..=8).prop_flat_map(|n| {
            (
                Just((1..=n).collect::<Vec<usize>>()).prop_shuffle(),
                0..=n,
                prop::collection::btree_set(1..=n, 0..=n),
                1..=n,
            )
                .prop_map(|(perm, len, truth, k)| (perm[..len].to_vec(), truth, k))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_oracle((pred, truth, k) in instance()) {
            let got = Scores::compute(&pred, &truth, k);
            let want = oracle(&pred, &truth, k);
            prop_assert!((got.precision - want.precision).abs() < 1e-12);
            prop_assert!((got.recall - want.recall).abs() < 1e-12);
            prop_assert_eq!(got.hit, want.hit);
            prop_assert!((got.map - want.map).abs() < 1e-12);
            prop_assert_eq!(got.mrr, want.mrr);
            for v in [got.precision, got.recall, got.hit, got.map, got.mrr] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn top_one_metrics_agree((pred, truth, _k) in instance()) {
            let s = Scores::compute(&pred, &truth, 1);
            prop_assert_eq!(s.precision, s.hit);
            prop_assert_eq!(s.map, s.hit);
            prop_assert_eq!(s.mrr, s.hit);
        }

        #[test]
        fn unit_hit_dominates_line_hit(
            (pred, truth, k) in instance(),
            headers in prop::collection::btree_set(2usize..=8, 0..4),
        ) {
            // header lines each open a block, so blocks start at 1 and at `headers`
            let lines: Vec<String> = (1..=8)
                .map(|i| if i == 1 || headers.contains(&i) { "if x:".into() } else { "y = 1".into() })
                .collect();
            let tc = crate::corpus::TestCase {
                id: "t".into(),
                original_line_map: (1..=8).collect(),
                lines,
                error_message: String::new(),
                failure_ts: crate::corpus::Timestamp::parse("2025-01-01T00:00:00Z").unwrap(),
                faulty_lines: BTreeSet::new(),
                meta: Default::default(),
            };
            for g in [Granularity::Statement, Granularity::Block] {
                let um = g.mapper().map(&tc);
                let line_hit = hit_at_k(&pred, &truth, k);
                let unit_hit = hit_at_k(&lift_ranking(&pred, &um), &lift_ground_truth(&truth, &um), k);
                prop_assert!(unit_hit >= line_hit);
            }
        }
    }
}
