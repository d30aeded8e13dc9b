//! Temporal data-availability policies that turn the corpus into the
//! per-query knowledge base.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TestCase};
use crate::error::{Error, Result};

pub const DEFAULT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FilterPolicy {
    #[default]
    All,
    AllPreceding,
    /// Keep the `fraction` of candidates closest in failure time.
    ClosestByTime { fraction: f64 },
    /// Like `ClosestByTime`, restricted to strictly earlier failures.
    ClosestTimePreceding { fraction: f64 },
}

impl FilterPolicy {
    /// Parses a CLI policy name, binding `fraction` for the closest-* variants.
    pub fn from_name(name: &str, fraction: f64) -> Result<Self> {
        let policy = match name {
            "all" => FilterPolicy::All,
            "all-preceding" => FilterPolicy::AllPreceding,
            "closest" | "closest-by-time" => FilterPolicy::ClosestByTime { fraction },
            "closest-preceding" | "closest-time-preceding" => {
                FilterPolicy::ClosestTimePreceding { fraction }
            }
            other => return Err(Error::Config(format!("unknown policy `{other}`"))),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FilterPolicy::All => "all",
            FilterPolicy::AllPreceding => "all-preceding",
            FilterPolicy::ClosestByTime { .. } => "closest",
            FilterPolicy::ClosestTimePreceding { .. } => "closest-preceding",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterPolicy::ClosestByTime { fraction }
            | FilterPolicy::ClosestTimePreceding { fraction }
                if !(fraction > 0.0 && fraction <= 1.0) =>
            {
                Err(Error::Config(format!("fraction {fraction} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for FilterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterPolicy::ClosestByTime { fraction }
            | FilterPolicy::ClosestTimePreceding { fraction } => {
                write!(f, "{}({fraction})", self.name())
            }
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for FilterPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterPolicy::from_name(s, DEFAULT_FRACTION)
    }
}

/// Number of cases kept by the closest-* policies out of `available`:
/// `fraction * available` rounded half away from zero, capped at `available`.
pub fn retention_count(fraction: f64, available: usize) -> usize {
    ((fraction * available as f64).round() as usize).min(available)
}

/// The ids a query may retrieve from. Never contains the query itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub query_id: String,
    pub members: Vec<String>,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m == id)
    }
}

/// Builds the knowledge base for `query`. Members are ordered by ascending
/// |Δt| to the query, then earlier failure time, then id.
pub fn filter(query: &TestCase, corpus: &Corpus, policy: FilterPolicy) -> KnowledgeBase {
    let q_ts = query.failure_ts.epoch_ms;
    let mut candidates: Vec<&TestCase> = corpus.iter().filter(|tc| tc.id != query.id).collect();
    if matches!(
        policy,
        FilterPolicy::AllPreceding | FilterPolicy::ClosestTimePreceding { .. }
    ) {
        candidates.retain(|tc| tc.failure_ts.epoch_ms < q_ts);
    }
    candidates.sort_by(|a, b| {
        let da = (a.failure_ts.epoch_ms - q_ts).unsigned_abs();
        let db = (b.failure_ts.epoch_ms - q_ts).unsigned_abs();
        da.cmp(&db)
            .then(a.failure_ts.epoch_ms.cmp(&b.failure_ts.epoch_ms))
            .then_with(|| a.id.cmp(&b.id))
    });
    if let FilterPolicy::ClosestByTime { fraction } | FilterPolicy::ClosestTimePreceding { fraction } =
        policy
    {
        candidates.truncate(retention_count(fraction, candidates.len()));
    }
    KnowledgeBase {
        query_id: query.id.clone(),
        members: candidates.into_iter().map(|tc| tc.id.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Meta, Timestamp};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn case(id: &str, epoch_ms: i64) -> TestCase {
        TestCase {
            id: id.into(),
            lines: vec!["x()".into()],
            original_line_map: vec![1],
            error_message: String::new(),
            failure_ts: Timestamp {
                epoch_ms,
                raw: String::new(),
            },
            faulty_lines: BTreeSet::new(),
            meta: Meta::new(),
        }
    }

    #[test]
    fn retention_matches_reported_knowledge_base_sizes() {
        assert_eq!(retention_count(0.10, 656), 66);
        assert_eq!(retention_count(0.10, 93), 9);
        assert_eq!(retention_count(0.10, 27), 3);
        assert_eq!(retention_count(1.0, 5), 5);
        assert_eq!(retention_count(0.10, 0), 0);
    }

    #[test]
    fn closest_by_time_size_over_leave_one_out_candidates() {
        let cases: Vec<_> = (0..657).map(|i| case(&format!("t{i:03}"), i * 1000)).collect();
        let corpus = Corpus::new(cases).unwrap();
        let q = corpus.get("t300").unwrap();
        let kb = filter(q, &corpus, FilterPolicy::ClosestByTime { fraction: 0.10 });
        assert_eq!(kb.len(), 66);
        assert!(!kb.contains("t300"));
    }

    #[test]
    fn earliest_query_has_no_preceding_cases() {
        let corpus = Corpus::new(vec![case("a", 0), case("b", 10), case("c", 20)]).unwrap();
        let kb = filter(corpus.get("a").unwrap(), &corpus, FilterPolicy::AllPreceding);
        assert!(kb.is_empty());
    }

    #[test]
    fn all_excludes_query_only() {
        let corpus = Corpus::new(vec![case("a", 0), case("b", 10), case("c", 20)]).unwrap();
        let kb = filter(corpus.get("b").unwrap(), &corpus, FilterPolicy::All);
        assert_eq!(kb.members, vec!["a", "c"]);
    }

    #[test]
    fn equal_timestamps_are_not_preceding() {
        let corpus = Corpus::new(vec![case("a", 5), case("b", 5), case("c", 1)]).unwrap();
        let kb = filter(corpus.get("a").unwrap(), &corpus, FilterPolicy::AllPreceding);
        assert_eq!(kb.members, vec!["c"]);
    }

    #[test]
    fn ties_break_on_time_then_id() {
        let corpus =
            Corpus::new(vec![case("q", 100), case("z", 90), case("y", 110), case("x", 110)])
                .unwrap();
        let kb = filter(corpus.get("q").unwrap(), &corpus, FilterPolicy::All);
        assert_eq!(kb.members, vec!["z", "x", "y"]);
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!("all".parse::<FilterPolicy>().unwrap(), FilterPolicy::All);
        assert_eq!(
            FilterPolicy::from_name("closest-preceding", 0.2).unwrap(),
            FilterPolicy::ClosestTimePreceding { fraction: 0.2 }
        );
        assert!("recent".parse::<FilterPolicy>().is_err());
        assert!(FilterPolicy::from_name("closest", 0.0).is_err());
    }

    proptest! {
        #[test]
        fn policy_subset_laws(
            times in prop::collection::vec(0i64..50, 1..40),
            q in 0usize..40,
            fraction in 0.01f64..=1.0,
        ) {
            let cases: Vec<_> = times.iter().enumerate().map(|(i, &t)| case(&format!("t{i}"), t)).collect();
            let corpus = Corpus::new(cases).unwrap();
            let query = &corpus.cases()[q % corpus.len()];
            let set = |p| filter(query, &corpus, p).members.into_iter().collect::<BTreeSet<_>>();
            let all = set(FilterPolicy::All);
            let pre = set(FilterPolicy::AllPreceding);
            let closest = set(FilterPolicy::ClosestByTime { fraction });
            let closest_pre = set(FilterPolicy::ClosestTimePreceding { fraction });
            prop_assert!(pre.is_subset(&all));
            prop_assert!(closest.is_subset(&all));
            prop_assert!(closest_pre.is_subset(&pre));
            prop_assert_eq!(closest.len(), retention_count(fraction, all.len()));
            prop_assert_eq!(closest_pre.len(), retention_count(fraction, pre.len()));
            for s in [&all, &pre, &closest, &closest_pre] {
                prop_assert!(!s.contains(&query.id));
            }
            let again = filter(query, &corpus, FilterPolicy::ClosestByTime { fraction });
            prop_assert_eq!(again.members, filter(query, &corpus, FilterPolicy::ClosestByTime { fraction }).members);
        }
    }
}
