//! Context retrieval and line annotation.
//!
//! The faulty lines of the retrieved cases form a pattern set. Every query
//! line gets a score, its smallest normalized edit distance to any pattern,
//! and lines scoring at or below `epsilon` are flagged for the prompt.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TestCase};
use crate::error::{Error, Result};
use crate::simsearch::SimilarityHit;

pub const ANNOTATION_MESSAGE: &str = "# !!! high likelihood of being faulty !!!";
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Read access to fault labels, so callers can audit which labels a query
/// touched.
pub trait LabelSource {
    /// Contents of the faulty lines of `id`, in line order. Empty when the
    /// case carries no labels.
    fn faulty_line_contents(&self, id: &str) -> Result<Vec<String>>;
}

impl LabelSource for Corpus {
    fn faulty_line_contents(&self, id: &str) -> Result<Vec<String>> {
        let tc = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        Ok(faulty_contents(tc))
    }
}

pub(crate) fn faulty_contents(tc: &TestCase) -> Vec<String> {
    tc.faulty_lines
        .iter()
        .filter_map(|&i| tc.line(i).map(str::to_string))
        .collect()
}

/// Deduplicated faulty-line contents with the cases each came from, in
/// first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPatternSet {
    patterns: IndexMap<String, Vec<String>>,
}

impl FaultPatternSet {
    pub fn insert(&mut self, pattern: impl Into<String>, source: &str) {
        let sources = self.patterns.entry(pattern.into()).or_default();
        if !sources.iter().any(|s| s == source) {
            sources.push(source.to_string());
        }
    }

    pub fn union(&self, other: &FaultPatternSet) -> FaultPatternSet {
        let mut out = self.clone();
        for (p, sources) in &other.patterns {
            for s in sources {
                out.insert(p.clone(), s);
            }
        }
        out
    }

    pub fn patterns(&self) -> impl Iterator<Item = &str> {
        self.patterns.keys().map(String::as_str)
    }

    pub fn provenance(&self, pattern: &str) -> Option<&[String]> {
        self.patterns.get(pattern).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for FaultPatternSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut set = FaultPatternSet::default();
        for p in iter {
            set.insert(p, "");
        }
        set
    }
}

/// Unions the faulty lines of every hit. Hits without labels are skipped
/// and their ids returned alongside.
pub fn retrieve_context(
    hits: &[SimilarityHit],
    labels: &dyn LabelSource,
) -> Result<(FaultPatternSet, Vec<String>)> {
    let mut set = FaultPatternSet::default();
    let mut unlabeled = Vec::new();
    for hit in hits {
        let lines = labels.faulty_line_contents(&hit.test_id)?;
        if lines.is_empty() {
            unlabeled.push(hit.test_id.clone());
        }
        for line in lines {
            set.insert(line, &hit.test_id);
        }
    }
    Ok((set, unlabeled))
}

/// Denominator used to turn an edit distance into [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// distance / max(|a|, |b|)
    #[default]
    Max,
    /// distance / (|a| + |b|)
    Sum,
    /// distance / length of the longest minimum-cost alignment
    Align,
}

impl Normalizer {
    pub fn name(&self) -> &'static str {
        match self {
            Normalizer::Max => "max",
            Normalizer::Sum => "sum",
            Normalizer::Align => "align",
        }
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Normalizer::Max),
            "sum" => Ok(Normalizer::Sum),
            "align" => Ok(Normalizer::Align),
            other => Err(Error::Config(format!("unknown normalizer `{other}`"))),
        }
    }
}

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_table(&a, &b).0
}

/// Returns (distance, longest alignment length among optimal alignments).
fn edit_table(a: &[char], b: &[char]) -> (usize, usize) {
    // Each cell is (cost, alignment length); prefer lower cost, then longer.
    let better = |x: (usize, usize), y: (usize, usize)| {
        if x.0 < y.0 || (x.0 == y.0 && x.1 > y.1) {
            x
        } else {
            y
        }
    };
    let mut prev: Vec<(usize, usize)> = (0..=b.len()).map(|j| (j, j)).collect();
    let mut cur = vec![(0, 0); b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = (i + 1, i + 1);
        for (j, cb) in b.iter().enumerate() {
            let diag = prev[j];
            let sub = (diag.0 + usize::from(ca != cb), diag.1 + 1);
            let del = (prev[j + 1].0 + 1, prev[j + 1].1 + 1);
            let ins = (cur[j].0 + 1, cur[j].1 + 1);
            cur[j + 1] = better(better(sub, del), ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance scaled into [0, 1]; two empty strings are at distance 0.
pub fn normalized_levenshtein(a: &str, b: &str, normalizer: Normalizer) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (dist, align_len) = edit_table(&a, &b);
    let denom = match normalizer {
        Normalizer::Max => a.len().max(b.len()),
        Normalizer::Sum => a.len() + b.len(),
        Normalizer::Align => align_len,
    };
    dist as f64 / denom as f64
}

/// Scoring and tagging knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub epsilon: f64,
    pub normalizer: Normalizer,
    /// Strip leading indentation as well as trailing whitespace.
    pub trim: bool,
    pub message: String,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            epsilon: DEFAULT_EPSILON,
            normalizer: Normalizer::Max,
            trim: false,
            message: ANNOTATION_MESSAGE.to_string(),
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn normalize<'a>(&self, line: &'a str) -> &'a str {
        if self.trim {
            line.trim()
        } else {
            line.trim_end()
        }
    }
}

/// Smallest normalized distance from `line` to any pattern.
pub fn line_score(line: &str, patterns: &FaultPatternSet, cfg: &AnnotatorConfig) -> Result<f64> {
    let line = cfg.normalize(line);
    patterns
        .patterns()
        .map(|p| normalized_levenshtein(line, cfg.normalize(p), cfg.normalizer))
        .min_by(f64::total_cmp)
        .ok_or(Error::EmptyPatternSet)
}

/// The query plus its per-line scores and the set of flagged lines. Line
/// text is never modified; the marker is appended only when rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedTest {
    pub base: TestCase,
    /// `scores[i - 1]` for line `i`; `None` when there were no patterns.
    pub scores: Option<Vec<f64>>,
    pub annotated: BTreeSet<usize>,
    pub epsilon: f64,
    pub message: String,
}

impl AnnotatedTest {
    /// The query with nothing flagged.
    pub fn plain(base: TestCase) -> Self {
        AnnotatedTest {
            base,
            scores: None,
            annotated: BTreeSet::new(),
            epsilon: DEFAULT_EPSILON,
            message: ANNOTATION_MESSAGE.to_string(),
        }
    }

    pub fn is_annotated(&self, index: usize) -> bool {
        self.annotated.contains(&index)
    }

    /// Line `index` (1-based) as it appears in the prompt.
    pub fn rendered_line(&self, index: usize) -> Option<String> {
        let line = self.base.line(index)?;
        Some(if self.is_annotated(index) {
            format!("{line} {}", self.message)
        } else {
            line.to_string()
        })
    }
}

pub fn annotate(
    query: &TestCase,
    patterns: &FaultPatternSet,
    cfg: &AnnotatorConfig,
) -> Result<AnnotatedTest> {
    cfg.validate()?;
    let mut at = AnnotatedTest {
        base: query.clone(),
        scores: None,
        annotated: BTreeSet::new(),
        epsilon: cfg.epsilon,
        message: cfg.message.clone(),
    };
    if patterns.is_empty() {
        return Ok(at);
    }
    let scores = query
        .lines
        .iter()
        .map(|l| line_score(l, patterns, cfg))
        .collect::<Result<Vec<_>>>()?;
    at.annotated = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cfg.epsilon)
        .map(|(i, _)| i + 1)
        .collect();
    at.scores = Some(scores);
    Ok(at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Meta, Timestamp};
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Memoized recursive definition of edit distance.
    fn oracle(a: &[char], b: &[char]) -> usize {
        fn go(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(&d) = memo.get(&(a.len(), b.len())) {
                return d;
            }
            let d = (go(&a[1..], b, memo) + 1)
                .min(go(a, &b[1..], memo) + 1)
                .min(go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]));
            memo.insert((a.len(), b.len()), d);
            d
        }
        go(a, b, &mut HashMap::new())
    }

    fn query(lines: &[&str]) -> TestCase {
        TestCase {
            id: "q".into(),
            lines: lines.iter().map(|s| s.to_string()).collect(),
            original_line_map: (1..=lines.len()).collect(),
            error_message: "AssertionError".into(),
            failure_ts: Timestamp::parse("2025-09-26T10:00:00Z").unwrap(),
            faulty_lines: BTreeSet::new(),
            meta: Meta::new(),
        }
    }

    fn cfg(epsilon: f64) -> AnnotatorConfig {
        AnnotatorConfig {
            epsilon,
            ..AnnotatorConfig::default()
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(normalized_levenshtein("abc", "abc", Normalizer::Max), 0.0);
        assert_eq!(normalized_levenshtein("", "xyz", Normalizer::Max), 1.0);
        assert_eq!(normalized_levenshtein("", "", Normalizer::Max), 0.0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert!((normalized_levenshtein("kitten", "sitting", Normalizer::Max) - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(levenshtein("naïve", "naive"), 1);
    }

    #[test]
    fn workflow_assertion_scores() {
        let (a, b) = ("assert result == 5", "assert result == 8");
        assert_eq!(normalized_levenshtein(a, b, Normalizer::Max), 1.0 / 18.0);
        assert_eq!(normalized_levenshtein(a, b, Normalizer::Sum), 1.0 / 36.0);
        assert_eq!(normalized_levenshtein(a, b, Normalizer::Align), 1.0 / 18.0);
        // max-normalized distance sits just above the default threshold
        assert!(normalized_levenshtein(a, b, Normalizer::Max) > DEFAULT_EPSILON);
        assert!(normalized_levenshtein(a, b, Normalizer::Sum) <= DEFAULT_EPSILON);
    }

    #[test]
    fn align_normalizer_counts_alignment_columns() {
        // "ab" vs "ba": distance 2 via two substitutions (2 columns) or
        // delete+insert around a match (3 columns); the longer wins.
        assert_eq!(normalized_levenshtein("ab", "ba", Normalizer::Align), 2.0 / 3.0);
        assert_eq!(normalized_levenshtein("", "xy", Normalizer::Align), 1.0);
    }

    #[test]
    fn score_is_min_over_patterns() {
        let set: FaultPatternSet = ["assert x == 1", "assert result == 8"].into_iter().collect();
        let c = cfg(0.05);
        assert_eq!(line_score("assert x == 1", &set, &c).unwrap(), 0.0);
        assert_eq!(line_score("assert result == 5", &set, &c).unwrap(), 1.0 / 18.0);
        assert!(matches!(
            line_score("x", &FaultPatternSet::default(), &c),
            Err(Error::EmptyPatternSet)
        ));
    }

    #[test]
    fn trailing_whitespace_is_ignored_and_trim_is_opt_in() {
        let set: FaultPatternSet = ["assert x == 1"].into_iter().collect();
        let mut c = cfg(0.0);
        assert_eq!(line_score("assert x == 1   ", &set, &c).unwrap(), 0.0);
        assert!(line_score("    assert x == 1", &set, &c).unwrap() > 0.0);
        c.trim = true;
        assert_eq!(line_score("    assert x == 1", &set, &c).unwrap(), 0.0);
    }

    #[test]
    fn annotate_thresholds() {
        let q = query(&["a = 2", "result = a + a", "assert result == 5"]);
        let set: FaultPatternSet = ["assert result == 8"].into_iter().collect();
        assert_eq!(annotate(&q, &set, &cfg(1.0)).unwrap().annotated.len(), 3);
        assert!(annotate(&q, &set, &cfg(0.0)).unwrap().annotated.is_empty());
        let at = annotate(&q, &set, &cfg(0.06)).unwrap();
        assert_eq!(at.annotated, BTreeSet::from([3]));
        assert_eq!(
            at.rendered_line(3).unwrap(),
            "assert result == 5 # !!! high likelihood of being faulty !!!"
        );
        assert_eq!(at.base, q);
        let empty = annotate(&q, &FaultPatternSet::default(), &cfg(1.0)).unwrap();
        assert!(empty.annotated.is_empty());
        assert!(empty.scores.is_none());
        assert!(annotate(&q, &set, &cfg(1.5)).is_err());
    }

    #[test]
    fn context_union_and_provenance() {
        let mk = |id: &str, lines: &[&str], faulty: &[usize]| TestCase {
            id: id.into(),
            faulty_lines: faulty.iter().copied().collect(),
            ..query(lines)
        };
        let corpus = Corpus::new(vec![
            mk("TC3", &["result = a * b", "assert result == 8"], &[2]),
            mk("TC4", &["x = 1", "assert result == 8"], &[1, 2]),
            mk("TC5", &["y()"], &[]),
        ])
        .unwrap();
        let hit = |id: &str| SimilarityHit {
            test_id: id.into(),
            score: 1.0,
        };
        let (set, unlabeled) = retrieve_context(&[hit("TC3")], &corpus).unwrap();
        assert_eq!(set.patterns().collect::<Vec<_>>(), ["assert result == 8"]);
        assert!(unlabeled.is_empty());

        let (set, unlabeled) =
            retrieve_context(&[hit("TC3"), hit("TC4"), hit("TC5")], &corpus).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.provenance("assert result == 8").unwrap(), ["TC3", "TC4"]);
        assert_eq!(unlabeled, ["TC5"]);

        let (set, _) = retrieve_context(&[], &corpus).unwrap();
        assert!(set.is_empty());
    }

    fn short_string() -> impl Strategy<Value = String> {
        "[abc]{0,12}"
    }

    proptest! {
        #[test]
        fn dp_matches_recursive_oracle(a in short_string(), b in short_string()) {
            let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(levenshtein(&a, &b), oracle(&ca, &cb));
        }

        #[test]
        fn distance_is_a_normalized_metric(a in short_string(), b in short_string()) {
            for n in [Normalizer::Max, Normalizer::Sum, Normalizer::Align] {
                let d = normalized_levenshtein(&a, &b, n);
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(d, normalized_levenshtein(&b, &a, n));
                prop_assert_eq!(d == 0.0, a == b);
            }
        }

        #[test]
        fn score_of_union_is_min(
            line in "[abc ]{0,10}",
            xs in prop::collection::vec("[abc ]{1,10}", 1..4),
            ys in prop::collection::vec("[abc ]{1,10}", 1..4),
        ) {
            let c = cfg(0.05);
            let x: FaultPatternSet = xs.iter().cloned().collect();
            let y: FaultPatternSet = ys.iter().cloned().collect();
            let joint = line_score(&line, &x.union(&y), &c).unwrap();
            let sep = line_score(&line, &x, &c).unwrap().min(line_score(&line, &y, &c).unwrap());
            prop_assert_eq!(joint, sep);
        }

        #[test]
        fn annotation_is_monotone_in_epsilon(
            lines in prop::collection::vec("[ab =1]{1,12}", 1..10),
            pats in prop::collection::vec("[ab =1]{1,12}", 1..4),
        ) {
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let q = query(&refs);
            let set: FaultPatternSet = pats.into_iter().collect();
            let mut prev: Option<BTreeSet<usize>> = None;
            for eps in [0.0, 0.05, 0.10, 0.15, 0.5, 1.0] {
                let at = annotate(&q, &set, &cfg(eps)).unwrap();
                prop_assert_eq!(&at.base, &q);
                if let Some(p) = &prev {
                    prop_assert!(p.is_subset(&at.annotated));
                }
                prev = Some(at.annotated);
            }
            prop_assert_eq!(prev.unwrap().len(), q.len());
        }
    }
}
