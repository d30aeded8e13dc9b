//! Fault-labeled test case corpus.
//!
//! Raw scripts are preprocessed by dropping whitespace-only lines (comments
//! are kept verbatim), labeled by diffing against their repaired version,
//! deduplicated, and persisted as JSON Lines.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;

/// Free-form metadata carried through the corpus file untouched.
pub type Meta = BTreeMap<String, serde_json::Value>;

/// A test case as it arrives from CI, before preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTestCase {
    pub id: String,
    #[serde(alias = "lines")]
    pub raw_lines: Vec<String>,
    #[serde(default)]
    pub error_message: String,
    pub failure_ts: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired_lines: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: Meta,
}

/// Failure time, kept both as UTC epoch milliseconds (for ordering) and in
/// its original spelling (for round-tripping).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Timestamp {
    pub epoch_ms: i64,
    pub raw: String,
}

impl Timestamp {
    pub fn parse(raw: &str) -> Option<Self> {
        let dt = DateTime::parse_from_rfc3339(raw.trim()).ok()?;
        Some(Timestamp {
            epoch_ms: dt.timestamp_millis(),
            raw: raw.to_string(),
        })
    }
}

/// A preprocessed test script. Line indices are 1-based throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub id: String,
    pub lines: Vec<String>,
    /// `original_line_map[i - 1]` is the raw (1-based) line number of
    /// preprocessed line `i`.
    pub original_line_map: Vec<usize>,
    pub error_message: String,
    pub failure_ts: Timestamp,
    pub faulty_lines: BTreeSet<usize>,
    pub meta: Meta,
}

impl TestCase {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// 1-based line access.
    pub fn line(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.lines.get(i))
            .map(String::as_str)
    }

    pub fn is_labeled(&self) -> bool {
        !self.faulty_lines.is_empty()
    }

    /// Copy of this case with its fault labels removed.
    pub fn without_labels(&self) -> TestCase {
        TestCase {
            faulty_lines: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn apply_label(&mut self, label: &FaultLabel) -> Result<()> {
        if label.test_id != self.id {
            return Err(Error::InvalidTestCase {
                id: self.id.clone(),
                reason: format!("label belongs to `{}`", label.test_id),
            });
        }
        if let Some(&bad) = label
            .faulty_lines
            .iter()
            .find(|&&i| i == 0 || i > self.lines.len())
        {
            return Err(Error::InvalidTestCase {
                id: self.id.clone(),
                reason: format!("faulty line {bad} out of range 1..={}", self.lines.len()),
            });
        }
        self.faulty_lines = label.faulty_lines.clone();
        Ok(())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.lines.is_empty() {
            return Err("no lines".into());
        }
        if let Some(i) = self.lines.iter().position(|l| is_blank(l)) {
            return Err(format!("line {} is blank", i + 1));
        }
        if self.original_line_map.len() != self.lines.len() {
            return Err(format!(
                "original_line_map has {} entries for {} lines",
                self.original_line_map.len(),
                self.lines.len()
            ));
        }
        if self.original_line_map.first().is_some_and(|&first| first == 0)
            || self.original_line_map.windows(2).any(|w| w[0] >= w[1])
        {
            return Err("original_line_map must be 1-based and strictly increasing".into());
        }
        if let Some(&bad) = self
            .faulty_lines
            .iter()
            .find(|&&i| i == 0 || i > self.lines.len())
        {
            return Err(format!("faulty line {bad} out of range"));
        }
        Ok(())
    }
}

/// Ground-truth labels derived from a faulty/repaired pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLabel {
    pub test_id: String,
    pub faulty_lines: BTreeSet<usize>,
    pub modified_count: usize,
}

fn is_blank(line: &str) -> bool {
    line.trim().is_empty()
}

/// Drops whitespace-only lines and records where each surviving line came
/// from. Comments are ordinary lines and survive.
pub fn preprocess(raw: &RawTestCase) -> Result<TestCase> {
    if raw.id.is_empty() {
        return Err(Error::InvalidTestCase {
            id: String::new(),
            reason: "empty id".into(),
        });
    }
    let failure_ts = Timestamp::parse(&raw.failure_ts).ok_or_else(|| Error::BadTimestamp {
        id: raw.id.clone(),
        value: raw.failure_ts.clone(),
    })?;
    let (lines, original_line_map) = strip_blank_lines(&raw.raw_lines);
    if lines.is_empty() {
        return Err(Error::AllLinesBlank { id: raw.id.clone() });
    }
    Ok(TestCase {
        id: raw.id.clone(),
        lines,
        original_line_map,
        error_message: raw.error_message.clone(),
        failure_ts,
        faulty_lines: BTreeSet::new(),
        meta: raw.meta.clone(),
    })
}

fn strip_blank_lines(raw: &[String]) -> (Vec<String>, Vec<usize>) {
    raw.iter()
        .enumerate()
        .filter(|(_, l)| !is_blank(l))
        .map(|(i, l)| (l.clone(), i + 1))
        .unzip()
}

/// Preprocesses `raw` and, when it carries a repaired version, labels it.
pub fn ingest(raw: &RawTestCase) -> Result<(TestCase, Option<FaultLabel>)> {
    let mut tc = preprocess(raw)?;
    let label = match &raw.repaired_lines {
        Some(repaired) => {
            let label = label_against(&tc, repaired);
            tc.apply_label(&label)?;
            Some(label)
        }
        None => None,
    };
    Ok((tc, label))
}

/// Labels `faulty` against the raw lines of its repaired version, which
/// are preprocessed the same way first.
pub fn label_against(faulty: &TestCase, repaired_raw_lines: &[String]) -> FaultLabel {
    let (fixed, _) = strip_blank_lines(repaired_raw_lines);
    label_lines(&faulty.id, &faulty.lines, &fixed)
}

/// Labels every line of `faulty` that a minimal line diff deletes or
/// replaces on the way to `repaired`. Lines only present in `repaired` are
/// ignored.
pub fn label_from_diff(faulty: &TestCase, repaired: &TestCase) -> FaultLabel {
    label_lines(&faulty.id, &faulty.lines, &repaired.lines)
}

fn label_lines(id: &str, faulty: &[String], repaired: &[String]) -> FaultLabel {
    let kept = lcs_matched(faulty, repaired);
    let faulty_lines: BTreeSet<usize> = (1..=faulty.len()).filter(|i| !kept[i - 1]).collect();
    FaultLabel {
        test_id: id.to_string(),
        modified_count: faulty_lines.len(),
        faulty_lines,
    }
}

/// For each line of `a`, whether it is part of a longest common subsequence
/// with `b`. Common prefix and suffix are peeled off before the DP.
fn lcs_matched(a: &[String], b: &[String]) -> Vec<bool> {
    let mut matched = vec![false; a.len()];
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    matched[..prefix].iter_mut().for_each(|m| *m = true);
    matched[a.len() - suffix..]
        .iter_mut()
        .for_each(|m| *m = true);

    let a_mid = &a[prefix..a.len() - suffix];
    let b_mid = &b[prefix..b.len() - suffix];
    let (n, m) = (a_mid.len(), b_mid.len());
    if n == 0 || m == 0 {
        return matched;
    }
    // table[i][j] = LCS length of a_mid[i..] and b_mid[j..]
    let width = m + 1;
    let mut table = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i * width + j] = if a_mid[i] == b_mid[j] {
                table[(i + 1) * width + j + 1] + 1
            } else {
                table[(i + 1) * width + j].max(table[i * width + j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a_mid[i] == b_mid[j] {
            matched[prefix + i] = true;
            i += 1;
            j += 1;
        } else if table[(i + 1) * width + j] >= table[i * width + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    matched
}

/// Ids whose modified-line count exceeds mean + 3σ (population σ) of the
/// collection. The result is a review list; nothing is dropped here.
pub fn flag_outliers(labels: &[FaultLabel]) -> BTreeSet<String> {
    if labels.len() < 2 {
        return BTreeSet::new();
    }
    let n = labels.len() as f64;
    let mean = labels.iter().map(|l| l.modified_count as f64).sum::<f64>() / n;
    let var = labels
        .iter()
        .map(|l| (l.modified_count as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let threshold = mean + 3.0 * var.sqrt();
    labels
        .iter()
        .filter(|l| l.modified_count as f64 > threshold)
        .map(|l| l.test_id.clone())
        .collect()
}

/// An id-indexed, insertion-ordered collection of test cases.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    cases: Vec<TestCase>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(cases: Vec<TestCase>) -> Result<Self> {
        let mut index = HashMap::with_capacity(cases.len());
        for (i, tc) in cases.iter().enumerate() {
            if index.insert(tc.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(tc.id.clone()));
            }
        }
        Ok(Corpus { cases, index })
    }

    pub fn get(&self, id: &str) -> Option<&TestCase> {
        self.index.get(id).map(|&i| &self.cases[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TestCase> {
        self.cases.iter()
    }

    pub fn cases(&self) -> &[TestCase] {
        &self.cases
    }

    pub fn into_cases(self) -> Vec<TestCase> {
        self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<FaultLabel> {
        self.cases
            .iter()
            .map(|tc| FaultLabel {
                test_id: tc.id.clone(),
                faulty_lines: tc.faulty_lines.clone(),
                modified_count: tc.faulty_lines.len(),
            })
            .collect()
    }

    /// Removes the given ids, keeping the order of the rest.
    pub fn without(&self, ids: &BTreeSet<String>) -> Corpus {
        let cases = self
            .cases
            .iter()
            .filter(|tc| !ids.contains(&tc.id))
            .cloned()
            .collect();
        Corpus::new(cases).expect("subset of a valid corpus has unique ids")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        fsutil::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// One record per line, sorted by id.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut sorted: Vec<&TestCase> = self.cases.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        for tc in sorted {
            serde_json::to_writer(&mut out, &CorpusRecord::from(tc))?;
            out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut cases = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io("<corpus>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            let tc = record.into_test_case().map_err(|reason| Error::MalformedRecord {
                line: lineno,
                reason,
            })?;
            if !seen.insert(tc.id.clone()) {
                return Err(Error::DuplicateId(tc.id));
            }
            cases.push(tc);
        }
        Corpus::new(cases)
    }
}

/// Structural equality: same cases regardless of order.
impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .cases
                .iter()
                .all(|tc| other.get(&tc.id).is_some_and(|o| o == tc))
    }
}

/// Default dedup key: SHA-256 over the lines and the error message.
pub fn content_key(tc: &TestCase) -> String {
    let mut h = Sha256::new();
    for line in &tc.lines {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    h.update([0u8]);
    h.update(tc.error_message.as_bytes());
    hex::encode(h.finalize())
}

/// Keeps the first case per key, in input order. Returns the survivors and
/// the ids that were dropped.
pub fn dedup_by<K, F>(cases: Vec<TestCase>, key: F) -> (Vec<TestCase>, Vec<String>)
where
    K: Eq + Hash,
    F: Fn(&TestCase) -> K,
{
    let mut seen = HashSet::new();
    let mut removed = Vec::new();
    let kept = cases
        .into_iter()
        .filter_map(|tc| {
            if seen.insert(key(&tc)) {
                Some(tc)
            } else {
                removed.push(tc.id);
                None
            }
        })
        .collect();
    (kept, removed)
}

pub fn dedup(corpus: &Corpus) -> Corpus {
    let (kept, _) = dedup_by(corpus.cases.clone(), content_key);
    Corpus::new(kept).expect("subset of a valid corpus has unique ids")
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    lines: Vec<String>,
    error_message: String,
    failure_ts: String,
    faulty_lines: Vec<usize>,
    original_line_map: Vec<usize>,
    #[serde(default)]
    meta: Meta,
}

impl From<&TestCase> for CorpusRecord {
    fn from(tc: &TestCase) -> Self {
        CorpusRecord {
            id: tc.id.clone(),
            lines: tc.lines.clone(),
            error_message: tc.error_message.clone(),
            failure_ts: tc.failure_ts.raw.clone(),
            faulty_lines: tc.faulty_lines.iter().copied().collect(),
            original_line_map: tc.original_line_map.clone(),
            meta: tc.meta.clone(),
        }
    }
}

impl CorpusRecord {
    fn into_test_case(self) -> std::result::Result<TestCase, String> {
        let failure_ts = Timestamp::parse(&self.failure_ts)
            .ok_or_else(|| format!("unparseable failure_ts `{}`", self.failure_ts))?;
        let tc = TestCase {
            id: self.id,
            lines: self.lines,
            original_line_map: self.original_line_map,
            error_message: self.error_message,
            failure_ts,
            faulty_lines: self.faulty_lines.into_iter().collect(),
            meta: self.meta,
        };
        tc.validate()?;
        Ok(tc)
    }
}
