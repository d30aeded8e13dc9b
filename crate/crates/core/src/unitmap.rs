//! Lifting line-level predictions and labels to coarser logical units.
//!
//! Two lightweight mappers ship: a statement mapper that joins physical
//! lines continued by open brackets or a trailing backslash, and an
//! approximate block mapper built on top of it. Both sit behind
//! [`UnitMapper`] so a real parser can be substituted.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TestCase;
use crate::error::{Error, Result};

/// Element granularity of predictions and scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Line,
    Statement,
    Block,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Line, Granularity::Statement, Granularity::Block];

    pub fn name(&self) -> &'static str {
        match self {
            Granularity::Line => "line",
            Granularity::Statement => "statement",
            Granularity::Block => "block",
        }
    }

    /// Mapper implementing this granularity.
    pub fn mapper(&self) -> &'static dyn UnitMapper {
        match self {
            Granularity::Line => &LineMapper,
            Granularity::Statement => &StatementMapper,
            Granularity::Block => &BlockMapper,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Granularity::Line),
            "statement" => Ok(Granularity::Statement),
            "block" => Ok(Granularity::Block),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Partition of lines `1..=n` into contiguous units numbered from 1 in
/// order of their first line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitMap {
    pub kind: Granularity,
    line_to_unit: Vec<usize>,
    unit_spans: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl UnitMap {
    /// Builds a map from the first line of every unit.
    fn from_starts(kind: Granularity, line_count: usize, starts: &[usize]) -> Self {
        let mut unit_spans = Vec::with_capacity(starts.len());
        for (u, &first) in starts.iter().enumerate() {
            let last = starts.get(u + 1).map_or(line_count, |next| next - 1);
            unit_spans.push((first, last));
        }
        let mut line_to_unit = Vec::with_capacity(line_count);
        for (u, &(first, last)) in unit_spans.iter().enumerate() {
            line_to_unit.extend(std::iter::repeat(u + 1).take(last + 1 - first));
        }
        UnitMap {
            kind,
            line_to_unit,
            unit_spans,
            warnings: Vec::new(),
        }
    }

    /// One unit per line.
    pub fn identity(line_count: usize) -> Self {
        let starts: Vec<usize> = (1..=line_count).collect();
        UnitMap::from_starts(Granularity::Line, line_count, &starts)
    }

    pub fn line_count(&self) -> usize {
        self.line_to_unit.len()
    }

    pub fn unit_count(&self) -> usize {
        self.unit_spans.len()
    }

    /// Unit of the 1-based `line`.
    pub fn unit_of(&self, line: usize) -> Option<usize> {
        line.checked_sub(1).and_then(|i| self.line_to_unit.get(i)).copied()
    }

    /// Inclusive `(first, last)` line span of `unit`.
    pub fn span(&self, unit: usize) -> Option<(usize, usize)> {
        unit.checked_sub(1).and_then(|u| self.unit_spans.get(u)).copied()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.unit_spans
    }

    /// `{unit_id: [first_line, last_line]}` export form.
    pub fn to_json_map(&self) -> BTreeMap<usize, [usize; 2]> {
        self.unit_spans
            .iter()
            .enumerate()
            .map(|(u, &(a, b))| (u + 1, [a, b]))
            .collect()
    }
}

pub trait UnitMapper: Send + Sync {
    /// Identifier recorded in reports.
    fn name(&self) -> &'static str;
    fn map(&self, tc: &TestCase) -> UnitMap;
}

pub struct LineMapper;
pub struct StatementMapper;
pub struct BlockMapper;

impl UnitMapper for LineMapper {
    fn name(&self) -> &'static str {
        "line"
    }

    fn map(&self, tc: &TestCase) -> UnitMap {
        UnitMap::identity(tc.len())
    }
}

impl UnitMapper for StatementMapper {
    fn name(&self) -> &'static str {
        "approx-statement"
    }

    fn map(&self, tc: &TestCase) -> UnitMap {
        map_statements(tc)
    }
}

impl UnitMapper for BlockMapper {
    fn name(&self) -> &'static str {
        "approx-block"
    }

    fn map(&self, tc: &TestCase) -> UnitMap {
        map_blocks(tc)
    }
}

/// Net bracket depth change of one physical line, and whether its code part
/// ends with a line-continuation backslash. Quotes are tracked within the
/// line only and `#` starts a comment outside strings.
fn scan_line(line: &str, depth: &mut usize) -> bool {
    let mut quote: Option<char> = None;
    let mut chars = line.chars();
    let mut code_end = line.len();
    let mut offset = 0;
    while let Some(c) = chars.next() {
        let width = c.len_utf8();
        match quote {
            Some(q) => {
                if c == '\\' {
                    offset += chars.next().map_or(0, char::len_utf8);
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                '\'' | '"' => quote = Some(c),
                '#' => {
                    code_end = offset;
                    break;
                }
                '(' | '[' | '{' => *depth += 1,
                ')' | ']' | '}' => *depth = depth.saturating_sub(1),
                _ => {}
            },
        }
        offset += width;
    }
    quote.is_none() && line[..code_end].trim_end().ends_with('\\')
}

/// Groups physical lines into logical statements.
pub fn map_statements(tc: &TestCase) -> UnitMap {
    let mut starts = Vec::new();
    let mut depth = 0usize;
    let mut continued = false;
    for (i, line) in tc.lines.iter().enumerate() {
        if !continued {
            starts.push(i + 1);
        }
        let backslash = scan_line(line, &mut depth);
        continued = depth > 0 || backslash;
    }
    let mut um = UnitMap::from_starts(Granularity::Statement, tc.len(), &starts);
    if continued {
        um.warnings.push(format!(
            "test `{}`: unterminated statement closed at end of file",
            tc.id
        ));
    }
    um
}

const BLOCK_HEADERS: [&str; 11] = [
    "if", "elif", "else", "for", "while", "try", "except", "finally", "with", "def", "class",
];

fn first_token(line: &str) -> &str {
    let trimmed = line.trim_start();
    let end = trimmed
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(trimmed.len());
    &trimmed[..end]
}

fn indentation(line: &str) -> usize {
    line.chars().take_while(|c| c.is_whitespace()).count()
}

/// Groups statements into approximate control-flow blocks: a block starts
/// at every header statement and wherever the indentation changes.
pub fn map_blocks(tc: &TestCase) -> UnitMap {
    let statements = map_statements(tc);
    let mut starts = Vec::new();
    let mut prev_indent = None;
    for &(first, _) in statements.spans() {
        let line = &tc.lines[first - 1];
        let indent = indentation(line);
        let header = BLOCK_HEADERS.contains(&first_token(line));
        if header || prev_indent != Some(indent) {
            starts.push(first);
        }
        prev_indent = Some(indent);
    }
    let mut um = UnitMap::from_starts(Granularity::Block, tc.len(), &starts);
    um.warnings = statements.warnings;
    um
}

/// Units of the predicted lines in prediction order, first occurrence kept.
/// Lines outside the map are skipped.
pub fn lift_ranking(element_ids: &[usize], um: &UnitMap) -> Vec<usize> {
    let mut seen = HashSet::new();
    element_ids
        .iter()
        .filter_map(|&line| um.unit_of(line))
        .filter(|u| seen.insert(*u))
        .collect()
}

/// Units containing at least one faulty line.
pub fn lift_ground_truth(faulty_lines: &BTreeSet<usize>, um: &UnitMap) -> BTreeSet<usize> {
    faulty_lines.iter().filter_map(|&l| um.unit_of(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Meta, Timestamp};
    use proptest::prelude::*;

    fn tc(lines: &[&str]) -> TestCase {
        TestCase {
            id: "t".into(),
            lines: lines.iter().map(|s| s.to_string()).collect(),
            original_line_map: (1..=lines.len()).collect(),
            error_message: String::new(),
            failure_ts: Timestamp::parse("2025-01-01T00:00:00Z").unwrap(),
            faulty_lines: BTreeSet::new(),
            meta: Meta::new(),
        }
    }

    #[test]
    fn statements_simple() {
        let um = map_statements(&tc(&["x = 1", "y = 2"]));
        assert_eq!(um.spans(), &[(1, 1), (2, 2)]);
    }

    #[test]
    fn statements_join_open_brackets() {
        let um = map_statements(&tc(&["x = (1 +", "     2)"]));
        assert_eq!(um.spans(), &[(1, 2)]);
        assert!(um.warnings.is_empty());
    }

    #[test]
    fn bracket_in_string_is_ignored() {
        // hand trace: `"` opens a string, `(` is inside it, `"` closes it;
        // depth stays 0 so line 2 starts a new statement
        let um = map_statements(&tc(&["s = \"(\"", "y = 1"]));
        assert_eq!(um.spans(), &[(1, 1), (2, 2)]);
        let um = map_statements(&tc(&["s = '\\'('", "y = 1"]));
        assert_eq!(um.spans(), &[(1, 1), (2, 2)]);
    }

    #[test]
    fn bracket_in_comment_is_ignored() {
        let um = map_statements(&tc(&["x = 1  # (see below", "y = 2"]));
        assert_eq!(um.unit_count(), 2);
    }

    #[test]
    fn backslash_continues() {
        let um = map_statements(&tc(&["x = 1 + \\", "    2", "y = 3"]));
        assert_eq!(um.spans(), &[(1, 2), (3, 3)]);
    }

    #[test]
    fn unbalanced_closes_at_eof_with_warning() {
        let um = map_statements(&tc(&["call(1,", "  2,"]));
        assert_eq!(um.spans(), &[(1, 2)]);
        assert_eq!(um.warnings.len(), 1);
    }

    #[test]
    fn straight_line_script_is_one_block() {
        let um = map_blocks(&tc(&["a = 1", "b = f(a)", "assert b"]));
        assert_eq!(um.spans(), &[(1, 3)]);
    }

    #[test]
    fn header_starts_block() {
        let um = map_blocks(&tc(&["def f():", "  x = 1", "  return x"]));
        assert_eq!(um.to_json_map(), BTreeMap::from([(1, [1, 1]), (2, [2, 3])]));
    }

    #[test]
    fn if_else_partition_follows_rule() {
        // header | indent change | header | indent change
        let um = map_blocks(&tc(&["if ok:", "    run()", "else:", "    stop()"]));
        assert_eq!(um.spans(), &[(1, 1), (2, 2), (3, 3), (4, 4)]);
    }

    #[test]
    fn multi_line_statement_stays_in_one_block() {
        let um = map_blocks(&tc(&["x = call(", "        1)", "y = 2", "for i in x:", "    y += i"]));
        assert_eq!(um.spans(), &[(1, 3), (4, 4), (5, 5)]);
    }

    #[test]
    fn lifting() {
        let um = UnitMap::from_starts(Granularity::Block, 6, &[1, 5]);
        // lines 5 and 6 share unit 2, line 2 is unit 1
        assert_eq!(lift_ranking(&[5, 2, 6], &um), vec![2, 1]);
        assert_eq!(lift_ranking(&[], &um), Vec::<usize>::new());
        let one = UnitMap::from_starts(Granularity::Block, 3, &[1]);
        assert_eq!(lift_ranking(&[3, 1, 2], &one), vec![1]);
        assert_eq!(lift_ground_truth(&BTreeSet::from([2]), &um), BTreeSet::from([1]));
        assert_eq!(lift_ground_truth(&BTreeSet::from([5, 6]), &um), BTreeSet::from([2]));
        assert!(lift_ground_truth(&BTreeSet::new(), &um).is_empty());
    }

    #[test]
    fn json_export_shape() {
        let um = map_blocks(&tc(&["def f():", "  x = 1", "  return x"]));
        let json = serde_json::to_string(&um.to_json_map()).unwrap();
        assert_eq!(json, r#"{"1":[1,1],"2":[2,3]}"#);
    }

    fn line_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop::sample::select(vec![
                " ", "  ", "x", "if", "else:", "(", ")", "[", "]", "{", "}", "'", "\"", "#", "\\",
                "=", "for", "def",
            ]),
            0..8,
        )
        .prop_map(|parts| {
            let s = parts.concat();
            if s.trim().is_empty() {
                "x".to_string()
            } else {
                s
            }
        })
    }

    fn check_partition(um: &UnitMap, n: usize) {
        assert_eq!(um.line_count(), n);
        let mut next = 1;
        for (u, &(a, b)) in um.spans().iter().enumerate() {
            assert_eq!(a, next);
            assert!(a <= b);
            for line in a..=b {
                assert_eq!(um.unit_of(line), Some(u + 1));
            }
            next = b + 1;
        }
        assert_eq!(next, n + 1);
    }

    proptest! {
        #[test]
        fn mappers_partition_lines(lines in prop::collection::vec(line_strategy(), 1..20)) {
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let t = tc(&refs);
            for g in Granularity::ALL {
                check_partition(&g.mapper().map(&t), t.len());
            }
            // blocks coarsen statements: every statement start is a line
            // whose block contains the whole statement
            let st = map_statements(&t);
            let bl = map_blocks(&t);
            for &(a, b) in st.spans() {
                prop_assert_eq!(bl.unit_of(a), bl.unit_of(b));
            }
        }

        #[test]
        fn lift_has_no_duplicates(
            starts in prop::collection::btree_set(2usize..=12, 0..6),
            pred in prop::collection::vec(1usize..=12, 0..12),
        ) {
            let mut s = vec![1];
            s.extend(starts);
            let um = UnitMap::from_starts(Granularity::Block, 12, &s);
            let lifted = lift_ranking(&pred, &um);
            prop_assert!(lifted.len() <= pred.len());
            let unique: HashSet<_> = lifted.iter().collect();
            prop_assert_eq!(unique.len(), lifted.len());
        }
    }
}
