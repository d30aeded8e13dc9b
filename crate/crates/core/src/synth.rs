//! Synthetic corpora for tests, benchmarks and demos.
//!
//! [`twin_corpus`] builds pairs of near-duplicate scripts that share a
//! faulty line, so each case has exactly one planted neighbour carrying
//! its fault pattern.

use std::collections::BTreeSet;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Meta, TestCase, Timestamp};

const FUNCS: [&str; 10] = [
    "open_page", "click", "fill", "select", "submit", "fetch", "load", "parse", "send", "store",
];
const ATTRS: [&str; 6] = ["status", "count", "title", "value", "items", "state"];

fn ident(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
        .collect()
}

fn statement(rng: &mut ChaCha8Rng, vars: &[String]) -> String {
    let var = vars.choose(rng).expect("vars");
    match rng.random_range(0..4) {
        0 => format!(
            "{var} = {}(\"{}\")",
            FUNCS.choose(rng).expect("funcs"),
            ident(rng, 8)
        ),
        1 => format!(
            "{var}.{}({}, {})",
            FUNCS.choose(rng).expect("funcs"),
            rng.random_range(0..1000),
            vars.choose(rng).expect("vars")
        ),
        2 => format!(
            "assert {var}.{} == {}",
            ATTRS.choose(rng).expect("attrs"),
            rng.random_range(0..100)
        ),
        _ => format!("log_step(\"{}\", {var})", ident(rng, 10)),
    }
}

fn base_script(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    let vars: Vec<String> = (0..4).map(|_| ident(rng, 5)).collect();
    (0..len).map(|_| statement(rng, &vars)).collect()
}

fn timestamp(rng: &mut ChaCha8Rng) -> Timestamp {
    let base = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date");
    let at = base + Duration::minutes(rng.random_range(0..525_600));
    let raw = at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    Timestamp::parse(&raw).expect("generated timestamp parses")
}

/// `pairs` pairs of scripts of `lines` lines each. The second case of a
/// pair is a copy of the first with `edits` lines replaced; both carry the
/// same faulty line at the same position (never line 1). Ids are
/// `p{i:03}a` / `p{i:03}b`.
pub fn twin_corpus(pairs: usize, lines: usize, edits: usize, seed: u64) -> Corpus {
    assert!(lines >= 3, "scripts need at least three lines");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(pairs * 2);
    for p in 0..pairs {
        let mut a = base_script(&mut rng, lines);
        let fault_at = rng.random_range(2..=lines);
        a[fault_at - 1] = format!(
            "wait_for(\"#{}\", timeout={})",
            ident(&mut rng, 9),
            rng.random_range(1..10)
        );
        let mut b = a.clone();
        let vars: Vec<String> = (0..4).map(|_| ident(&mut rng, 5)).collect();
        let editable: Vec<usize> = (1..=lines).filter(|&i| i != fault_at).collect();
        for &i in editable.choose_multiple(&mut rng, edits.min(editable.len())) {
            b[i - 1] = statement(&mut rng, &vars);
        }
        let message = format!(
            "TimeoutError: element #{} not found after {}s",
            ident(&mut rng, 6),
            rng.random_range(1..30)
        );
        for (suffix, script) in [("a", a), ("b", b)] {
            cases.push(TestCase {
                id: format!("p{p:03}{suffix}"),
                original_line_map: (1..=lines).collect(),
                lines: script,
                error_message: message.clone(),
                failure_ts: timestamp(&mut rng),
                faulty_lines: BTreeSet::from([fault_at]),
                meta: Meta::new(),
            });
        }
    }
    Corpus::new(cases).expect("generated ids are unique")
}

/// Id of the planted twin of `id` in a [`twin_corpus`].
pub fn twin_of(id: &str) -> String {
    let (stem, last) = id.split_at(id.len() - 1);
    format!("{stem}{}", if last == "a" { "b" } else { "a" })
}
