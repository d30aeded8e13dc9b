//! Prompt rendering, response parsing and token accounting.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotator::{AnnotatedTest, FaultPatternSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    /// Baseline instructions; annotations (if any) appear inline.
    #[default]
    Baseline,
    /// No inline markers; the retrieved faulty lines get their own section.
    AnnotationFree,
    /// Instructions first, with an explicit pointer to the marked lines.
    Directive,
    /// The whole retrieved case (code, error, labels) appended as context.
    NaiveRag,
}

impl PromptTemplate {
    pub fn name(&self) -> &'static str {
        match self {
            PromptTemplate::Baseline => "baseline",
            PromptTemplate::AnnotationFree => "annotation-free",
            PromptTemplate::Directive => "directive",
            PromptTemplate::NaiveRag => "naive-rag",
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(PromptTemplate::Baseline),
            "annotation-free" => Ok(PromptTemplate::AnnotationFree),
            "directive" => Ok(PromptTemplate::Directive),
            "naive-rag" => Ok(PromptTemplate::NaiveRag),
            other => Err(Error::Config(format!("unknown template `{other}`"))),
        }
    }
}

/// Placeholder bindings that do not change per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSettings {
    pub programming_language: String,
    pub element: String,
    pub id_label: String,
    pub output_template: String,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings {
            programming_language: "Python".into(),
            element: "line".into(),
            id_label: "line number".into(),
            output_template: "[id1, id2, ...]".into(),
        }
    }
}

/// A previously diagnosed case shown in full by the naive RAG template.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedExample {
    pub error_message: String,
    pub lines: Vec<String>,
    pub faulty_lines: Vec<usize>,
}

/// Retrieval output a template may draw on.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptContext<'a> {
    pub patterns: Option<&'a FaultPatternSet>,
    pub examples: &'a [RetrievedExample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    pub k: usize,
    pub max_element_id: usize,
    pub granularity: String,
    pub char_count: usize,
    pub token_count: usize,
    /// Not part of the prompt; lets test clients attribute requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}

pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Counts maximal alphanumeric runs plus every other non-whitespace char.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokenizer;

impl Tokenizer for HeuristicTokenizer {
    fn name(&self) -> &str {
        "heuristic-v1"
    }

    fn count(&self, text: &str) -> usize {
        count_tokens(text)
    }
}

pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

fn numbered(lines: impl Iterator<Item = String>) -> String {
    lines
        .enumerate()
        .map(|(i, l)| format!("{}: {l}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

struct Parts<'a> {
    s: &'a PromptSettings,
    k: usize,
    max_id: usize,
}

impl Parts<'_> {
    fn description(&self, extra: Option<&str>) -> String {
        let Parts { s, k, .. } = self;
        let mut out = format!(
            "## Task Description\nAs an expert software engineer and tester, your mission is to \
             localize faults in {lang} test scripts at the {el} level. You will be provided with \
             the test scripts and the error message caused by the test failure. Your goal is to \
             identify {k} {el}s that are most likely responsible for the failure and require \
             modification.",
            lang = s.programming_language,
            el = s.element,
        );
        if let Some(extra) = extra {
            out.push(' ');
            out.push_str(extra);
        }
        out
    }

    fn inputs(&self, error: &str, code: &str, extra: Option<String>) -> String {
        let mut out = format!(
            "## Inputs\n### Error Message\nHere is the error message caused by the test \
             failure:\n{error}\n\n### Code\nBelow are the {lang} test scripts:\n{code}",
            lang = self.s.programming_language,
        );
        if let Some(extra) = extra {
            out.push_str("\n\n");
            out.push_str(&extra);
        }
        out
    }

    fn return_instruction(&self) -> String {
        let Parts { s, k, max_id } = self;
        format!(
            "Return a list of faulty {el}s and their {id}s, without any additional explanation. \
             Note that the list of {el}s and their {id}s should be within the range 1 to \
             {max_id} and the size of the list must be exactly {k}. The list should be also in \
             descending order of likelihood of containing the fault, with the most suspicious \
             {el} first and the least suspicious {el} last. Ensure that your response is \
             strictly in the specified format. The output should follow this format: {tpl}",
            el = s.element,
            id = s.id_label,
            tpl = s.output_template,
        )
    }

    fn instructions(&self, items: &[String]) -> String {
        let mut out = String::from("## Task Instructions");
        for (i, item) in items.iter().enumerate() {
            out.push_str(&format!("\n{}. {item}", i + 1));
        }
        out
    }

    fn examine(&self, extra: &str) -> String {
        format!("Carefully examine the provided test scripts and the associated error message{extra}.")
    }

    fn identify(&self) -> String {
        format!(
            "Identify the {} {}s that are most likely to contain the faults.",
            self.k, self.s.element
        )
    }
}

/// Renders `tpl` for `at`. Templates that need retrieval context fall back
/// to the baseline layout when that context is empty, so a query without
/// usable history gets exactly the baseline prompt.
pub fn render_prompt(
    at: &AnnotatedTest,
    ctx: &PromptContext<'_>,
    tpl: PromptTemplate,
    k: usize,
    settings: &PromptSettings,
    tokenizer: &dyn Tokenizer,
) -> Result<PromptBundle> {
    let n = at.base.len();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, lines: n });
    }
    let parts = Parts {
        s: settings,
        k,
        max_id: n,
    };
    let lang = &settings.programming_language;
    let error = &at.base.error_message;
    let inline_code = || numbered((1..=n).filter_map(|i| at.rendered_line(i)));
    let plain_code = || numbered(at.base.lines.iter().cloned());
    let baseline = |code: String| {
        [
            parts.description(None),
            parts.inputs(error, &code, None),
            parts.instructions(&[
                parts.examine(""),
                parts.identify(),
                parts.return_instruction(),
            ]),
        ]
    };

    let patterns = ctx.patterns.filter(|p| !p.is_empty());
    let sections: [String; 3] = match tpl {
        PromptTemplate::Baseline => baseline(inline_code()),
        PromptTemplate::AnnotationFree => match patterns {
            None => baseline(plain_code()),
            Some(p) => [
                parts.description(Some(
                    "To reason about this faulty test case, you will also be provided with a set \
                     of faulty lines retrieved from similar test scripts.",
                )),
                parts.inputs(
                    error,
                    &plain_code(),
                    Some(format!(
                        "### Additional Context\nBelow is a set of faulty lines that caused a \
                         similar error message in a similar faulty {lang} test case:\n{}",
                        p.patterns().collect::<Vec<_>>().join("\n")
                    )),
                ),
                parts.instructions(&[
                    parts.examine(" and the similar faulty lines provided as additional context"),
                    parts.identify(),
                    parts.return_instruction(),
                ]),
            ],
        },
        PromptTemplate::Directive => [
            parts.description(None),
            parts.instructions(&[
                format!(
                    "Identify {k} {}s in the following test script that are likely to contain \
                     the fault.",
                    settings.element
                ),
                format!(
                    "You must pay attention to the lines marked with '{}' and start with \
                     investigating them first.",
                    at.message
                ),
                parts.return_instruction(),
            ]),
            parts.inputs(error, &inline_code(), None),
        ],
        PromptTemplate::NaiveRag => match ctx.examples {
            [] => baseline(plain_code()),
            examples => {
                let shown = examples
                    .iter()
                    .map(|ex| {
                        format!(
                            "Error message:\n{}\nCode:\n{}\nFaulty lines: {}",
                            ex.error_message,
                            numbered(ex.lines.iter().cloned()),
                            format_ids(&ex.faulty_lines)
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n\n");
                [
                    parts.description(Some(
                        "To reason about this faulty test case, you will also be provided with \
                         similar faulty test scripts diagnosed earlier, together with their error \
                         messages and labeled faulty lines.",
                    )),
                    parts.inputs(
                        error,
                        &plain_code(),
                        Some(format!(
                            "### Similar Test Case\nBelow is a similar faulty {lang} test case \
                             with its error message and labeled faulty lines:\n{shown}"
                        )),
                    ),
                    parts.instructions(&[
                        parts.examine(" and the similar test case provided as additional context"),
                        parts.identify(),
                        parts.return_instruction(),
                    ]),
                ]
            }
        },
    };
    let text = sections.join("\n\n");
    Ok(PromptBundle {
        char_count: text.chars().count(),
        token_count: tokenizer.count(&text),
        text,
        k,
        max_element_id: n,
        granularity: settings.element.clone(),
        query_id: Some(at.base.id.clone()),
    })
}

pub fn format_ids(ids: &[usize]) -> String {
    format!(
        "[{}]",
        ids.iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    )
}

/// Something the parser had to fix in the model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParseWarning {
    OutOfRange { id: String },
    Duplicate { id: usize },
    Truncated { dropped: usize },
}

/// Element ids in descending suspiciousness. Ids are distinct, within
/// `1..=max_element_id`, and at most `k` long.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub element_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<ParseWarning>,
}

/// Digit runs with an optional directly-preceding minus sign.
fn integers(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev: Option<char> = None;
    for c in text.chars() {
        if c.is_ascii_digit() {
            if cur.is_empty() && prev == Some('-') {
                cur.push('-');
            }
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        prev = Some(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// First `[...]` group that contains at least one integer.
fn bracketed(text: &str) -> Option<Vec<String>> {
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let close = after.find(']')?;
        let inner = &after[..close];
        let ints = integers(inner);
        if !ints.is_empty() {
            return Some(ints);
        }
        rest = &after[close + 1..];
    }
    None
}

/// Pulls a ranked id list out of free-form model output, repairing what it
/// can and recording each repair.
pub fn parse_ranking(text: &str, k: usize, max_element_id: usize) -> Result<RankedPrediction> {
    let raw = bracketed(text).unwrap_or_else(|| integers(text));
    let mut pred = RankedPrediction::default();
    let mut seen = HashSet::new();
    for token in raw {
        match token.parse::<usize>() {
            Ok(id) if (1..=max_element_id).contains(&id) => {
                if seen.insert(id) {
                    pred.element_ids.push(id);
                } else {
                    pred.warnings.push(ParseWarning::Duplicate { id });
                }
            }
            _ => pred.warnings.push(ParseWarning::OutOfRange { id: token }),
        }
    }
    if pred.element_ids.is_empty() {
        return Err(Error::Unparseable);
    }
    if pred.element_ids.len() > k {
        let dropped = pred.element_ids.len() - k;
        pred.element_ids.truncate(k);
        pred.warnings.push(ParseWarning::Truncated { dropped });
    }
    Ok(pred)
}
