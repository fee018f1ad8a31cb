//! Fixed-grammar question extractor for exam-paper text.
//!
//! Grammar, line by line:
//! - stem: a leading ordinal, `1.`, `1)`, `Q1`, `Question 1`;
//! - MCQ option: `A.` / `A)` / `(a)`, letters consecutive from A;
//!   a `*` before or after the text marks the correct option;
//! - SAQ part: `a)`, `b)`, ...;
//! - answer key: `Answer: C` after the options, or an `Answers:` block of
//!   `<ordinal>. <letter>` entries anywhere later in the text;
//! - marks: `(N marks)` on a stem or part line.
//!
//! Lines directly under a stem in the same paragraph continue the stem;
//! anything else that matches no rule is ignored.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;

use super::{RejectedFragment, SynthesisOutput};
use crate::domain::{DraftQuestion, Generator, McqChoice, Provenance, QuestionBody, QuestionContent, SaqPart};

struct Patterns {
    stem: Regex,
    option: Regex,
    part: Regex,
    marks: Regex,
    inline_answer: Regex,
    answers_header: Regex,
    answer_line: Regex,
    answer_entry: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        stem: Regex::new(
            r"^(?:(?i:question)\s*(\d+)\s*[.):]?\s+|(?i:q)(\d+)\s*[.):]?\s+|(\d+)[.)]\s+)(.+)$",
        )
        .unwrap(),
        option: Regex::new(r"^(?:\(([A-Ja-j])\)|([A-J])[.)])\s*(.*)$").unwrap(),
        part: Regex::new(r"^([a-j])\)\s*(.+)$").unwrap(),
        marks: Regex::new(r"(?i)\(\s*(\d+)\s*marks?\s*\)").unwrap(),
        inline_answer: Regex::new(r"^(?i)answer\s*[:\-–]\s*\(?([a-j])\)?\.?$").unwrap(),
        answers_header: Regex::new(r"^(?i)answers?(?:\s+key)?\s*:?$").unwrap(),
        answer_line: Regex::new(r"^(?i)(?:(?:q\s*)?\d+\s*[.):\-]?\s*\(?[a-j]\)?[,;]?\s*)+$").unwrap(),
        answer_entry: Regex::new(r"(?i)(?:q\s*)?(\d+)\s*[.):\-]?\s*\(?([a-j])\)?").unwrap(),
    })
}

#[derive(Debug)]
struct Option_ {
    letter: char,
    text: String,
    starred: bool,
}

#[derive(Debug)]
struct Pending {
    ordinal: u32,
    stem: String,
    stem_open: bool,
    options: Vec<Option_>,
    parts: Vec<String>,
    answer: Option<char>,
    answer_without_options: bool,
    non_contiguous: bool,
    range: Range<usize>,
}

impl Pending {
    fn new(ordinal: u32, stem: &str, range: Range<usize>) -> Self {
        Self {
            ordinal,
            stem: stem.trim().to_string(),
            stem_open: true,
            options: Vec::new(),
            parts: Vec::new(),
            answer: None,
            answer_without_options: false,
            non_contiguous: false,
            range,
        }
    }
}

/// A question recognized in the text, with its byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedItem {
    pub content: QuestionContent,
    pub range: Range<usize>,
}

fn strip_marks(text: &str) -> (String, Option<u32>) {
    let p = patterns();
    let marks = p.marks.captures(text).and_then(|c| c[1].parse().ok());
    let cleaned = p.marks.replace_all(text, "");
    (cleaned.split_whitespace().collect::<Vec<_>>().join(" "), marks)
}

fn letter_index(letter: char) -> usize {
    (letter.to_ascii_uppercase() as u8 - b'A') as usize
}

/// Lines of `text` with the byte offset at which each starts.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |raw| {
        let start = offset;
        offset += raw.len();
        (start, raw.trim_end_matches(['\n', '\r']))
    })
}

/// Runs the grammar and returns recognized items plus rejected fragments,
/// both in text order.
pub fn extract_rule_based_items(text: &str) -> (Vec<ExtractedItem>, Vec<RejectedFragment>) {
    let p = patterns();
    let mut finished: Vec<Pending> = Vec::new();
    let mut current: Option<Pending> = None;
    let mut in_answers_block = false;
    let mut block_answers: Vec<(u32, char)> = Vec::new();

    for (start, raw_line) in lines_with_offsets(text) {
        let line = raw_line.trim();
        let line_range = start..start + raw_line.len();

        if line.is_empty() {
            in_answers_block = false;
            if let Some(q) = current.as_mut() {
                q.stem_open = false;
            }
            continue;
        }

        if in_answers_block {
            if p.answer_line.is_match(line) {
                for c in p.answer_entry.captures_iter(line) {
                    if let Ok(n) = c[1].parse() {
                        block_answers.push((n, c[2].chars().next().unwrap().to_ascii_uppercase()));
                    }
                }
                continue;
            }
            in_answers_block = false;
        }

        if p.answers_header.is_match(line) {
            finished.extend(current.take());
            in_answers_block = true;
            continue;
        }

        if let Some(c) = p.stem.captures(line) {
            finished.extend(current.take());
            let ordinal = c.get(1).or(c.get(2)).or(c.get(3)).unwrap().as_str().parse().unwrap_or(0);
            current = Some(Pending::new(ordinal, &c[4], line_range));
            continue;
        }

        let Some(q) = current.as_mut() else { continue };

        if let Some(c) = p.inline_answer.captures(line) {
            if q.options.is_empty() {
                q.answer_without_options = true;
            } else {
                q.answer = Some(c[1].chars().next().unwrap().to_ascii_uppercase());
            }
            q.stem_open = false;
            q.range.end = line_range.end;
            continue;
        }

        if q.parts.is_empty() {
            if let Some(c) = p.option.captures(line) {
                let letter = c.get(1).or(c.get(2)).unwrap().as_str().chars().next().unwrap().to_ascii_uppercase();
                let expected = (b'A' + q.options.len() as u8) as char;
                if letter != expected {
                    q.non_contiguous = true;
                }
                let body = c[3].trim();
                let starred = body.starts_with('*') || body.ends_with('*');
                q.options.push(Option_ {
                    letter,
                    text: body.trim_matches('*').trim().to_string(),
                    starred,
                });
                q.stem_open = false;
                q.range.end = line_range.end;
                continue;
            }
        }

        if q.options.is_empty() {
            if let Some(c) = p.part.captures(line) {
                q.parts.push(c[2].trim().to_string());
                q.stem_open = false;
                q.range.end = line_range.end;
                continue;
            }
        }

        if q.stem_open {
            q.stem.push(' ');
            q.stem.push_str(line);
            q.range.end = line_range.end;
        }
    }
    finished.extend(current.take());

    for (ordinal, letter) in block_answers {
        if let Some(q) = finished
            .iter_mut()
            .find(|q| q.ordinal == ordinal && !q.options.is_empty() && q.answer.is_none())
        {
            q.answer = Some(letter);
        }
    }

    let mut items = Vec::new();
    let mut rejected = Vec::new();
    for q in finished {
        let fragment = text[q.range.clone()].to_string();
        let reject = |reason: &str| RejectedFragment { raw_fragment: fragment.clone(), reason: reason.to_string() };
        let (stem, stem_marks) = strip_marks(&q.stem);

        if q.answer_without_options {
            rejected.push(reject("no-options"));
            continue;
        }

        let body = if !q.options.is_empty() {
            if q.non_contiguous {
                rejected.push(reject("non-contiguous-options"));
                continue;
            }
            let correct: BTreeSet<usize> = match q.answer {
                Some(letter) => [letter_index(letter)].into(),
                None => q.options.iter().enumerate().filter(|(_, o)| o.starred).map(|(i, _)| i).collect(),
            };
            if correct.is_empty() || correct.iter().any(|&i| i >= q.options.len()) {
                rejected.push(reject("no-answer-key"));
                continue;
            }
            QuestionBody::Mcq {
                choices: q
                    .options
                    .iter()
                    .enumerate()
                    .map(|(i, o)| {
                        debug_assert_eq!(letter_index(o.letter), i);
                        McqChoice { index: i as u32, text: o.text.clone(), is_correct: correct.contains(&i) }
                    })
                    .collect(),
            }
        } else if q.parts.is_empty() {
            QuestionBody::Saq {
                parts: vec![SaqPart {
                    index: 0,
                    prompt: stem.clone(),
                    expected_answer: String::new(),
                    marks: stem_marks.unwrap_or(1),
                }],
            }
        } else {
            QuestionBody::Saq {
                parts: q
                    .parts
                    .iter()
                    .enumerate()
                    .map(|(i, raw)| {
                        let (prompt, marks) = strip_marks(raw);
                        SaqPart { index: i as u32, prompt, expected_answer: String::new(), marks: marks.unwrap_or(1) }
                    })
                    .collect(),
            }
        };

        items.push(ExtractedItem {
            content: QuestionContent { stem, explanation: None, body },
            range: q.range,
        });
    }
    (items, rejected)
}

pub const RULE_BASED_PROVIDER: &str = "rule-based";
pub const RULE_BASED_VERSION: &str = "rule-based-v1";

/// Deterministic extraction with confidence 1.0 and no explanations.
pub fn extract_questions_rule_based(text: &str) -> SynthesisOutput {
    let (items, rejected) = extract_rule_based_items(text);
    let drafts = items
        .into_iter()
        .map(|item| DraftQuestion {
            content: item.content,
            concept_ids: BTreeSet::new(),
            concept_names: Vec::new(),
            provenance: Provenance {
                source_document_id: None,
                generator: Generator::RuleBased,
                confidence: 1.0,
                created_at: DateTime::<Utc>::UNIX_EPOCH,
            },
            source_span: None,
            source_offsets: Some([item.range.start, item.range.end]),
        })
        .collect();
    SynthesisOutput {
        drafts,
        rejected,
        provider_name: RULE_BASED_PROVIDER.to_string(),
        model_version: RULE_BASED_VERSION.to_string(),
        latency_ms: 0,
    }
}
