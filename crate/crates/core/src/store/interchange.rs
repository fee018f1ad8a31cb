//! `.bank.json` interchange: a content-addressed, canonical serialization
//! of one past paper's questions.
//!
//! Keys are sorted, indentation is two spaces, lines end in LF and the file
//! ends with a newline. Questions are ordered by fingerprint and carry no
//! ids or timestamps, so equal content always exports to equal bytes.

use std::collections::BTreeSet;

use chrono::Datelike;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use super::catalog::{load_course, resolve_concepts};
use super::questions::{load_paper, load_question, paper_question_ids, question_id_by_fingerprint};
use super::{questions, record_change, Change, Store};
use crate::domain::{
    CourseId, DraftQuestion, Fingerprint, Generator, McqChoice, PaperMeta, PastPaperId, Provenance, Question,
    QuestionBody, QuestionContent, QuestionId, QuestionKind, QuestionState, SaqPart,
};
use crate::{Error, Result};

pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterchangeDocument {
    pub bank_version: u32,
    pub paper: PaperMeta,
    pub questions: Vec<InterchangeQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterchangeQuestion {
    pub kind: QuestionKind,
    pub stem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<InterchangeChoice>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<Vec<InterchangePart>>,
    /// Concept names, sorted.
    pub concepts: Vec<String>,
    pub state: QuestionState,
    pub generator: Generator,
    pub confidence: f64,
    pub fingerprint: Fingerprint,
}

/// Choice position in the list is its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterchangeChoice {
    pub text: String,
    pub is_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterchangePart {
    pub prompt: String,
    #[serde(default)]
    pub expected_answer: String,
    pub marks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub past_paper_id: PastPaperId,
    pub inserted: usize,
    pub skipped: usize,
}

impl InterchangeDocument {
    /// The canonical byte form.
    pub fn to_canonical_string(&self) -> Result<String> {
        // serde_json's map is ordered by key, so going through Value sorts
        // every object.
        let value = serde_json::to_value(self)?;
        let mut out = serde_json::to_string_pretty(&value)?;
        out.push('\n');
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let doc: Self = serde_json::from_slice(bytes).map_err(|e| Error::BadInterchange(e.to_string()))?;
        if doc.bank_version != BANK_VERSION {
            return Err(Error::BadInterchange(format!("unsupported bank_version {}", doc.bank_version)));
        }
        Ok(doc)
    }
}

fn concept_names(conn: &Connection, q: &Question) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(q.concept_ids.len());
    for id in &q.concept_ids {
        names.push(conn.query_row("SELECT name FROM concepts WHERE id = ?1", [id.as_str()], |r| r.get(0))?);
    }
    names.sort();
    Ok(names)
}

fn to_interchange(conn: &Connection, q: &Question) -> Result<InterchangeQuestion> {
    let (choices, parts) = match &q.content.body {
        QuestionBody::Mcq { choices } => (
            Some(choices.iter().map(|c| InterchangeChoice { text: c.text.clone(), is_correct: c.is_correct }).collect()),
            None,
        ),
        QuestionBody::Saq { parts } => (
            None,
            Some(
                parts
                    .iter()
                    .map(|p| InterchangePart { prompt: p.prompt.clone(), expected_answer: p.expected_answer.clone(), marks: p.marks })
                    .collect(),
            ),
        ),
    };
    Ok(InterchangeQuestion {
        kind: q.content.kind(),
        stem: q.content.stem.clone(),
        explanation: q.content.explanation.clone(),
        choices,
        parts,
        concepts: concept_names(conn, q)?,
        state: q.state,
        generator: q.provenance.generator,
        confidence: q.provenance.confidence,
        fingerprint: q.fingerprint,
    })
}

fn to_content(q: &InterchangeQuestion, position: usize) -> Result<QuestionContent> {
    let invalid = |why: &str| Error::InvalidContent(format!("question {position}: {why}"));
    let body = match (q.kind, &q.choices, &q.parts) {
        (QuestionKind::Mcq, Some(choices), None) => QuestionBody::Mcq {
            choices: choices
                .iter()
                .enumerate()
                .map(|(i, c)| McqChoice { index: i as u32, text: c.text.clone(), is_correct: c.is_correct })
                .collect(),
        },
        (QuestionKind::Saq, None, Some(parts)) => QuestionBody::Saq {
            parts: parts
                .iter()
                .enumerate()
                .map(|(i, p)| SaqPart {
                    index: i as u32,
                    prompt: p.prompt.clone(),
                    expected_answer: p.expected_answer.clone(),
                    marks: p.marks,
                })
                .collect(),
        },
        (QuestionKind::Mcq, _, _) => return Err(invalid("an mcq carries choices and no parts")),
        (QuestionKind::Saq, _, _) => return Err(invalid("an saq carries parts and no choices")),
    };
    Ok(QuestionContent { stem: q.stem.clone(), explanation: q.explanation.clone(), body })
}

impl Store {
    pub fn export_bank(&self, paper: &PastPaperId) -> Result<String> {
        self.export_document(paper)?.to_canonical_string()
    }

    pub fn export_document(&self, paper_id: &PastPaperId) -> Result<InterchangeDocument> {
        self.read(|conn| {
            let paper = load_paper(conn, paper_id)?;
            let mut questions = paper_question_ids(conn, paper_id)?
                .iter()
                .map(|id| load_question(conn, id).and_then(|q| to_interchange(conn, &q)))
                .collect::<Result<Vec<_>>>()?;
            questions.sort_by(|a, b| a.fingerprint.to_string().cmp(&b.fingerprint.to_string()));
            Ok(InterchangeDocument {
                bank_version: BANK_VERSION,
                paper: PaperMeta { title: paper.title, year: paper.year },
                questions,
            })
        })
    }

    /// Imports a bank into `course`, skipping questions whose fingerprint
    /// the course already holds. Nothing is stored unless every question
    /// validates.
    pub fn import_bank(&self, bytes: &[u8], course: &CourseId) -> Result<ImportSummary> {
        let doc = InterchangeDocument::parse(bytes)?;
        let now = self.now();
        if !doc.paper.year_is_valid(now.year()) {
            return Err(Error::InvalidContent(format!("paper year {} is out of range", doc.paper.year)));
        }
        self.write(|tx| {
            let course = load_course(tx, course)?;
            let paper_id = questions::upsert_paper(tx, &course.id, &doc.paper, None, now)?;
            let mut inserted = 0;
            let mut skipped = 0;
            let mut seen = BTreeSet::new();
            for (position, item) in doc.questions.iter().enumerate() {
                let content = to_content(item, position)?;
                let concept_ids = resolve_concepts(tx, &course, &item.concepts)?;
                let draft = DraftQuestion {
                    content,
                    concept_ids,
                    concept_names: item.concepts.clone(),
                    provenance: Provenance {
                        source_document_id: None,
                        generator: item.generator,
                        confidence: item.confidence,
                        created_at: now,
                    },
                    source_span: None,
                    source_offsets: None,
                };
                let report = draft.validate();
                if !report.is_ok() {
                    return Err(Error::InvalidContent(format!("question {position}: {}", report.codes().join(", "))));
                }
                let fingerprint = draft.fingerprint();
                if fingerprint != item.fingerprint {
                    return Err(Error::InvalidContent(format!("question {position}: fingerprint does not match content")));
                }
                if !seen.insert(fingerprint.to_string())
                    || question_id_by_fingerprint(tx, &course.id, &fingerprint)?.is_some()
                {
                    skipped += 1;
                    continue;
                }
                let q = Question {
                    id: QuestionId::new(),
                    past_paper_id: paper_id.clone(),
                    course_id: course.id.clone(),
                    concept_ids: draft.concept_ids,
                    state: item.state,
                    provenance: draft.provenance,
                    fingerprint,
                    content: draft.content,
                };
                questions::insert_question(tx, &q)?;
                if q.state == QuestionState::Published {
                    record_change(tx, q.id.as_str(), Change::Upsert, now)?;
                }
                inserted += 1;
            }
            Ok(ImportSummary { past_paper_id: paper_id, inserted, skipped })
        })
    }
}
