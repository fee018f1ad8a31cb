use std::collections::{BTreeSet, HashSet};

use chrono::{DateTime, Datelike, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};

use super::catalog::load_course;
use super::{from_ts, record_change, ts, Change, Store};
use crate::domain::{
    ConceptId, CourseId, DocumentId, DraftQuestion, Fingerprint, Generator, InstitutionId, McqChoice, PaperMeta,
    PastPaper, PastPaperId, Provenance, Question, QuestionBody, QuestionContent, QuestionId, QuestionKind,
    QuestionState, Role, SaqPart,
};
use crate::{Error, Result};

pub const MAX_PAGE_SIZE: u32 = 100;
pub const DEFAULT_PAGE_SIZE: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankInsert {
    pub past_paper_id: PastPaperId,
    /// One id per accepted draft, in input order; drafts that matched an
    /// existing question get that question's id.
    pub question_ids: Vec<QuestionId>,
    /// How many of `question_ids` are new rows.
    pub inserted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFilter {
    pub institution: Option<InstitutionId>,
    pub course: Option<CourseId>,
    pub concept: Option<ConceptId>,
    pub paper: Option<PastPaperId>,
    pub state: Option<QuestionState>,
    /// 1-based.
    pub page: u32,
    pub page_size: u32,
}

impl Default for QuestionFilter {
    fn default() -> Self {
        Self {
            institution: None,
            course: None,
            concept: None,
            paper: None,
            state: None,
            page: 1,
            page_size: DEFAULT_PAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: u64,
    pub page: u32,
    pub page_size: u32,
}

pub(super) fn upsert_paper(
    tx: &Transaction<'_>,
    course_id: &CourseId,
    meta: &PaperMeta,
    document_id: Option<&DocumentId>,
    now: DateTime<Utc>,
) -> Result<PastPaperId> {
    if !meta.year_is_valid(now.year()) {
        return Err(Error::InvalidRequest(format!("paper year {} is out of range", meta.year)));
    }
    let existing: Option<String> = tx
        .query_row(
            "SELECT id FROM past_papers WHERE course_id = ?1 AND title = ?2 AND year = ?3",
            params![course_id.as_str(), meta.title, meta.year],
            |r| r.get(0),
        )
        .optional()?;
    if let Some(id) = existing {
        return Ok(id.into());
    }
    let id = PastPaperId::new();
    tx.execute(
        "INSERT INTO past_papers (id, course_id, title, year, source_document_id, created_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![id.as_str(), course_id.as_str(), meta.title, meta.year, document_id.map(|d| d.as_str()), ts(now)],
    )?;
    Ok(id)
}

pub(super) fn insert_question(tx: &Transaction<'_>, q: &Question) -> Result<()> {
    tx.execute(
        "INSERT INTO questions (id, past_paper_id, course_id, kind, stem, explanation, state, source_document_id,
                                generator, confidence, created_at, fingerprint)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)",
        params![
            q.id.as_str(),
            q.past_paper_id.as_str(),
            q.course_id.as_str(),
            q.content.kind().as_str(),
            q.content.stem,
            q.content.explanation,
            q.state.as_str(),
            q.provenance.source_document_id.as_ref().map(|d| d.as_str()),
            q.provenance.generator.as_str(),
            q.provenance.confidence,
            ts(q.provenance.created_at),
            q.fingerprint.to_string(),
        ],
    )?;
    match &q.content.body {
        QuestionBody::Mcq { choices } => {
            for c in choices {
                tx.execute(
                    "INSERT INTO mcq_choices (question_id, idx, text, is_correct) VALUES (?1, ?2, ?3, ?4)",
                    params![q.id.as_str(), c.index, c.text, c.is_correct],
                )?;
            }
        }
        QuestionBody::Saq { parts } => {
            for p in parts {
                tx.execute(
                    "INSERT INTO saq_parts (question_id, idx, prompt, expected_answer, marks) VALUES (?1, ?2, ?3, ?4, ?5)",
                    params![q.id.as_str(), p.index, p.prompt, p.expected_answer, p.marks],
                )?;
            }
        }
    }
    for concept in &q.concept_ids {
        tx.execute(
            "INSERT INTO question_concepts (question_id, concept_id) VALUES (?1, ?2)",
            params![q.id.as_str(), concept.as_str()],
        )?;
    }
    Ok(())
}

pub(crate) fn question_id_by_fingerprint(conn: &Connection, course: &CourseId, fp: &Fingerprint) -> Result<Option<QuestionId>> {
    Ok(conn
        .query_row(
            "SELECT id FROM questions WHERE course_id = ?1 AND fingerprint = ?2",
            params![course.as_str(), fp.to_string()],
            |r| r.get::<_, String>(0),
        )
        .optional()?
        .map(QuestionId::from))
}

/// Insert half of [`Store::insert_question_bank`], for callers that already
/// hold a transaction.
pub(crate) fn course_fingerprints(conn: &Connection, course: &CourseId) -> Result<HashSet<Fingerprint>> {
    let mut stmt = conn.prepare("SELECT fingerprint FROM questions WHERE course_id = ?1")?;
    let rows = stmt.query_map([course.as_str()], |r| r.get::<_, String>(0))?;
    let mut out = HashSet::new();
    for fp in rows {
        let fp = fp?;
        out.insert(fp.parse().map_err(|_| Error::IntegrityViolation(format!("bad fingerprint {fp}")))?);
    }
    Ok(out)
}

pub(crate) fn insert_bank_tx(
    tx: &Transaction<'_>,
    accepted: &[DraftQuestion],
    course_id: &CourseId,
    meta: &PaperMeta,
    document_id: Option<&DocumentId>,
    state: QuestionState,
    now: DateTime<Utc>,
) -> Result<BankInsert> {
    let course = load_course(tx, course_id).map_err(|e| match e {
        Error::UnknownCourse(id) => Error::IntegrityViolation(format!("course {id} does not exist")),
        other => other,
    })?;
    let past_paper_id = upsert_paper(tx, &course.id, meta, document_id, now)?;
    let mut question_ids = Vec::with_capacity(accepted.len());
    let mut inserted = 0;
    for draft in accepted {
        let report = draft.validate();
        if !report.is_ok() {
            return Err(Error::InvalidContent(format!("draft {:?}: {}", draft.content.stem, report.codes().join(", "))));
        }
        let fingerprint = draft.fingerprint();
        if let Some(id) = question_id_by_fingerprint(tx, &course.id, &fingerprint)? {
            question_ids.push(id);
            continue;
        }
        let q = Question {
            id: QuestionId::new(),
            past_paper_id: past_paper_id.clone(),
            course_id: course.id.clone(),
            concept_ids: draft.concept_ids.clone(),
            state,
            provenance: Provenance {
                source_document_id: document_id.cloned().or_else(|| draft.provenance.source_document_id.clone()),
                generator: draft.provenance.generator,
                confidence: draft.provenance.confidence,
                created_at: now,
            },
            fingerprint,
            content: draft.content.clone(),
        };
        insert_question(tx, &q)?;
        if state == QuestionState::Published {
            record_change(tx, q.id.as_str(), Change::Upsert, now)?;
        }
        question_ids.push(q.id);
        inserted += 1;
    }
    Ok(BankInsert { past_paper_id, question_ids, inserted })
}

pub(crate) fn load_question(conn: &Connection, id: &QuestionId) -> Result<Question> {
    let row = conn
        .query_row(
            "SELECT past_paper_id, course_id, kind, stem, explanation, state, source_document_id, generator,
                    confidence, created_at, fingerprint
             FROM questions WHERE id = ?1",
            [id.as_str()],
            |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, Option<String>>(4)?,
                    r.get::<_, String>(5)?,
                    r.get::<_, Option<String>>(6)?,
                    r.get::<_, String>(7)?,
                    r.get::<_, f64>(8)?,
                    r.get::<_, i64>(9)?,
                    r.get::<_, String>(10)?,
                ))
            },
        )
        .optional()?;
    let (paper, course, kind, stem, explanation, state, doc, generator, confidence, created_at, fp) =
        row.ok_or_else(|| Error::UnknownQuestion(id.to_string()))?;
    let corrupt = |what: &str| Error::IntegrityViolation(format!("question {id} has invalid {what}"));

    let body = match kind.parse::<QuestionKind>().map_err(|_| corrupt("kind"))? {
        QuestionKind::Mcq => {
            let mut stmt = conn.prepare_cached(
                "SELECT idx, text, is_correct FROM mcq_choices WHERE question_id = ?1 ORDER BY idx",
            )?;
            let choices = stmt
                .query_map([id.as_str()], |r| Ok(McqChoice { index: r.get(0)?, text: r.get(1)?, is_correct: r.get(2)? }))?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            QuestionBody::Mcq { choices }
        }
        QuestionKind::Saq => {
            let mut stmt = conn.prepare_cached(
                "SELECT idx, prompt, expected_answer, marks FROM saq_parts WHERE question_id = ?1 ORDER BY idx",
            )?;
            let parts = stmt
                .query_map([id.as_str()], |r| {
                    Ok(SaqPart { index: r.get(0)?, prompt: r.get(1)?, expected_answer: r.get(2)?, marks: r.get(3)? })
                })?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            QuestionBody::Saq { parts }
        }
    };
    let mut stmt =
        conn.prepare_cached("SELECT concept_id FROM question_concepts WHERE question_id = ?1 ORDER BY concept_id")?;
    let concept_ids = stmt
        .query_map([id.as_str()], |r| r.get::<_, String>(0))?
        .map(|r| r.map(ConceptId::from))
        .collect::<rusqlite::Result<BTreeSet<_>>>()?;

    Ok(Question {
        id: id.clone(),
        past_paper_id: paper.into(),
        course_id: course.into(),
        concept_ids,
        state: state.parse().map_err(|_| corrupt("state"))?,
        provenance: Provenance {
            source_document_id: doc.map(DocumentId::from),
            generator: generator.parse::<Generator>().map_err(|_| corrupt("generator"))?,
            confidence,
            created_at: from_ts(created_at),
        },
        fingerprint: fp.parse().map_err(|_| corrupt("fingerprint"))?,
        content: QuestionContent { stem, explanation, body },
    })
}

pub(crate) fn question_state(conn: &Connection, id: &QuestionId) -> Result<QuestionState> {
    let state: Option<String> = conn
        .query_row("SELECT state FROM questions WHERE id = ?1", [id.as_str()], |r| r.get(0))
        .optional()?;
    let state = state.ok_or_else(|| Error::UnknownQuestion(id.to_string()))?;
    state.parse().map_err(|_| Error::IntegrityViolation(format!("question {id} has invalid state")))
}

/// Moves a question to `to` and logs the change for sync clients when its
/// student visibility changes.
pub(crate) fn set_question_state(tx: &Transaction<'_>, id: &QuestionId, to: QuestionState, at: DateTime<Utc>) -> Result<QuestionState> {
    let from = question_state(tx, id)?;
    tx.execute("UPDATE questions SET state = ?2 WHERE id = ?1", params![id.as_str(), to.as_str()])?;
    let was_visible = from == QuestionState::Published;
    let is_visible = to == QuestionState::Published;
    if is_visible && !was_visible {
        record_change(tx, id.as_str(), Change::Upsert, at)?;
    } else if was_visible && !is_visible {
        record_change(tx, id.as_str(), Change::Retire, at)?;
    }
    Ok(from)
}

pub(crate) fn load_paper(conn: &Connection, id: &PastPaperId) -> Result<PastPaper> {
    conn.query_row(
        "SELECT id, course_id, year, title, source_document_id FROM past_papers WHERE id = ?1",
        [id.as_str()],
        |r| {
            Ok(PastPaper {
                id: r.get::<_, String>(0)?.into(),
                course_id: r.get::<_, String>(1)?.into(),
                year: r.get(2)?,
                title: r.get(3)?,
                source_document_id: r.get::<_, Option<String>>(4)?.map(DocumentId::from),
            })
        },
    )
    .optional()?
    .ok_or_else(|| Error::UnknownPaper(id.to_string()))
}

pub(crate) fn paper_question_ids(conn: &Connection, paper: &PastPaperId) -> Result<Vec<QuestionId>> {
    let mut stmt = conn.prepare_cached("SELECT id FROM questions WHERE past_paper_id = ?1 ORDER BY created_at, id")?;
    let ids = stmt
        .query_map([paper.as_str()], |r| r.get::<_, String>(0))?
        .map(|r| r.map(QuestionId::from))
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(ids)
}

impl Store {
    /// Stores accepted drafts under the past paper named by `meta`, all in
    /// one transaction. Drafts whose fingerprint already exists in the course
    /// are not inserted again; the existing id is returned for them.
    pub fn insert_question_bank(
        &self,
        accepted: &[DraftQuestion],
        course_id: &CourseId,
        meta: &PaperMeta,
        document_id: Option<&DocumentId>,
        state: QuestionState,
    ) -> Result<BankInsert> {
        let now = self.now();
        self.write(|tx| insert_bank_tx(tx, accepted, course_id, meta, document_id, state, now))
    }

    /// One page of questions in (created-at, id) order. Students only ever
    /// see published questions.
    pub fn query_questions(&self, filter: &QuestionFilter, role: Role) -> Result<Page<Question>> {
        if filter.page_size > MAX_PAGE_SIZE {
            return Err(Error::PageTooLarge(filter.page_size, MAX_PAGE_SIZE));
        }
        if filter.page == 0 || filter.page_size == 0 {
            return Err(Error::InvalidRequest("page and page_size start at 1".into()));
        }
        let state = match (role, filter.state) {
            (Role::Student, Some(s)) if s != QuestionState::Published => {
                return Ok(Page { items: Vec::new(), total: 0, page: filter.page, page_size: filter.page_size });
            }
            (Role::Student, _) => Some(QuestionState::Published),
            (_, s) => s,
        };
        const WHERE: &str = "WHERE (?1 IS NULL OR q.course_id IN
                                 (SELECT course_id FROM institution_courses WHERE institution_id = ?1))
               AND (?2 IS NULL OR q.course_id = ?2)
               AND (?3 IS NULL OR q.id IN (SELECT question_id FROM question_concepts WHERE concept_id = ?3))
               AND (?4 IS NULL OR q.past_paper_id = ?4)
               AND (?5 IS NULL OR q.state = ?5)";
        let args = params![
            filter.institution.as_ref().map(|i| i.as_str()),
            filter.course.as_ref().map(|c| c.as_str()),
            filter.concept.as_ref().map(|c| c.as_str()),
            filter.paper.as_ref().map(|p| p.as_str()),
            state.map(|s| s.as_str()),
        ];
        self.read(|conn| {
            let total: i64 = conn.query_row(&format!("SELECT count(*) FROM questions q {WHERE}"), args, |r| r.get(0))?;
            let offset = (filter.page as i64 - 1) * filter.page_size as i64;
            let mut stmt = conn.prepare(&format!(
                "SELECT q.id FROM questions q {WHERE} ORDER BY q.created_at, q.id LIMIT {} OFFSET {offset}",
                filter.page_size
            ))?;
            let ids = stmt
                .query_map(args, |r| r.get::<_, String>(0))?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            let items = ids.into_iter().map(|id| load_question(conn, &id.into())).collect::<Result<Vec<_>>>()?;
            Ok(Page { items, total: total as u64, page: filter.page, page_size: filter.page_size })
        })
    }

    pub fn question(&self, id: &QuestionId) -> Result<Question> {
        self.read(|c| load_question(c, id))
    }

    pub fn paper(&self, id: &PastPaperId) -> Result<PastPaper> {
        self.read(|c| load_paper(c, id))
    }

    pub fn paper_by_meta(&self, course: &CourseId, meta: &PaperMeta) -> Result<Option<PastPaper>> {
        self.read(|c| {
            let id: Option<String> = c
                .query_row(
                    "SELECT id FROM past_papers WHERE course_id = ?1 AND title = ?2 AND year = ?3",
                    params![course.as_str(), meta.title, meta.year],
                    |r| r.get(0),
                )
                .optional()?;
            id.map(|id| load_paper(c, &id.into())).transpose()
        })
    }

    /// Every question of a paper, any state, in (created-at, id) order.
    pub fn paper_questions(&self, paper: &PastPaperId) -> Result<Vec<Question>> {
        self.read(|c| {
            load_paper(c, paper)?;
            paper_question_ids(c, paper)?.iter().map(|id| load_question(c, id)).collect()
        })
    }

    pub fn fingerprints(&self, course: &CourseId) -> Result<HashSet<Fingerprint>> {
        self.read(|c| course_fingerprints(c, course))
    }

    pub fn question_count(&self) -> Result<u64> {
        self.read(|c| Ok(c.query_row("SELECT count(*) FROM questions", [], |r| r.get::<_, i64>(0))? as u64))
    }
}
