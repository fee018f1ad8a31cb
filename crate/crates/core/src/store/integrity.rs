use std::collections::BTreeMap;

use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use super::questions::load_question;
use super::Store;
use crate::domain::{concepts_have_cycle, Concept, ConceptId};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityProblem {
    pub check: String,
    pub detail: String,
}

fn problem(check: &str, detail: impl Into<String>) -> IntegrityProblem {
    IntegrityProblem { check: check.to_string(), detail: detail.into() }
}

fn foreign_keys(conn: &Connection, out: &mut Vec<IntegrityProblem>) -> Result<()> {
    let mut stmt = conn.prepare("PRAGMA foreign_key_check")?;
    let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?, r.get::<_, String>(2)?)))?;
    for row in rows {
        let (table, rowid, parent) = row?;
        out.push(problem("foreign-key", format!("{table} row {rowid} points at a missing {parent} row")));
    }
    Ok(())
}

fn questions(conn: &Connection, out: &mut Vec<IntegrityProblem>) -> Result<()> {
    let ids: Vec<String> = conn
        .prepare("SELECT id FROM questions ORDER BY id")?
        .query_map([], |r| r.get(0))?
        .collect::<rusqlite::Result<_>>()?;
    for id in ids {
        let q = match load_question(conn, &id.clone().into()) {
            Ok(q) => q,
            Err(e) => {
                out.push(problem("question-row", format!("{id}: {e}")));
                continue;
            }
        };
        let report = q.validate();
        for code in report.codes() {
            out.push(problem(code, format!("question {id}")));
        }
        let paper_course: Option<String> = conn
            .query_row("SELECT course_id FROM past_papers WHERE id = ?1", [q.past_paper_id.as_str()], |r| r.get(0))
            .ok();
        match paper_course {
            None => out.push(problem("missing-paper", format!("question {id}"))),
            Some(c) if c != q.course_id.as_str() => {
                out.push(problem("paper-course-mismatch", format!("question {id} is in {} but its paper is in {c}", q.course_id)))
            }
            Some(_) => {}
        }
    }
    let dupes: Vec<(String, String)> = conn
        .prepare("SELECT course_id, fingerprint FROM questions GROUP BY course_id, fingerprint HAVING count(*) > 1")?
        .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
        .collect::<rusqlite::Result<_>>()?;
    for (course, fp) in dupes {
        out.push(problem("duplicate-fingerprint", format!("{fp} in course {course}")));
    }
    Ok(())
}

fn concept_progress(conn: &Connection, out: &mut Vec<IntegrityProblem>) -> Result<()> {
    let mut expected: BTreeMap<(String, String), (i64, i64)> = BTreeMap::new();
    let mut stmt = conn.prepare(
        "SELECT r.user_id, qc.concept_id, r.correct
         FROM user_mcq_responses r JOIN question_concepts qc ON qc.question_id = r.question_id",
    )?;
    for row in stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, bool>(2)?)))? {
        let (user, concept, correct) = row?;
        let e = expected.entry((user, concept)).or_default();
        e.0 += 1;
        e.1 += correct as i64;
    }
    let mut stmt = conn.prepare("SELECT user_id, concept_id, attempted, correct FROM user_concept_progress")?;
    let mut stored: BTreeMap<(String, String), (i64, i64)> = BTreeMap::new();
    for row in stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))? {
        let (user, concept, attempted, correct): (String, String, i64, i64) = row?;
        stored.insert((user, concept), (attempted, correct));
    }
    let keys: std::collections::BTreeSet<_> = expected.keys().chain(stored.keys()).cloned().collect();
    for key in keys {
        let want = expected.get(&key).copied().unwrap_or_default();
        let have = stored.get(&key).copied().unwrap_or_default();
        if want != have {
            out.push(problem(
                "concept-progress",
                format!("user {} concept {}: stored {have:?}, recount {want:?}", key.0, key.1),
            ));
        }
    }
    Ok(())
}

fn concept_tree(conn: &Connection, out: &mut Vec<IntegrityProblem>) -> Result<()> {
    let concepts: Vec<Concept> = conn
        .prepare("SELECT id, name, parent_id FROM concepts")?
        .query_map([], |r| {
            Ok(Concept {
                id: r.get::<_, String>(0)?.into(),
                name: r.get(1)?,
                parent_id: r.get::<_, Option<String>>(2)?.map(ConceptId::from),
            })
        })?
        .collect::<rusqlite::Result<_>>()?;
    if concepts_have_cycle(&concepts) {
        out.push(problem("concept-cycle", "concept parent links form a cycle"));
    }
    Ok(())
}

/// Scans every table for broken links and violated question invariants.
/// An empty list means the store is consistent.
pub fn check_integrity(store: &Store) -> Result<Vec<IntegrityProblem>> {
    store.read(|conn| {
        let mut out = Vec::new();
        foreign_keys(conn, &mut out)?;
        questions(conn, &mut out)?;
        concept_progress(conn, &mut out)?;
        concept_tree(conn, &mut out)?;
        Ok(out)
    })
}
