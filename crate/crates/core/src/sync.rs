//! Offline replay of client mutations and cursor-based pulls of
//! published content.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::domain::{wire_enum, Question, QuestionId, QuestionState, UserId};
use crate::engagement::{apply_feedback, apply_mcq_response, apply_saq_response};
use crate::store::{load_question, meta_get, meta_set, ts, Store};
use crate::{Error, Result};

/// How long change-log entries are kept before compaction.
pub const CHANGE_RETENTION: Duration = Duration::days(30);

const FLOOR_KEY: &str = "sync.floor";
const MAX_OP_ID_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncOpKind {
    McqResponse,
    SaqResponse,
    Feedback,
}

wire_enum!(SyncOpKind {
    McqResponse => "mcq-response",
    SaqResponse => "saq-response",
    Feedback => "feedback",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncOp {
    pub op_id: String,
    pub kind: SyncOpKind,
    pub payload: serde_json::Value,
    pub client_clock: DateTime<Utc>,
    pub user_id: UserId,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct McqPayload {
    question_id: QuestionId,
    chosen_index: i64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaqPayload {
    question_id: QuestionId,
    parts: Vec<String>,
    #[serde(default)]
    self_correct: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackPayload {
    question_id: QuestionId,
    rating: i64,
    #[serde(default)]
    comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum OpStatus {
    Applied,
    Duplicate,
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpResult {
    pub op_id: String,
    #[serde(flatten)]
    pub status: OpStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Changeset {
    pub cursor: String,
    pub upserted_questions: Vec<Question>,
    pub retired_question_ids: Vec<QuestionId>,
}

impl Changeset {
    pub fn is_empty(&self) -> bool {
        self.upserted_questions.is_empty() && self.retired_question_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compaction {
    pub removed: u64,
    pub floor: i64,
}

fn payload<T: serde::de::DeserializeOwned>(op: &SyncOp) -> Result<T> {
    serde_json::from_value(op.payload.clone())
        .map_err(|e| Error::InvalidRequest(format!("{} payload: {e}", op.kind)))
}

fn parse_cursor(cursor: &str) -> Result<i64> {
    cursor
        .parse::<i64>()
        .ok()
        .filter(|c| *c >= 0)
        .ok_or_else(|| Error::CursorExpired(cursor.to_string()))
}

impl Store {
    /// Replays client ops in order. Each op commits or rolls back on its
    /// own, so a rejected op never blocks the ones after it.
    pub fn sync_push(&self, authenticated: &UserId, ops: &[SyncOp]) -> Result<Vec<OpResult>> {
        let mut results = Vec::with_capacity(ops.len());
        for op in ops {
            let status = match self.push_one(authenticated, op) {
                Ok(status) => status,
                Err(e @ (Error::Storage(_) | Error::Io(_))) => return Err(e),
                Err(e) => OpStatus::Rejected { reason: e.code().to_string() },
            };
            results.push(OpResult { op_id: op.op_id.clone(), status });
        }
        Ok(results)
    }

    fn push_one(&self, authenticated: &UserId, op: &SyncOp) -> Result<OpStatus> {
        if op.op_id.trim().is_empty() || op.op_id.len() > MAX_OP_ID_LEN {
            return Err(Error::InvalidRequest("op id must be 1 to 128 characters".into()));
        }
        if &op.user_id != authenticated {
            return Err(Error::Forbidden(format!("op {} belongs to another user", op.op_id)));
        }
        let now = self.now();
        self.write(|tx| {
            let seen: Option<String> = tx
                .query_row("SELECT user_id FROM sync_ops WHERE op_id = ?1", [&op.op_id], |r| r.get(0))
                .optional()?;
            match seen {
                Some(owner) if owner == op.user_id.as_str() => return Ok(OpStatus::Duplicate),
                Some(_) => return Err(Error::Forbidden(format!("op id {} already used", op.op_id))),
                None => {}
            }
            let client = Some(op.client_clock);
            match op.kind {
                SyncOpKind::McqResponse => {
                    let p: McqPayload = payload(op)?;
                    apply_mcq_response(tx, &op.user_id, &p.question_id, p.chosen_index, now, client)?;
                }
                SyncOpKind::SaqResponse => {
                    let p: SaqPayload = payload(op)?;
                    apply_saq_response(tx, &op.user_id, &p.question_id, &p.parts, p.self_correct, now, client)?;
                }
                SyncOpKind::Feedback => {
                    let p: FeedbackPayload = payload(op)?;
                    apply_feedback(tx, &op.user_id, &p.question_id, p.rating, p.comment.as_deref(), now, client)?;
                }
            }
            tx.execute(
                "INSERT INTO sync_ops (op_id, user_id, kind, client_at, server_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![op.op_id, op.user_id.as_str(), op.kind.as_str(), ts(op.client_clock), ts(now)],
            )?;
            Ok(OpStatus::Applied)
        })
    }

    /// Published-content changes after `cursor`, or a full snapshot when
    /// no cursor is given.
    pub fn sync_pull(&self, cursor: Option<&str>) -> Result<Changeset> {
        self.read(|c| {
            let latest: i64 = c.query_row("SELECT coalesce(max(seq), 0) FROM change_log", [], |r| r.get(0))?;
            let floor: i64 = meta_get(c, FLOOR_KEY)?.and_then(|v| v.parse().ok()).unwrap_or(0);
            let latest = latest.max(floor);
            let Some(cursor) = cursor else {
                let ids: Vec<String> = c
                    .prepare("SELECT id FROM questions WHERE state = 'published' ORDER BY created_at, id")?
                    .query_map([], |r| r.get(0))?
                    .collect::<rusqlite::Result<_>>()?;
                let upserted = ids.into_iter().map(|id| load_question(c, &id.into())).collect::<Result<_>>()?;
                return Ok(Changeset { cursor: latest.to_string(), upserted_questions: upserted, retired_question_ids: vec![] });
            };
            let since = parse_cursor(cursor)?;
            if since < floor || since > latest {
                return Err(Error::CursorExpired(cursor.to_string()));
            }
            // last change per question decides; the current row is the truth
            let mut touched: BTreeMap<i64, String> = BTreeMap::new();
            let mut last_seq: BTreeMap<String, i64> = BTreeMap::new();
            let rows: Vec<(i64, String)> = c
                .prepare("SELECT seq, question_id FROM change_log WHERE seq > ?1 ORDER BY seq")?
                .query_map([since], |r| Ok((r.get(0)?, r.get(1)?)))?
                .collect::<rusqlite::Result<_>>()?;
            for (seq, id) in rows {
                if let Some(old) = last_seq.insert(id.clone(), seq) {
                    touched.remove(&old);
                }
                touched.insert(seq, id);
            }
            let mut out = Changeset { cursor: latest.to_string(), upserted_questions: vec![], retired_question_ids: vec![] };
            for id in touched.into_values() {
                let q = load_question(c, &id.into())?;
                if q.state == QuestionState::Published {
                    out.upserted_questions.push(q);
                } else {
                    out.retired_question_ids.push(q.id);
                }
            }
            Ok(out)
        })
    }

    /// Drops change-log entries older than the retention window. Cursors
    /// issued before the newest dropped entry then expire.
    pub fn compact_change_log(&self, retention: Duration) -> Result<Compaction> {
        let cutoff = ts(self.now() - retention);
        self.write(|tx| {
            let newest: Option<i64> =
                tx.query_row("SELECT max(seq) FROM change_log WHERE at < ?1", [cutoff], |r| r.get(0))?;
            let Some(newest) = newest else {
                let floor = meta_get(tx, FLOOR_KEY)?.and_then(|v| v.parse().ok()).unwrap_or(0);
                return Ok(Compaction { removed: 0, floor });
            };
            let removed = tx.execute("DELETE FROM change_log WHERE seq <= ?1", [newest])? as u64;
            meta_set(tx, FLOOR_KEY, &newest.to_string())?;
            Ok(Compaction { removed, floor: newest })
        })
    }

    pub fn sync_op_count(&self) -> Result<u64> {
        self.read(|c| Ok(c.query_row("SELECT count(*) FROM sync_ops", [], |r| r.get::<_, i64>(0))? as u64))
    }
}

/// A client's cached copy of published content, kept current by applying
/// changesets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replica {
    pub cursor: Option<String>,
    pub questions: BTreeMap<QuestionId, Question>,
}

impl Replica {
    pub fn apply(&mut self, changes: &Changeset) {
        for q in &changes.upserted_questions {
            self.questions.insert(q.id.clone(), q.clone());
        }
        for id in &changes.retired_question_ids {
            self.questions.remove(id);
        }
        self.cursor = Some(changes.cursor.clone());
    }

    /// Pulls from the store, falling back to a full sync when the cursor
    /// has expired.
    pub fn pull(&mut self, store: &Store) -> Result<()> {
        match store.sync_pull(self.cursor.as_deref()) {
            Ok(changes) => self.apply(&changes),
            Err(Error::CursorExpired(_)) => {
                let full = store.sync_pull(None)?;
                self.questions.clear();
                self.apply(&full);
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }
}
